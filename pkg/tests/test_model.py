import numpy as np
import pytest
import torch

from edk import FormatError
from edk.conditions import TemporalEncoderConfig
from edk.denoiser import DenoiserConfig
from edk.model import Stage2Model, pad_batch, sequence_noise
from edk.stages import StageVocabulary


def make(seed=0, **kw):
    return Stage2Model.create(6, StageVocabulary.generic(4),
                              TemporalEncoderConfig(layers=2, hidden=8, tap_layers=[1, 2], base_window=4),
                              DenoiserConfig(blocks=1, width=16, heads=2), seed=seed, **kw)


def feats(seed=0):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((T, 6)).astype(np.float32) for T in (9, 14, 5)]


def test_create_is_seeded_and_leaves_global_rng_alone():
    torch.manual_seed(1)
    expected = torch.rand(2)
    torch.manual_seed(1)
    a = make(3)
    assert torch.equal(torch.rand(2), expected)
    assert a.checksum() == make(3).checksum() != make(4).checksum()


def test_pad_batch():
    x, mask = pad_batch([np.ones((2, 3)), np.ones((4, 3))])
    assert x.shape == (2, 4, 3) and mask.tolist() == [[True, True, False, False], [True] * 4]
    assert x[0, 2:].abs().sum() == 0


def test_sequence_noise_depends_only_on_seed_and_index():
    assert torch.equal(sequence_noise(1, 2, 5, 4), sequence_noise(1, 2, 5, 4))
    assert not torch.equal(sequence_noise(1, 2, 5, 4), sequence_noise(1, 3, 5, 4))


def test_prediction_independent_of_batching():
    model = make().eval()
    fs = feats()
    together = model.predict(fs, 5, seed=2)
    alone = [model.predict(fs, 5, seed=2, batch_size=1)[k] for k in range(3)]
    assert all(np.array_equal(a, b) for a, b in zip(together, alone))
    assert [len(p) for p in together] == [9, 14, 5]


def test_save_load_round_trip(tmp_path):
    model = make(reembed=False)
    model.frame_encoder_checksum = "ab" * 32
    path = tmp_path / "m.eds"
    model.save(path, extra={"note": "x"})
    back = Stage2Model.load(path)
    assert back.checksum() == model.checksum()
    assert back.reembed is False and back.frame_encoder_checksum == "ab" * 32 and back.extra == {"note": "x"}
    fs = feats(1)
    assert all(np.array_equal(a, b) for a, b in zip(model.predict(fs, 3), back.predict(fs, 3)))
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(FormatError):
        Stage2Model.load(path)
