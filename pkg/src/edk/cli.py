"""Command-line entry point: ``edk <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 protocol
violation (such as extracting features with an unfrozen encoder).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from edk.config import RunConfig, load_config
from edk.errors import ConfigError, FormatError, ProtocolError
from edk.diffusion import make_cosine_schedule
from edk.evaluation import evaluate, report_json
from edk.fileio import file_digest
from edk.frame_encoder import (
    FrameEncoder,
    export_features,
    extract_features,
    import_precomputed,
    train_frame_classifier,
)
from edk.fusion import fuse, select_planes
from edk.model import Stage2Model
from edk.pipeline import stage2_from_fused
from edk.plot import stage_bars_svg
from edk.stages import StageSequence, load_labels, segments_of
from edk.synthetic import generate_dataset, read_dataset, write_dataset

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_PROTOCOL = 0, 2, 3, 4

log = logging.getLogger("edk")


class DataError(Exception):
    """Missing or unreadable input data."""


def _config(args) -> RunConfig:
    return load_config(getattr(args, "config", None), getattr(args, "profile", "desk"),
                       getattr(args, "set", None) or [])


def _write_run_record(out: Path, cfg: RunConfig | None, inputs: Sequence[Path], outputs: Sequence[Path],
                      extra: dict | None = None) -> None:
    """``<out>.run.json``: resolved config, its digest, input and output digests."""
    record = {
        "config": cfg.to_dict() if cfg else None,
        "config_digest": cfg.digest() if cfg else None,
        "inputs": {str(p): file_digest(p) for p in inputs if p.is_file()},
        "outputs": {str(p): file_digest(p) for p in outputs if p.is_file()},
    }
    if extra:
        record.update(extra)
    Path(str(out) + ".run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _read_data(path: str):
    p = Path(path)
    if not p.is_file():
        raise DataError(f"dataset not found: {p}")
    return read_dataset(p)


def _load_encoder(path: str) -> FrameEncoder:
    if not Path(path).is_file():
        raise DataError(f"encoder checkpoint not found: {path}")
    return FrameEncoder.load(path)


def _load_model(path: str) -> Stage2Model:
    if not Path(path).is_file():
        raise DataError(f"model checkpoint not found: {path}")
    return Stage2Model.load(path)


def _feature_files(path: str) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.edf"))
    elif p.is_file():
        files = [p]
    else:
        raise DataError(f"feature path not found: {p}")
    if not files:
        raise DataError(f"no .edf feature files under {p}")
    return files


def _fused_inputs(args, cfg: RunConfig) -> tuple[list[np.ndarray], list[np.ndarray], object, list[Path], str | None]:
    """Fused sequences, labels, vocab, input paths and encoder checksum from either
    precomputed feature files or raw data plus an encoder."""
    planes = cfg.fusion.planes
    if getattr(args, "features", None):
        files = _feature_files(args.features)
        stacks = [import_precomputed(f) for f in files]
        if any(s.labels is None for s in stacks) and getattr(args, "need_labels", True):
            raise DataError("feature files carry no labels")
        fused = [fuse(select_planes(s, planes) if planes is not None else s) for s in stacks]
        labels = [s.labels.labels if s.labels is not None else None for s in stacks]
        return fused, labels, stacks[0].vocab, files, None
    if not getattr(args, "data", None) or not getattr(args, "encoder", None):
        raise ConfigError("give either --features, or --data together with --encoder")
    dataset = _read_data(args.data)
    enc = _load_encoder(args.encoder)
    fused = []
    for stack in dataset:
        feats = extract_features(enc, stack)
        if planes is not None:
            feats = select_planes(feats, planes)
        fused.append(fuse(feats))
    return (fused, [s.labels.labels for s in dataset], dataset[0].labels.vocab,
            [Path(args.data), Path(args.encoder)], enc.checksum())


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    n = args.n if args.n is not None else cfg.n_sequences
    stacks = generate_dataset(cfg.data, n)
    out = Path(args.out)
    write_dataset(stacks, out)
    _write_run_record(out, cfg, [], [out])
    print(f"wrote {n} records to {out} ({file_digest(out)[:16]})")
    return EXIT_OK


def cmd_train_frame(args) -> int:
    cfg = _config(args)
    dataset = _read_data(args.data)
    enc = train_frame_classifier(dataset, cfg.frame, cfg.seed)
    if args.no_freeze:
        # kept only so the extraction refusal can be exercised
        enc.frozen = False
        enc._checksum = None
    out = Path(args.out)
    enc.save(out)
    _write_run_record(out, cfg, [Path(args.data)], [out], {"report": enc.report})
    print(json.dumps({"frozen": enc.frozen, "checksum": enc.checksum(), **enc.report}))
    return EXIT_OK


def cmd_extract(args) -> int:
    enc = _load_encoder(args.encoder)
    if not enc.frozen:
        raise ProtocolError("encoder checkpoint is not frozen; refusing to extract features")
    dataset = _read_data(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for k, stack in enumerate(dataset):
        path = out / f"rec_{k:05d}.edf"
        export_features(extract_features(enc, stack), path)
        written.append(path)
    _write_run_record(out / "extract", None, [Path(args.encoder), Path(args.data)], written,
                      {"encoder_checksum": enc.checksum()})
    print(f"wrote {len(written)} feature files to {out}")
    return EXIT_OK


def cmd_train_diff(args) -> int:
    cfg = _config(args)
    fused, labels, vocab, inputs, enc_sum = _fused_inputs(args, cfg)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else Path(str(out) + ".log.jsonl")
    with open(log_path, "w") as fh:
        def on_step(rec):
            fh.write(json.dumps(rec) + "\n")

        model, history = stage2_from_fused(cfg, fused, labels, vocab, enc_sum, on_step)
    if enc_sum and _load_encoder(args.encoder).checksum() != enc_sum:
        raise ProtocolError("frame encoder changed during stage 2")
    model.save(out, extra={"config_digest": cfg.digest(), "eta": cfg.diffusion.eta})
    _write_run_record(out, cfg, inputs, [out, log_path])
    last = history[-1]
    print(json.dumps({"steps": len(history), "final_total": last["total"], "model": str(out)}))
    return EXIT_OK


def _parse_ints(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from e
    if not vals:
        raise ConfigError("empty integer list")
    return vals


def cmd_eval(args) -> int:
    cfg = _config(args)
    if args.dump_schedule:
        model = _load_model(args.model) if args.model else None
        sched = model.schedule if model else make_cosine_schedule(cfg.diffusion.S)
        Path(args.dump_schedule).write_text(json.dumps(sched.to_json()) + "\n")
        if not args.model or not (args.data or args.features):
            return EXIT_OK
    model = _load_model(args.model)
    fused, labels, _, inputs, enc_sum = _fused_inputs(args, cfg)
    if enc_sum and model.frame_encoder_checksum and enc_sum != model.frame_encoder_checksum:
        raise ProtocolError("encoder checksum differs from the one the model was trained with")
    steps = _parse_ints(args.steps) if args.steps else cfg.eval.steps
    n_seeds = args.seeds if args.seeds is not None else cfg.eval.seeds
    aggregate = args.aggregate or cfg.eval.aggregate
    seeds = [cfg.seed + k for k in range(n_seeds)]
    result = evaluate(model, fused, labels, steps, seeds, aggregate, cfg.diffusion.eta,
                      cfg.eval.batch_size)
    report = report_json(result, cfg.digest())
    report["aggregate"], report["seeds"] = aggregate, seeds
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        _write_run_record(Path(args.out), cfg, inputs + [Path(args.model)], [Path(args.out)])
    for k, r in result["reports"].items():
        print(f"steps={k:<4d} acc={r.acc:6.2f} edit={r.edit:6.2f} f1@10={r.f1_10:6.2f} "
              f"f1@25={r.f1_25:6.2f} f1@50={r.f1_50:6.2f} avg={r.avg:6.2f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _config(args)
    model = _load_model(args.model)
    args.need_labels = False
    fused, labels, vocab, inputs, _ = _fused_inputs(args, cfg)
    if args.index >= len(fused):
        raise DataError(f"--index {args.index} out of range for {len(fused)} sequences")
    x = fused[args.index]
    pred = model.predict([x], args.steps, seed=cfg.seed, eta=cfg.diffusion.eta)[0]
    seq = StageSequence(pred, model.vocab)
    payload = {
        "vocab": list(model.vocab.names),
        "labels": seq.tolist(),
        "T": seq.T,
        "segments": [[s.stage, s.start, s.end] for s in segments_of(seq)],
        "steps": args.steps,
        "seed": cfg.seed,
    }
    out = Path(args.out)
    out.write_text(json.dumps(payload) + "\n")
    if args.gt_out and labels[args.index] is not None:
        Path(args.gt_out).write_text(json.dumps(
            {"vocab": list(vocab.names), "labels": [int(v) for v in labels[args.index]]}) + "\n")
    _write_run_record(out, cfg, inputs + [Path(args.model)], [out])
    return EXIT_OK


def cmd_plot(args) -> int:
    gt = load_labels(args.gt)
    rows = []
    for p in args.pred:
        seq = load_labels(p)
        if seq.vocab != gt.vocab:
            raise DataError(f"{p}: vocabulary differs from ground truth")
        rows.append((Path(p).stem, seq.labels))
    rows.append(("ground truth", gt.labels))
    try:
        svg = stage_bars_svg(rows, gt.vocab)
    except ValueError as e:
        raise DataError(str(e)) from e
    Path(args.out).write_text(svg)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="edk", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--profile", default="desk", help="base profile: desk, paper, mfhe-like")
        p.add_argument("--set", action="append", metavar="a.b.c=v", help="override a config key")
        return p

    p = with_config(sub.add_parser("gen-data", help="generate a synthetic dataset (EDK1)"))
    p.add_argument("--n", type=int, help="record count (default: n_sequences)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = with_config(sub.add_parser("train-frame", help="stage 1: train and freeze the frame encoder"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-freeze", action="store_true",
                   help="store an unfrozen encoder (extraction will refuse it)")
    p.set_defaults(fn=cmd_train_frame)

    p = sub.add_parser("extract", help="per-plane features from a frozen encoder (EDF1 files)")
    p.add_argument("--encoder", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_extract)

    def with_inputs(p):
        p.add_argument("--features", help="EDF1 file or directory of .edf files")
        p.add_argument("--data", help="EDK1 dataset (needs --encoder)")
        p.add_argument("--encoder", help="frozen frame encoder checkpoint")
        return p

    p = with_inputs(with_config(sub.add_parser("train-diff", help="stage 2: train the diffusion model")))
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="JSON-lines training log (default: <out>.log.jsonl)")
    p.set_defaults(fn=cmd_train_diff)

    p = with_inputs(with_config(sub.add_parser("eval", help="DDIM evaluation over step counts and seeds")))
    p.add_argument("--model")
    p.add_argument("--steps", help="comma-separated DDIM step counts, e.g. 1,15,25")
    p.add_argument("--seeds", type=int, help="number of sampling seeds")
    p.add_argument("--aggregate", choices=["per-seq", "pooled"])
    p.add_argument("--out", help="JSON report path")
    p.add_argument("--dump-schedule", metavar="PATH", help="write the S+1 bar-alpha values as JSON")
    p.set_defaults(fn=cmd_eval)

    p = with_inputs(with_config(sub.add_parser("predict", help="labels and segments for one sequence")))
    p.add_argument("--model", required=True)
    p.add_argument("--index", type=int, default=0, help="sequence index within the input")
    p.add_argument("--steps", type=int, default=15)
    p.add_argument("--out", required=True)
    p.add_argument("--gt-out", help="also write the ground-truth labels file")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("plot", help="SVG stage bars: predictions plus ground truth")
    p.add_argument("--pred", nargs="+", required=True, help="label JSON files")
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plot)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.use_deterministic_algorithms(True)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ProtocolError as e:
        print(f"protocol violation: {e}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (DataError, FormatError, OSError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
