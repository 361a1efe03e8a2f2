"""Binary containers: magic bytes, a length-prefixed JSON header, then a
little-endian float32 payload.

Checkpoints use the same layout with magic ``EDC1``; the header lists every
tensor (name, shape) in payload order plus free-form metadata and a SHA-256
checksum of the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from edk.errors import FormatError

CHECKPOINT_MAGIC = b"EDC1"


def pack_header(header: dict) -> bytes:
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<I", len(blob)) + blob


def read_header(buf: bytes, magic: bytes) -> tuple[dict, int]:
    """Validate magic and decode the JSON header. Returns (header, payload offset)."""
    if len(buf) < len(magic) + 4:
        raise FormatError("file too short for header")
    if buf[: len(magic)] != magic:
        raise FormatError(f"bad magic {bytes(buf[:len(magic)])!r}, expected {magic!r}")
    (n,) = struct.unpack_from("<I", buf, len(magic))
    start = len(magic) + 4
    if len(buf) < start + n:
        raise FormatError("header length exceeds file size")
    try:
        header = json.loads(bytes(buf[start:start + n]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"malformed header JSON: {e}") from e
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object")
    return header, start + n


def state_payload(state: "OrderedDict[str, torch.Tensor]") -> tuple[list[dict], bytes]:
    specs, chunks = [], []
    for name, t in state.items():
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4")
        specs.append({"name": name, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
    return specs, b"".join(chunks)


def state_checksum(state: "OrderedDict[str, torch.Tensor]") -> str:
    return hashlib.sha256(state_payload(state)[1]).hexdigest()


def save_blob(path: str | Path, kind: str, meta: dict, state) -> str:
    specs, payload = state_payload(state)
    digest = hashlib.sha256(payload).hexdigest()
    header = {"kind": kind, "meta": meta, "tensors": specs, "checksum": digest}
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(pack_header(header))
        fh.write(payload)
    return digest


def load_blob(path: str | Path, kind: str | None = None) -> tuple[dict, "OrderedDict[str, torch.Tensor]"]:
    buf = Path(path).read_bytes()
    header, offset = read_header(buf, CHECKPOINT_MAGIC)
    if kind is not None and header.get("kind") != kind:
        raise FormatError(f"expected a {kind!r} checkpoint, found {header.get('kind')!r}")
    payload = buf[offset:]
    if hashlib.sha256(payload).hexdigest() != header.get("checksum"):
        raise FormatError("checkpoint payload checksum mismatch")
    state: OrderedDict[str, torch.Tensor] = OrderedDict()
    pos = 0
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=pos).reshape(shape)
        state[spec["name"]] = torch.from_numpy(arr.astype(np.float32))
        pos += 4 * n
    if pos != len(payload):
        raise FormatError("checkpoint payload size disagrees with tensor table")
    return header, state


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
