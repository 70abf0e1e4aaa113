"""NNC1 model checkpoints.

Layout (little-endian)::

    b"NNC1"
    u8   architecture id
    u64  number of tensors
    per tensor:
        u16 name length, name (utf-8)
        u8  rank, u32 x rank dims
        float64 payload
"""

from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path

import numpy as np
import torch

from cdstl.errors import ArtifactIOError, DataFormatError
from cdstl.nncore.model import DTYPE, Arch, Model

MAGIC = b"NNC1"


def checkpoint_bytes(model: Model) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<BQ", int(model.arch), len(model.params)))
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        arr = t.detach().cpu().numpy().astype("<f8", copy=False)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def model_hash(model: Model) -> str:
    return hashlib.sha256(checkpoint_bytes(model)).hexdigest()[:16]


def save_model(model: Model, path) -> str:
    """Write the checkpoint; returns its content hash."""
    data = checkpoint_bytes(model)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write checkpoint {path}: {exc}") from exc
    return hashlib.sha256(data).hexdigest()[:16]


def _take(data: bytes, offset: int, n: int, what: str) -> bytes:
    if offset + n > len(data):
        raise DataFormatError(f"truncated checkpoint while reading {what}", offset)
    return data[offset : offset + n]


def parse_model(data: bytes, requires_grad: bool = False) -> Model:
    if data[:4] != MAGIC:
        raise DataFormatError(f"bad checkpoint magic {data[:4]!r}", 0)
    off = 4
    arch_id, count = struct.unpack("<BQ", _take(data, off, 9, "header"))
    off += 9
    try:
        arch = Arch(arch_id)
    except ValueError:
        raise DataFormatError(f"unknown architecture id {arch_id}", 4) from None
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _take(data, off, 2, "name length"))
        off += 2
        name = _take(data, off, nlen, "name").decode("utf-8")
        off += nlen
        (rank,) = struct.unpack("<B", _take(data, off, 1, "rank"))
        off += 1
        dims = struct.unpack(f"<{rank}I", _take(data, off, 4 * rank, "dims"))
        off += 4 * rank
        n = int(np.prod(dims, dtype=np.int64))
        payload = _take(data, off, 8 * n, f"payload of {name!r}")
        off += 8 * n
        arr = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
        params[name] = torch.tensor(arr, dtype=DTYPE).requires_grad_(requires_grad)
    if off != len(data):
        raise DataFormatError("trailing bytes after last tensor", off)
    num_classes = params["head.weight"].shape[0] if "head.weight" in params else None
    return Model(arch, params, num_classes)


def load_model(path, requires_grad: bool = False) -> Model:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_model(data, requires_grad)
