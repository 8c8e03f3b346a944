"""Self-describing binary checkpoint container.

Layout (all integers little-endian)::

    b"UGNN" | u32 version | u64 meta_len | meta (UTF-8 JSON)
    u32 n_tensors
    per tensor: u16 name_len | name | u8 dtype | u8 ndim | u64 * ndim shape | payload
    u32 CRC32 of everything before it

The metadata carries the model kind and config, design constants and a
training summary, so no sidecar file is needed to rebuild the model.
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from . import tensor_core as tc
from .model import SdcModel, model_from_config

MAGIC = b"UGNN"
VERSION = 1
_DTYPE_CODES = {torch.float32: 0, torch.float64: 1, torch.int64: 2}
_NP_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODE_NAMES = {0: "f32", 1: "f64", 2: "i64"}


class CheckpointError(ValueError):
    pass


def _design_constants() -> dict:
    from . import layers, upd, verification

    return dict(
        bjorck_train_iters=layers.BJORCK_TRAIN_ITERS, bjorck_freeze_iters=layers.BJORCK_FREEZE_ITERS,
        power_iters=layers.POWER_ITERS, upd_steps=upd.UPD_STEPS, lbfgs_inner_iters=upd.INNER_ITERS,
        lbfgs_memory=upd.MEMORY, armijo_c1=upd.ARMIJO_C1, backtrack=upd.BACKTRACK,
        max_backtracks=upd.MAX_BACKTRACKS, penalty_c0=verification.PENALTY_C0,
        penalty_rounds=verification.PENALTY_ROUNDS, penalty_inner=verification.PENALTY_INNER,
    )


def save_checkpoint(model: SdcModel, path, extra: dict | None = None) -> None:
    meta = dict(kind=model.kind, config=model.config, frozen=model.frozen,
                design=_design_constants())
    if extra:
        meta.update(extra)
    buf = io.BytesIO()
    meta_bytes = json.dumps(meta, sort_keys=True, default=_json_default).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, t in state.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {t.dtype}")
        code = _DTYPE_CODES[t.dtype]
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", code, t.dim()))
        buf.write(struct.pack(f"<{t.dim()}Q", *t.shape))
        buf.write(t.numpy().astype(_NP_DTYPES[code], copy=False).tobytes())
    body = buf.getvalue()
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def _json_default(o):
    if isinstance(o, (tuple, set)):
        return list(o)
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[dict, dict]:
    """Parse a checkpoint into ``(metadata, {name: tensor})`` without building a model."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a UGNN checkpoint (bad magic)")
    if len(data) < 20:
        raise CheckpointError("checkpoint is truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.take(4)
    version, meta_len = r.unpack("<IQ")
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint is truncated or corrupted (checksum mismatch)")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (n,) = r.unpack("<I")
    tensors = {}
    for _ in range(n):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _NP_DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        dt = _NP_DTYPES[code]
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensor table")
    return meta, tensors


def load_checkpoint(path, dtype=None) -> tuple[SdcModel, dict]:
    """Rebuild the model stored at ``path``; ``dtype`` widens/narrows all parameters."""
    meta, tensors = read_checkpoint(path)
    config = dict(meta["config"])
    if dtype is not None:
        config["dtype"] = dtype if isinstance(dtype, str) else {v: k for k, v in tc.DTYPES.items()}[dtype]
    model = model_from_config(meta["kind"], config)
    target = tc.resolve_dtype(config.get("dtype", "f64"))
    expected = model.state_dict()
    missing = set(expected) - set(tensors)
    unexpected = set(tensors) - set(expected)
    if missing or unexpected:
        raise CheckpointError(f"tensor table does not match the model (missing {sorted(missing)}, "
                              f"unexpected {sorted(unexpected)})")
    for name, t in tensors.items():
        if tuple(t.shape) != tuple(expected[name].shape):
            raise CheckpointError(f"tensor {name!r} has shape {tuple(t.shape)}, "
                                  f"model expects {tuple(expected[name].shape)}")
    model.load_state_dict({k: v.to(target) if v.is_floating_point() else v for k, v in tensors.items()})
    model.eval()
    if meta.get("frozen"):
        model.freeze()
    return model, meta
