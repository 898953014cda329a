"""Bit-exact model checkpoints.

Layout (little endian)::

    b"SGCLCKPT" u16 version
    u32 len + JSON config block
    u32 n_params, then per parameter: u16 len + name, u8 ndim, u32 dims..., raw f64
    u8 has_optimizer [u64 step, then first and second moments per parameter]
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, ModelParams
from .tensor import Tensor

MAGIC = b"SGCLCKPT"
VERSION = 1


def _write_raw(fh, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_raw(fh, shape) -> np.ndarray:
    n = int(np.prod(shape)) if shape else 1
    return np.frombuffer(fh.read(8 * n), dtype="<f8").astype(np.float64).reshape(shape)


def save_checkpoint(path: str | Path, params: ModelParams, meta: dict | None = None, optimizer=None) -> None:
    block = json.dumps({"encoder": params.config_dict(), **(meta or {})}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<H", VERSION))
        fh.write(struct.pack("<I", len(block)) + block)
        fh.write(struct.pack("<I", len(params.tensors)))
        for name, t in params.items():
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
            _write_raw(fh, t.data)
        if optimizer is None:
            fh.write(b"\0")
            return
        fh.write(b"\1" + struct.pack("<Q", optimizer.step))
        for name in params:
            _write_raw(fh, optimizer.m[name])
            _write_raw(fh, optimizer.v[name])


def load_checkpoint(path: str | Path):
    """Return ``(params, meta, optimizer_state_or_None)``."""
    from .trainer import AdamState

    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(n))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack("<H", fh.read(2))
            name = fh.read(ln).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            tensors[name] = Tensor(_read_raw(fh, shape), requires_grad=True, name=name)
        enc = dict(meta["encoder"])
        enc.pop("n_items")
        params = ModelParams(tensors, EncoderConfig(**enc))
        state = None
        if fh.read(1) == b"\1":
            (step,) = struct.unpack("<Q", fh.read(8))
            m, v = {}, {}
            for name, t in tensors.items():
                m[name] = _read_raw(fh, t.shape)
                v[name] = _read_raw(fh, t.shape)
            state = AdamState(m=m, v=v, step=step)
    return params, meta, state
