"""Versioned binary checkpoints.

Layout (little-endian): magic "PEHCM1", u32 version, i64 seed, f64
curvature, u8 space flag, u32 n_coarse, the encoder and projector layer
dims, u64 Adam step, the five target-ladder floats, then every parameter
(name, shape, values, first moment, second moment) in registration order.
All floating-point payloads are raw IEEE-754 doubles, so a save/load
round trip is bitwise exact.
"""

import io
import os
import struct

import numpy as np

from .margins import TargetDistances
from .network import ParamStore

MAGIC = b"PEHCM1"
VERSION = 1

_SPACES = ("euclidean", "hyperbolic")


class CheckpointError(RuntimeError):
    pass


def _write_dims(buf, dims):
    buf.write(struct.pack("<I", len(dims)))
    buf.write(struct.pack(f"<{len(dims)}I", *dims))


def _read_dims(buf):
    (count,) = struct.unpack("<I", buf.read(4))
    return list(struct.unpack(f"<{count}I", buf.read(4 * count)))


def save_checkpoint(path, store, meta, targets):
    """meta needs: seed, curvature, space, n_coarse, encoder_dims,
    projector_dims."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<qd", int(meta["seed"]), float(meta["curvature"])))
    buf.write(struct.pack("<B", _SPACES.index(meta["space"])))
    buf.write(struct.pack("<I", int(meta["n_coarse"])))
    _write_dims(buf, meta["encoder_dims"])
    _write_dims(buf, meta["projector_dims"])
    buf.write(struct.pack("<Q", store.step))
    buf.write(struct.pack("<5d", targets.d0, targets.d1, targets.d2,
                          targets.d3, targets.beta))
    names = store.names()
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        raw = name.encode()
        tensor = store.tensor(name)
        m, v = store.moments(name)
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", tensor.data.ndim))
        buf.write(struct.pack(f"<{tensor.data.ndim}I", *tensor.data.shape))
        for arr in (tensor.data, m, v):
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    _atomic_write(path, buf.getvalue())


def load_checkpoint(path):
    """Returns (meta dict, ParamStore, TargetDistances)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    buf = io.BytesIO(blob)
    if buf.read(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a {MAGIC.decode()} checkpoint")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} is not "
                              f"supported (expected {VERSION})")
    seed, curvature = struct.unpack("<qd", buf.read(16))
    (space_flag,) = struct.unpack("<B", buf.read(1))
    (n_coarse,) = struct.unpack("<I", buf.read(4))
    encoder_dims = _read_dims(buf)
    projector_dims = _read_dims(buf)
    (step,) = struct.unpack("<Q", buf.read(8))
    d0, d1, d2, d3, beta = struct.unpack("<5d", buf.read(40))
    targets = TargetDistances(d1=d1, d2=d2, beta=beta, d0=d0, d3=d3)
    store = ParamStore()
    store.step = step
    (n_params,) = struct.unpack("<I", buf.read(4))
    for _ in range(n_params):
        (name_len,) = struct.unpack("<H", buf.read(2))
        name = buf.read(name_len).decode()
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
        size = int(np.prod(shape)) if shape else 1
        arrays = []
        for _ in range(3):
            arrays.append(np.frombuffer(buf.read(8 * size), "<f8").reshape(shape))
        store.load(name, arrays[0].copy(), arrays[1].copy(), arrays[2].copy())
    meta = {
        "seed": seed,
        "curvature": curvature,
        "space": _SPACES[space_flag],
        "n_coarse": n_coarse,
        "encoder_dims": encoder_dims,
        "projector_dims": projector_dims,
    }
    return meta, store, targets


def _atomic_write(path, payload):
    path = os.fspath(path)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)
