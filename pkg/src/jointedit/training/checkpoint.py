"""Binary checkpoint format.

Layout (all integers little-endian):

    magic   4 bytes  b"MTED"
    u32     format version
    u32     stage
    u64     global step
    u32     schedule timesteps
    f64     beta_start
    f64     beta_end
    u32+utf8  config sha256 (hex)
    u32+utf8  RNG state (JSON)
    u32     tensor count
    per tensor:
        u32+utf8 name
        u8       dtype code (0=float32, 1=float64)
        u32      rank
        u64*rank dims
        raw LE payload
    32 bytes sha256 of everything above

Writes are atomic: the file is assembled at a temp path in the same
directory and moved into place with os.replace.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct

import numpy as np

from .. import CHECKPOINT_FORMAT_VERSION
from ..errors import CorruptionError, FormatError

MAGIC = b"MTED"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def _pack_str(buf, s):
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _read_exact(f, n, path):
    b = f.read(n)
    if len(b) != n:
        raise CorruptionError(f"{path}: truncated checkpoint")
    return b


def _unpack_str(f, path):
    (n,) = struct.unpack("<I", _read_exact(f, 4, path))
    return _read_exact(f, n, path).decode("utf-8")


def save_checkpoint(path, stage, step, schedule, config_hash, rng_state,
                    tensors):
    """tensors: {name: ndarray} (float32/float64 only)."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_FORMAT_VERSION))
    buf.write(struct.pack("<I", int(stage)))
    buf.write(struct.pack("<Q", int(step)))
    buf.write(struct.pack("<I", int(schedule["timesteps"])))
    buf.write(struct.pack("<d", float(schedule["beta_start"])))
    buf.write(struct.pack("<d", float(schedule["beta_end"])))
    _pack_str(buf, config_hash)
    _pack_str(buf, rng_state)
    names = sorted(tensors)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.asarray(tensors[name])
        if arr.dtype == np.bool_:
            arr = arr.astype(np.float32)
        if arr.dtype not in _CODES:
            arr = arr.astype(np.float64 if arr.dtype.kind == "f" else np.float32)
        code = _CODES[arr.dtype]
        le = arr.astype(_DTYPES[code], copy=False)
        _pack_str(buf, name)
        buf.write(struct.pack("<B", code))
        buf.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<Q", d))
        buf.write(np.ascontiguousarray(le).tobytes())
    body = buf.getvalue()
    digest = hashlib.sha256(body).digest()
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(body)
        f.write(digest)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def load_checkpoint(path):
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}") from None
    if len(blob) < 36 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptionError(f"{path}: integrity hash mismatch")
    f = io.BytesIO(body)
    f.seek(4)
    (version,) = struct.unpack("<I", _read_exact(f, 4, path))
    if version != CHECKPOINT_FORMAT_VERSION:
        raise FormatError(
            f"{path}: checkpoint format {version}, supported {CHECKPOINT_FORMAT_VERSION}")
    (stage,) = struct.unpack("<I", _read_exact(f, 4, path))
    (step,) = struct.unpack("<Q", _read_exact(f, 8, path))
    (timesteps,) = struct.unpack("<I", _read_exact(f, 4, path))
    (beta_start,) = struct.unpack("<d", _read_exact(f, 8, path))
    (beta_end,) = struct.unpack("<d", _read_exact(f, 8, path))
    config_hash = _unpack_str(f, path)
    rng_state = _unpack_str(f, path)
    (count,) = struct.unpack("<I", _read_exact(f, 4, path))
    tensors = {}
    for _ in range(count):
        name = _unpack_str(f, path)
        (code,) = struct.unpack("<B", _read_exact(f, 1, path))
        if code not in _DTYPES:
            raise CorruptionError(f"{path}: unknown dtype code {code} for {name!r}")
        (rank,) = struct.unpack("<I", _read_exact(f, 4, path))
        dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, path))
        n = int(np.prod(dims)) if rank else 1
        raw = _read_exact(f, n * _DTYPES[code].itemsize, path)
        tensors[name] = np.frombuffer(raw, dtype=_DTYPES[code]).reshape(dims).copy()
    leftover = f.read()
    if leftover:
        raise CorruptionError(f"{path}: {len(leftover)} trailing bytes")
    return {
        "version": version,
        "stage": stage,
        "step": step,
        "schedule": {"timesteps": timesteps, "beta_start": beta_start,
                     "beta_end": beta_end},
        "config_hash": config_hash,
        "rng_state": rng_state,
        "tensors": tensors,
    }
