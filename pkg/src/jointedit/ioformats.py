"""Small file codecs: raw f32 tensors, PPM/PGM images, PLY/XYZ point clouds.

All multi-byte tensor payloads are little-endian; PGM 16-bit samples are
big-endian per the netpbm spec.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import CorruptionError, FormatError


def write_f32(path, arr):
    a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
    with open(path, "wb") as f:
        f.write(a.tobytes())
    return a.shape


def read_f32(path, shape):
    n = int(np.prod(shape))
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) != 4 * n:
        raise CorruptionError(f"{path}: expected {4 * n} bytes for shape {tuple(shape)}, got {len(buf)}")
    return np.frombuffer(buf, dtype="<f4").reshape(shape).copy()


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_ppm(path, img):
    """img [H,W,3] float in [0,1] -> binary P6, 8 bit."""
    a = np.asarray(img)
    if a.ndim != 3 or a.shape[2] != 3:
        raise FormatError(f"PPM needs [H,W,3], got {a.shape}")
    q = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{a.shape[1]} {a.shape[0]}\n255\n".encode())
        f.write(q.tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        buf = f.read()
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P6":
        raise FormatError(f"{path}: not a P6 PPM")
    w, h = map(int, parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8, count=h * w * 3)
    return data.reshape(h, w, 3).astype(np.float32) / 255.0


def write_pgm16(path, ranges):
    """Range grid in metres -> P5 16-bit millimetre PGM. Invalid cells -> 0."""
    a = np.asarray(ranges, dtype=np.float64)
    mm = np.where(a > 0, np.clip(np.rint(a * 1000.0), 0, 65535), 0).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{a.shape[1]} {a.shape[0]}\n65535\n".encode())
        f.write(mm.tobytes())


def read_pgm16(path):
    with open(path, "rb") as f:
        buf = f.read()
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P5":
        raise FormatError(f"{path}: not a P5 PGM")
    w, h = map(int, parts[1].split())
    if int(parts[2]) != 65535:
        raise FormatError(f"{path}: expected 16-bit maxval")
    mm = np.frombuffer(parts[3], dtype=">u2", count=h * w).reshape(h, w)
    out = mm.astype(np.float64) / 1000.0
    out[mm == 0] = -1.0
    return out


def write_ply(path, points):
    """ASCII PLY with float x y z."""
    p = np.asarray(points, dtype=np.float32)
    lines = [
        "ply", "format ascii 1.0",
        f"element vertex {p.shape[0]}",
        "property float x", "property float y", "property float z",
        "end_header",
    ]
    body = "\n".join(f"{a:.6f} {b:.6f} {c:.6f}" for a, b, c in p)
    with open(path, "w") as f:
        f.write("\n".join(lines))
        f.write("\n")
        if p.shape[0]:
            f.write(body)
            f.write("\n")


def read_ply(path):
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != "ply":
        raise FormatError(f"{path}: not a PLY file")
    n = 0
    start = 0
    for i, ln in enumerate(lines):
        if ln.startswith("element vertex"):
            n = int(ln.split()[-1])
        if ln == "end_header":
            start = i + 1
            break
    else:
        raise FormatError(f"{path}: missing end_header")
    rows = [list(map(float, lines[start + k].split())) for k in range(n)]
    return np.asarray(rows, dtype=np.float64).reshape(n, 3)


def write_xyz(path, points):
    p = np.asarray(points, dtype=np.float64)
    with open(path, "w") as f:
        for a, b, c in p:
            f.write(f"{a:.6f} {b:.6f} {c:.6f}\n")


def read_xyz(path):
    with open(path) as f:
        rows = [list(map(float, ln.split())) for ln in f if ln.strip()]
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), 3)
