"""Pure-numpy kernel implementations.

These are the fallback for the compiled extension in _native.pyx and the
ground truth it is tested against. conv2d uses im2col + BLAS matmul; the
bilinear gather uses fancy indexing. All functions accept float32 or float64
and return the same dtype.
"""

import numpy as np

BACKEND = "reference"


def _im2col(x, kh, kw, stride):
    # x: [B, C, Hp, Wp] already padded. Returns [B, Ho, Wo, C*kh*kw].
    b, c, hp, wp = x.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [B, C, Ho, Wo, kh, kw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(b, ho, wo, c * kh * kw), ho, wo


def conv2d_fwd(x, w, stride, pad):
    """x [B,C,H,W], w [O,C,kh,kw] -> y [B,O,Ho,Wo]."""
    b = x.shape[0]
    o, c, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    y = cols.reshape(-1, c * kh * kw) @ w.reshape(o, -1).T
    return np.ascontiguousarray(y.reshape(b, ho, wo, o).transpose(0, 3, 1, 2))


def conv2d_bwd_w(x, gy, stride, pad, w_shape):
    o, c, kh, kw = w_shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    gyr = gy.transpose(1, 0, 2, 3).reshape(o, -1)  # [O, B*Ho*Wo]
    gw = gyr @ cols.reshape(-1, c * kh * kw)
    return gw.reshape(o, c, kh, kw)


def conv2d_bwd_x(gy, w, stride, pad, x_shape):
    b, c, h, wd = x_shape
    o, _, kh, kw = w.shape
    _, _, ho, wo = gy.shape
    # cols gradient, then col2im scatter-add per kernel tap.
    gyr = gy.transpose(0, 2, 3, 1).reshape(-1, o)  # [B*Ho*Wo, O]
    gcols = (gyr @ w.reshape(o, -1)).reshape(b, ho, wo, c, kh, kw)
    gxp = np.zeros((b, c, h + 2 * pad, wd + 2 * pad), dtype=gy.dtype)
    for ky in range(kh):
        ye = ky + stride * ho
        for kx in range(kw):
            xe = kx + stride * wo
            gxp[:, :, ky:ye:stride, kx:xe:stride] += gcols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
    if pad:
        return np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + wd])
    return gxp


def _corners(fm, pts):
    b, c, h, w = fm.shape
    x = pts[:, :, 0]
    y = pts[:, :, 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    out = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            xc = np.clip(xi, 0, w - 1)
            yc = np.clip(yi, 0, h - 1)
            out.append((xc, yc, ok))
    return x0, y0, fx, fy, out


def bilinear_gather_fwd(fm, pts):
    """fm [B,C,H,W], pts [B,N,2] (x,y index coords) -> [B,N,C].

    Zero padding outside the grid: out-of-bounds corners contribute 0.
    """
    b, c, h, w = fm.shape
    n = pts.shape[1]
    _, _, fx, fy, corners = _corners(fm, pts)
    # corner order is (dy=0,dx=0), (dy=0,dx=1), (dy=1,dx=0), (dy=1,dx=1)
    wts = [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy]
    bi = np.arange(b)[:, None]
    out = np.zeros((b, n, c), dtype=fm.dtype)
    for (xc, yc, ok), wt in zip(corners, wts):
        vals = fm[bi, :, yc, xc]  # [B,N,C]
        out += vals * (wt * ok).astype(fm.dtype)[:, :, None]
    return out


def bilinear_gather_bwd(fm, pts, gout):
    """Returns (gfm [B,C,H,W], gpts [B,N,2])."""
    b, c, h, w = fm.shape
    _, _, fx, fy, corners = _corners(fm, pts)
    wts = [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy]
    # d wt / d fx and / d fy per corner
    dwx = [-(1 - fy), (1 - fy), -fy, fy]
    dwy = [-(1 - fx), -fx, (1 - fx), fx]
    bi = np.arange(b)[:, None]
    gfm = np.zeros_like(fm)
    gx = np.zeros(fx.shape, dtype=fm.dtype)
    gy = np.zeros(fy.shape, dtype=fm.dtype)
    gflat = gfm.reshape(b, c, h * w)
    for (xc, yc, ok), wt, dx_, dy_ in zip(corners, wts, dwx, dwy):
        okf = ok.astype(fm.dtype)
        contrib = gout * (wt * okf)[:, :, None]  # [B,N,C]
        lin = (yc * w + xc)  # [B,N]
        for bb in range(b):
            np.add.at(gflat[bb], (slice(None), lin[bb]), contrib[bb].T)
        vals = fm[bi, :, yc, xc] * okf[:, :, None]
        dot = (gout * vals).sum(axis=2)  # [B,N]
        gx += dot * dx_.astype(fm.dtype)
        gy += dot * dy_.astype(fm.dtype)
    gpts = np.stack([gx, gy], axis=2)
    return gfm, gpts
