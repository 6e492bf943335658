"""Central finite-difference gradient checking.

The oracle: for f: R^n -> R, df/dx_i ~ (f(x + h e_i) - f(x - h e_i)) / 2h
with h scaled per element. Full parameter sweeps are intractable for the
networks, so check() compares analytic gradients on a sampled subset of
coordinates per input tensor (all coordinates for small tensors). Everything
runs in float64.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor

BASE_H = 1e-5  # matches the pinned oracle step


def numeric_grad(f, arrays, which, index, h=BASE_H):
    """Central difference of scalar f(arrays) wrt arrays[which][index]."""
    x = arrays[which]
    orig = x[index]
    step = h * max(1.0, abs(float(orig)))
    x[index] = orig + step
    fp = f(arrays)
    x[index] = orig - step
    fm = f(arrays)
    x[index] = orig
    return (fp - fm) / (2 * step)


def check(build, arrays, n_samples=8, h=BASE_H, rng=None):
    """Compare analytic and numeric gradients.

    build(tensors) -> scalar Tensor, where tensors are float64 leaf Tensors
    wrapping `arrays`. Returns the worst relative error across the sampled
    coordinates of every input.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    loss = build(leaves)
    loss.backward()

    def feval(arrs):
        ts = [Tensor(a, requires_grad=False, dtype=np.float64) for a in arrs]
        return float(build(ts).data)

    worst = 0.0
    for k, leaf in enumerate(leaves):
        grad = leaf.grad
        if grad is None:
            grad = np.zeros_like(arrays[k])
        flat = arrays[k].reshape(-1)
        n = flat.size
        if n <= n_samples:
            picks = np.arange(n)
        else:
            picks = rng.choice(n, size=n_samples, replace=False)
        gflat = grad.reshape(-1)
        for i in picks:
            idx = np.unravel_index(i, arrays[k].shape)
            num = numeric_grad(feval, arrays, k, idx, h)
            ana = gflat[i]
            denom = max(abs(num), abs(ana), 1e-6)
            err = abs(num - ana) / denom
            worst = max(worst, err)
    return worst


def op_suite(rng=None):
    """Named gradient checks over every differentiable op.

    Returns list of (name, worst_rel_err, tolerance). Used by the CLI
    gradcheck command and the acceptance tests.
    """
    from . import autodiff as ad

    if rng is None:
        rng = np.random.default_rng(7)
    r = lambda *s: rng.standard_normal(s)
    checks = []

    def run(name, build, arrays, tol=1e-4, n=10):
        err = check(build, arrays, n_samples=n, rng=rng)
        checks.append((name, err, tol))

    run("add", lambda t: ad.mean(ad.add(t[0], t[1])), [r(3, 4), r(3, 4)])
    run("add_broadcast", lambda t: ad.mean(ad.add(t[0], t[1])), [r(3, 4), r(4)])
    run("sub", lambda t: ad.mean(ad.sub(t[0], t[1])), [r(3, 4), r(1, 4)])
    run("mul", lambda t: ad.mean(ad.mul(t[0], t[1])), [r(3, 4), r(3, 4)])
    run("div", lambda t: ad.mean(ad.div(t[0], t[1])), [r(3, 4), 2.0 + np.abs(r(3, 4))])
    run("neg", lambda t: ad.mean(ad.neg(t[0])), [r(5)])
    run("pow", lambda t: ad.mean(ad.pow_const(t[0], 3.0)), [1.0 + np.abs(r(5))])
    run("exp", lambda t: ad.mean(ad.exp(t[0])), [r(5)])
    run("log", lambda t: ad.mean(ad.log(t[0])), [1.0 + np.abs(r(5))])
    run("sqrt", lambda t: ad.mean(ad.sqrt(t[0])), [1.0 + np.abs(r(5))])
    run("tanh", lambda t: ad.mean(ad.tanh(t[0])), [r(5)])
    run("sigmoid", lambda t: ad.mean(ad.sigmoid(t[0])), [r(5)])
    run("silu", lambda t: ad.mean(ad.silu(t[0])), [r(5)])
    # keep relu/leaky inputs away from the kink
    away = r(4, 4)
    away = np.where(np.abs(away) < 0.1, away + 0.3, away)
    run("relu", lambda t: ad.mean(ad.relu(t[0])), [away])
    run("leaky_relu", lambda t: ad.mean(ad.leaky_relu(t[0])), [away])
    run("abs", lambda t: ad.mean(ad.abs_(t[0])), [away])
    run("sum", lambda t: ad.sum_(ad.mul(t[0], t[0])), [r(3, 4)])
    run("sum_axis", lambda t: ad.mean(ad.sum_(t[0], axis=1)), [r(3, 4)])
    run("mean_axis", lambda t: ad.mean(ad.mean(t[0], axis=0, keepdims=True)), [r(3, 4)])
    run("reshape", lambda t: ad.mean(ad.mul(ad.reshape(t[0], (4, 3)), t[1])), [r(3, 4), r(4, 3)])
    run("transpose", lambda t: ad.mean(ad.mul(ad.transpose(t[0], (1, 0)), t[1])), [r(3, 4), r(4, 3)])
    run("concat", lambda t: ad.mean(ad.mul(ad.concat([t[0], t[1]], axis=1), ad.concat([t[1], t[0]], axis=1))), [r(2, 3), r(2, 3)])
    run("getitem", lambda t: ad.mean(t[0][1:, :2]), [r(3, 4)])
    run("upsample_nearest", lambda t: ad.mean(ad.mul(ad.upsample_nearest2d(t[0], 2), t[1])), [r(1, 2, 3, 3), r(1, 2, 6, 6)])
    run("matmul", lambda t: ad.mean(ad.matmul(t[0], t[1])), [r(3, 4), r(4, 5)])
    run("matmul_batched", lambda t: ad.mean(ad.matmul(t[0], t[1])), [r(2, 3, 4), r(2, 4, 5)])
    run("softmax", lambda t: ad.mean(ad.mul(ad.softmax(t[0], axis=-1), t[1])), [r(3, 5), r(3, 5)])
    run("conv2d", lambda t: ad.mean(ad.conv2d(t[0], t[1], stride=1, pad="same")), [r(2, 3, 5, 5), 0.3 * r(4, 3, 3, 3)])
    run("conv2d_s2", lambda t: ad.mean(ad.conv2d(t[0], t[1], stride=2, pad=1)), [r(2, 3, 6, 6), 0.3 * r(4, 3, 3, 3)])
    # bilinear: keep points off integer grid lines and inside the map
    pts = rng.uniform(0.6, 2.2, size=(2, 6, 2))
    pts = np.where(np.abs(pts - np.round(pts)) < 0.05, pts + 0.1, pts)
    fixed_fm = r(2, 3, 4, 4)
    run("bilinear_map", lambda t: ad.mean(ad.bilinear_gather(t[0], Tensor(pts, dtype=np.float64))), [r(2, 3, 4, 4)], tol=1e-3)
    run("bilinear_points", lambda t: ad.mean(ad.bilinear_gather(Tensor(fixed_fm, dtype=np.float64), t[0])), [pts], tol=1e-3)
    run("bilinear_both", lambda t: ad.mean(ad.bilinear_gather(t[0], t[1])), [r(2, 3, 4, 4), pts], tol=1e-3)
    run("mse", lambda t: ad.mse(t[0], t[1]), [r(3, 4), r(3, 4)])
    run("l1", lambda t: ad.l1(t[0], t[1]), [r(3, 4), r(3, 4) + 0.5])
    return checks
