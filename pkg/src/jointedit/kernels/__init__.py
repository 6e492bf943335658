"""Kernel backend selection.

Two implementations exist for every hot kernel: a compiled Cython extension
(_native) and a numpy reference (the ground truth _native is tested against,
and the fallback when the extension is not built). JOINTEDIT_KERNELS picks:

  py      numpy reference for everything
  native  compiled extension for everything (ImportError if missing)
  auto    per-kernel (the default): convolutions stay on the reference
          path, whose im2col + BLAS matmul beats the compiled loops, while
          the irregular bilinear gathers use the compiled loops, which beat
          fancy indexing. Measured in benchmarks/kernel_bench.py.

Falls back to the reference for everything when the extension is missing.
"""

import os

from . import reference

_choice = os.environ.get("JOINTEDIT_KERNELS", "auto")

_conv = _gather = reference
if _choice == "py":
    pass
elif _choice == "native":
    from . import _native
    _conv = _gather = _native
else:
    try:
        from . import _native
    except ImportError:
        pass
    else:
        _gather = _native

BACKEND = (_conv.BACKEND if _conv is _gather
           else f"{_conv.BACKEND}+{_gather.BACKEND}")

conv2d_fwd = _conv.conv2d_fwd
conv2d_bwd_x = _conv.conv2d_bwd_x
conv2d_bwd_w = _conv.conv2d_bwd_w
bilinear_gather_fwd = _gather.bilinear_gather_fwd
bilinear_gather_bwd = _gather.bilinear_gather_bwd
