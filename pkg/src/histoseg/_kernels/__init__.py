"""Hot-kernel backend selection.

Two implementations exist for each kernel: a Cython extension
(`_fastcore`) and a numpy fallback (`numpy_backend`).  The default picks
per kernel based on measured performance (see benchmarks/bench_kernels.py):

- convolution goes through numpy, whose per-offset einsum contractions hit
  multithreaded BLAS and outrun scalar compiled loops at the channel counts
  this package uses;
- connected-component labeling uses the extension (pixel-at-a-time
  union-find, 20-100x faster than the run-based numpy version).

Set HISTOSEG_BACKEND=numpy or HISTOSEG_BACKEND=cython to force one side
everywhere (cython raises if the extension is missing; the numpy fallback
is always available).
"""

import os

from . import numpy_backend

try:
    from . import _fastcore
except ImportError:
    _fastcore = None

_forced = os.environ.get("HISTOSEG_BACKEND", "").lower()

if _forced == "numpy" or (_forced != "cython" and _fastcore is None):
    BACKEND = "numpy"
    conv2d_forward = numpy_backend.conv2d_forward
    conv2d_backward = numpy_backend.conv2d_backward
    label_regions = numpy_backend.label_regions
elif _forced == "cython":
    if _fastcore is None:
        raise ImportError("HISTOSEG_BACKEND=cython but the extension is not built")
    BACKEND = "cython"
    conv2d_forward = _fastcore.conv2d_forward
    conv2d_backward = _fastcore.conv2d_backward
    label_regions = _fastcore.label_regions
else:
    BACKEND = "auto"
    conv2d_forward = numpy_backend.conv2d_forward
    conv2d_backward = numpy_backend.conv2d_backward
    label_regions = _fastcore.label_regions
