"""Backend dispatch for the compute kernels.

The numba path is used when importable unless DCM_NUMBA=0 is set in the
environment, in which case the pure-numpy fallback is selected. Both
backends expose the same five functions and agree numerically; see
benchmarks/bench_kernels.py for a speed comparison.
"""

import os

from . import numpy_backend

_flag = os.environ.get("DCM_NUMBA", "").strip()
if _flag == "0":
    _backend = numpy_backend
else:
    try:
        from . import numba_backend as _backend
    except ImportError:
        _backend = numpy_backend

im2col = _backend.im2col
col2im = _backend.col2im
depthwise_forward = _backend.depthwise_forward
depthwise_input_grad = _backend.depthwise_input_grad
depthwise_weight_grad = _backend.depthwise_weight_grad


def backend_name() -> str:
    return _backend.NAME
