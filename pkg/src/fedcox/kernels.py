"""Kernel dispatch: compiled extension when built, numpy fallback otherwise.

Set ``FEDCOX_PURE_PYTHON=1`` to force the numpy implementation (used by
``benchmarks/bench_kernels.py`` and the kernel-parity tests).
"""

import os

from fedcox import _efron_np

if os.environ.get("FEDCOX_PURE_PYTHON") == "1":
    _impl = _efron_np
else:
    try:
        from fedcox import _efron_cy as _impl
    except ImportError:
        _impl = _efron_np

efron_eval = _impl.efron_eval

IMPLEMENTATION = "cython" if _impl.__name__.endswith("_efron_cy") else "numpy"


def have_extension():
    return IMPLEMENTATION == "cython"
