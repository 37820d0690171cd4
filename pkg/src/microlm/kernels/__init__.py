"""Backend selection for the hot kernels.

Set MICROLM_NUMBA=0 to force the pure-numpy fallback; by default the
numba build is used when numba imports cleanly.  Both backends share
signatures, so callers never branch.  ``benchmarks/bench_kernels.py``
times one against the other.
"""

import os

_flag = os.environ.get("MICROLM_NUMBA", "1").strip().lower()
_want_numba = _flag not in ("0", "false", "no", "off")

if _want_numba:
    try:
        from . import _numba as _impl
        BACKEND = "numba"
    except ImportError:
        from . import _numpy as _impl
        BACKEND = "numpy"
else:
    from . import _numpy as _impl
    BACKEND = "numpy"

banded_attn_forward = _impl.banded_attn_forward
banded_attn_backward = _impl.banded_attn_backward
scatter_add_rows = _impl.scatter_add_rows
window_cache_forward = _impl.window_cache_forward
window_cache_backward = _impl.window_cache_backward
stream_dots = _impl.stream_dots
cache_probs_from_dots = _impl.cache_probs_from_dots
recency_fill = _impl.recency_fill

KERNEL_NAMES = (
    "banded_attn_forward",
    "banded_attn_backward",
    "scatter_add_rows",
    "window_cache_forward",
    "window_cache_backward",
    "stream_dots",
    "cache_probs_from_dots",
    "recency_fill",
)
