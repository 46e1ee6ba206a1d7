"""Kernel backend selection and worker-pool helpers.

The compiled extension (``alignkit._native``) is preferred when importable;
otherwise the numpy fallback in ``_pure`` is used. Both produce identical
numbers. ``ALIGNKIT_BACKEND`` forces a choice ("native" or "pure");
``ALIGNKIT_THREADS`` caps the worker count used for embarrassingly parallel
per-frame work.
"""

import os
from concurrent.futures import ThreadPoolExecutor

from . import _pure

_forced = os.environ.get("ALIGNKIT_BACKEND", "").strip().lower()

if _forced == "pure":
    _impl = _pure
    BACKEND = "pure"
else:
    try:
        from . import _native as _impl
        BACKEND = "native"
    except ImportError:
        if _forced == "native":
            raise ImportError(
                "ALIGNKIT_BACKEND=native but the compiled extension is not "
                "available; build it with `pip install -e . --no-build-isolation`"
            )
        _impl = _pure
        BACKEND = "pure"

gather_bilinear_clamp = _impl.gather_bilinear_clamp
warp_gather = _impl.warp_gather
deform_im2col = _impl.deform_im2col


def backend_name():
    return BACKEND


def worker_count():
    """Worker cap from ALIGNKIT_THREADS (default 1, i.e. sequential)."""
    raw = os.environ.get("ALIGNKIT_THREADS", "").strip()
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def map_ordered(fn, items):
    """Apply fn to items, parallel if allowed; output order is fixed."""
    workers = worker_count()
    items = list(items)
    if workers == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
