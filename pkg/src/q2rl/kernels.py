"""Kernel dispatch: compiled extension when importable, numpy fallback otherwise.

Set ``Q2RL_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

ACT_NONE = _kernels_py.ACT_NONE
ACT_RELU = _kernels_py.ACT_RELU
ACT_TANH = _kernels_py.ACT_TANH

_impl = _kernels_py
BACKEND = "python"
if os.environ.get("Q2RL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

ln_act_forward = _impl.ln_act_forward
ln_act_backward = _impl.ln_act_backward
discounted_returns = _impl.discounted_returns


def tune_allocator(threshold=256 << 20):
    """Keep large temporaries on the glibc heap instead of fresh mmap pages.

    Batched ensemble activations are a few MB each; with the default mmap
    threshold every forward pass page-faults its outputs in. Opt-in because it
    changes process-wide malloc behavior. Returns False where mallopt is
    unavailable.
    """
    import ctypes
    import ctypes.util

    name = ctypes.util.find_library("c")
    if name is None:
        return False
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    m_trim_threshold, m_top_pad, m_mmap_threshold = -1, -2, -3
    ok = mallopt(m_mmap_threshold, threshold) == 1
    ok &= mallopt(m_trim_threshold, 2 * threshold) == 1
    ok &= mallopt(m_top_pad, threshold) == 1
    return bool(ok)
