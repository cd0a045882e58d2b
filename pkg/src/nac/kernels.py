"""Hot-kernel dispatch.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
NumPy versions in ``_pykernels`` are used. ``NAC_PURE_PYTHON=1`` forces the
fallback. ``BACKEND`` names the active implementation.
"""
import contextlib
import os

from nac import _pykernels

if os.environ.get("NAC_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from nac import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "python" if _impl is _pykernels else "cython"

KERNELS = ("topk_lastdim", "exact_logits", "exact_logits_grad", "euler_logits", "euler_logits_grad", "rnn_forward")

topk_lastdim = _impl.topk_lastdim
exact_logits = _impl.exact_logits
exact_logits_grad = _impl.exact_logits_grad
euler_logits = _impl.euler_logits
euler_logits_grad = _impl.euler_logits_grad
rnn_forward = _impl.rnn_forward


def available_backends():
    out = {"python": _pykernels}
    try:
        from nac import _ckernels
    except ImportError:
        return out
    out["cython"] = _ckernels
    return out


@contextlib.contextmanager
def use_backend(name: str):
    """Temporarily route every kernel to backend ``name`` ("python" or "cython")."""
    global BACKEND
    backends = available_backends()
    if name not in backends:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(backends)}")
    g = globals()
    saved = {k: g[k] for k in KERNELS}, BACKEND
    g.update({k: getattr(backends[name], k) for k in KERNELS})
    BACKEND = name
    try:
        yield
    finally:
        g.update(saved[0])
        BACKEND = saved[1]
