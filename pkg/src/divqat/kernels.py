"""Backend selection for the hot kernels.

The compiled extension is used when it imports; set ``DIVQAT_PURE_PYTHON=1``
to force the numpy fallback. ``BACKEND`` names the active one.
"""
import os

from . import _kernels_py

_compiled = None
if os.environ.get("DIVQAT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py
BACKEND = "compiled" if _compiled is not None else "python"


def backends():
    """Available kernel modules keyed by name (for benchmarks and parity tests)."""
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["compiled"] = _compiled
    return out


def im2col(x, kh, kw, pad, stride):
    return _impl.im2col(x, kh, kw, pad, stride)


def col2im(cols, n, c, h, w, kh, kw, pad, stride):
    return _impl.col2im(cols, n, c, h, w, kh, kw, pad, stride)


def fake_quant_rows(x, scale, zero_point, qmin, qmax):
    return _impl.fake_quant_rows(x, scale, zero_point, float(qmin), float(qmax))
