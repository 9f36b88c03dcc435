"""Backend dispatch for the conv lowering kernels.

The compiled extension is preferred when importable; otherwise the numpy
fallback is used. Both expose the same three callables with identical
numerics. The selected backend is fixed per process unless switched
explicitly with set_backend (tests and the benchmark use that).
"""

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py
_BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled


def get_backend() -> str:
    return "compiled" if _impl is _compiled and _compiled is not None else "python"


def available_backends() -> tuple:
    return tuple(sorted(_BACKENDS))


def set_backend(name: str) -> None:
    global _impl
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    _impl = _BACKENDS[name]


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return _kernels_py.conv_out_size(size, k, stride, pad)


def im2col(x, kh, kw, stride, pad):
    return _impl.im2col(x, kh, kw, stride, pad)


def col2im(cols, b, c, h, w, kh, kw, stride, pad):
    return _impl.col2im(cols, b, c, h, w, kh, kw, stride, pad)
