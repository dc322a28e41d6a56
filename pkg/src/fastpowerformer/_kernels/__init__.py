"""Hot inner loops: a compiled Cython module with a numpy fallback.

The compiled backend is used when it imports cleanly; setting
``FASTPF_PURE_PYTHON=1`` forces the fallback.  Both expose
``lstm_forward``, ``lstm_backward`` and ``bucket_pool_mask``.
"""
from __future__ import annotations

import os
from types import ModuleType

import numpy as np

from . import _pykernels

try:
    if os.environ.get("FASTPF_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python kernels requested")
    from . import _ckernels
except ImportError:
    _ckernels = None

BACKEND = "cython" if _ckernels is not None else "python"
_impl: ModuleType = _ckernels if _ckernels is not None else _pykernels


def available_backends() -> list[str]:
    return ["python"] + (["cython"] if _ckernels is not None else [])


def get_backend(name: str) -> ModuleType:
    if name == "python":
        return _pykernels
    if name == "cython" and _ckernels is not None:
        return _ckernels
    raise ValueError(f"kernel backend {name!r} is not available")


def lstm_forward(xw: np.ndarray, wh: np.ndarray):
    return _impl.lstm_forward(np.ascontiguousarray(xw, dtype=np.float64), np.ascontiguousarray(wh, dtype=np.float64))


def lstm_backward(dh_seq, gates, c, tc, h, wh):
    cont = lambda a: np.ascontiguousarray(a, dtype=np.float64)  # noqa: E731
    return _impl.lstm_backward(cont(dh_seq), cont(gates), cont(c), cont(tc), cont(h), cont(wh))


def bucket_pool_mask(codes: np.ndarray, n_buckets: int):
    codes = np.ascontiguousarray(codes, dtype=np.int64)
    if codes.ndim != 2:
        raise ValueError(f"codes must be (rounds, length), got shape {codes.shape}")
    if codes.size and (codes.min() < 0 or codes.max() >= n_buckets):
        raise ValueError(f"bucket codes must lie in [0, {n_buckets})")
    return _impl.bucket_pool_mask(codes, int(n_buckets))
