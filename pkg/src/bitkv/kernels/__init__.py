"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import from ``BITKV_BACKEND`` (``numba`` or
``numpy``); ``numba`` is the default when it imports cleanly.  Tests and the
kernel benchmark switch at runtime with :func:`use_backend`.

Shared conventions:

* words are ``uint16``; codes are ``uint8``; values are ``float32`` holding
  16-bit-float-representable numbers;
* block stores are ``[H, n_blocks, S, d]`` words and ``[H, n_blocks, P0, P1, 2]``
  float32 (scale, zero) params, with ``S = n_r / pack_num``;
* attention state ``o [H, M, d]``, ``m [H, M]``, ``l [H, M]`` is updated in place.
"""

from __future__ import annotations

import contextlib
import logging
import os

from ..core import ConfigError
from . import _numpy

log = logging.getLogger(__name__)

try:
    from . import _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

BACKENDS = ("numba", "numpy")
_FUNCS = ("round_fp16", "unpack_words", "dequant_range", "partitioned_rowmax",
          "attend_tile", "attend_dense", "attend_packed")

_active = None


def available_backends() -> tuple[str, ...]:
    return tuple(b for b in BACKENDS if b == "numpy" or _numba is not None)


def set_backend(name: str) -> None:
    global _active
    if name not in BACKENDS:
        raise ConfigError(f"unknown backend {name!r}; choose from {BACKENDS}")
    if name == "numba" and _numba is None:
        raise ConfigError("numba backend requested but numba is not importable")
    mod = _numba if name == "numba" else _numpy
    g = globals()
    for f in _FUNCS:
        g[f] = getattr(mod, f)
    _active = name


def get_backend() -> str:
    return _active


@contextlib.contextmanager
def use_backend(name: str):
    prev = _active
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def _initial_backend() -> str:
    want = os.environ.get("BITKV_BACKEND", "").strip().lower()
    if want:
        return want
    return "numba" if _numba is not None else "numpy"


set_backend(_initial_backend())
log.debug("bitkv kernels using %s backend", _active)
