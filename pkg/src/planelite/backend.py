"""Kernel backend selection.

Hot numeric loops ship in two versions: numba ``@njit`` kernels and a pure
numpy/Python fallback. The env var ``PLANELITE_BACKEND=numpy`` forces the
fallback; the default is numba whenever it imports. ``set_backend`` overrides
at runtime (used by the parity tests and the benchmark).
"""

from __future__ import annotations

import os

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):  # type: ignore[misc]
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


_VALID = ("numba", "numpy")


def _initial_backend() -> str:
    env = os.environ.get("PLANELITE_BACKEND", "").strip().lower()
    if env == "numpy":
        return "numpy"
    if env == "numba" and not HAVE_NUMBA:
        raise RuntimeError("PLANELITE_BACKEND=numba but numba is not importable")
    return "numba" if HAVE_NUMBA else "numpy"


_BACKEND = _initial_backend()


def get_backend() -> str:
    return _BACKEND


def set_backend(name: str) -> None:
    global _BACKEND
    if name not in _VALID:
        raise ValueError(f"unknown backend {name!r}, expected one of {_VALID}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _BACKEND = name
