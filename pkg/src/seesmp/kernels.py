"""Backend selection for the hot kernels, plus path chunking and threading.

The compiled module is used when it imports; setting ``SEESMP_BACKEND=python``
forces the numpy fallback. Work is split into contiguous path chunks. Chunk
results are combined in chunk order, so a fixed thread count gives
bit-identical output, and ``threads=1`` gives the same result on every run.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from types import ModuleType

import numpy as np

from . import _kernels_py


def _load_backend() -> tuple[ModuleType, str]:
    if os.environ.get("SEESMP_BACKEND", "").lower() == "python":
        return _kernels_py, "python"
    try:
        from . import _kernels  # type: ignore[attr-defined]
    except ImportError:
        return _kernels_py, "python"
    return _kernels, "compiled"


_backend, BACKEND = _load_backend()
_threads = 1
_CHUNK_ELEMENTS = 1 << 21


def set_threads(n: int) -> None:
    """Set the number of worker threads used for path-parallel kernels."""
    global _threads
    if n < 1:
        raise ValueError("thread count must be positive")
    _threads = int(n)


def get_threads() -> int:
    return _threads


def use_backend(name: str) -> None:
    """Switch backend at run time (``"compiled"`` or ``"python"``); used by benchmarks and tests."""
    global _backend, BACKEND
    if name == "python":
        _backend, BACKEND = _kernels_py, "python"
    elif name == "compiled":
        from . import _kernels  # type: ignore[attr-defined]

        _backend, BACKEND = _kernels, "compiled"
    else:
        raise ValueError(f"unknown backend {name!r}")


def compiled_available() -> bool:
    try:
        from . import _kernels  # noqa: F401  # type: ignore[attr-defined]
    except ImportError:
        return False
    return True


def _chunks(n_paths: int, per_path: int) -> list[tuple[int, int]]:
    size = max(1, _CHUNK_ELEMENTS // max(per_path, 1))
    if _threads > 1:
        size = min(size, -(-n_paths // _threads))
    return [(a, min(a + size, n_paths)) for a in range(0, n_paths, size)]


def _map(fn, spans):
    if _threads == 1 or len(spans) == 1:
        return [fn(a, b) for a, b in spans]
    with ThreadPoolExecutor(max_workers=_threads) as pool:
        return list(pool.map(lambda ab: fn(*ab), spans))


def normal_increments(seed: int, n_paths: int, n_steps: int) -> np.ndarray:
    """Standard normals Z[p, i], a pure function of (seed, p, i)."""
    spans = _chunks(n_paths, n_steps)
    parts = _map(lambda a, b: _backend.normal_increments(seed, a, b - a, n_steps), spans)
    return np.concatenate(parts, axis=0) if len(parts) > 1 else parts[0]


def flow_propagate(minv, bmat, dw, i0: int, dt: float, milstein: bool = False) -> np.ndarray:
    return _backend.flow_propagate(minv, bmat, dw, int(i0), float(dt), bool(milstein))


def flow_moments(minv, bmat, dw, i0: int, dt: float, milstein: bool = False) -> np.ndarray:
    """Sample mean over paths of L(t_i0, t_j) (x) L(t_i0, t_j) for every j >= i0."""
    n_paths, n_steps = dw.shape
    n = minv.shape[-1]
    spans = _chunks(n_paths, (n_steps + 1 - i0) * n * n)
    parts = _map(lambda a, b: _backend.flow_moments(minv, bmat, dw[a:b], int(i0), float(dt),
                                                    bool(milstein)), spans)
    total = parts[0]
    for part in parts[1:]:
        total = total + part
    return total / n_paths


def pair_quadform_sums(minv, bmat, dw, xi, fmat, weights, dt: float, milstein: bool = False):
    n_paths, n_steps = dw.shape
    n = xi.shape[-1]
    spans = _chunks(n_paths, (n_steps + 1) ** 2 * n * n)

    def work(a: int, b: int):
        mv = minv[a:b] if minv.ndim == 4 else minv
        bm = bmat[a:b] if bmat.ndim == 4 else bmat
        return _backend.pair_quadform_sums(mv, bm, dw[a:b], xi[a:b], fmat[a:b], weights,
                                           float(dt), bool(milstein))

    parts = _map(work, spans)
    return np.concatenate(parts, axis=0) if len(parts) > 1 else parts[0]
