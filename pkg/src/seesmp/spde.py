"""Finite-difference truncation of a 1-D super-parabolic SPDE with Dirichlet boundary.

``dx = d/dz(alpha dx/dz) dt + beta dx/dz dw`` on ``[0, length]``. Vectors hold
the interior nodal values; the state inner product is the plain Euclidean
one (a uniform factor h would change no inequality checked here).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import eigh

from .core import GalerkinSystem, TimeGrid
from .errors import InvalidArgumentError, ParabolicityError

Field = float | Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SuperParabolicSpec:
    """Coefficients may be constants or callables ``f(t, z)`` vectorised in z."""

    n_space: int
    alpha: Field = 1.0
    beta: Field = 0.0
    kappa: float = 0.1
    K: float = 10.0
    length: float = 1.0

    @property
    def h(self) -> float:
        return self.length / (self.n_space + 1)

    @property
    def time_dependent(self) -> bool:
        return callable(self.alpha) or callable(self.beta)


def _eval(field: Field, t: float, z: np.ndarray) -> np.ndarray:
    if callable(field):
        return np.broadcast_to(np.asarray(field(t, z), dtype=float), z.shape)
    return np.full(z.shape, float(field))


def check_parabolicity(spec: SuperParabolicSpec, times=(0.0,)) -> None:
    """Raise ``ParabolicityError`` at the first point where kappa + beta^2 <= 2 alpha <= K fails."""
    z = np.linspace(0.0, spec.length, 2 * spec.n_space + 3)
    for t in times:
        al = _eval(spec.alpha, t, z)
        be = _eval(spec.beta, t, z)
        low = spec.kappa + be * be - 2 * al
        high = 2 * al - spec.K
        bad = np.flatnonzero((low > 1e-12) | (high > 1e-12))
        if bad.size:
            j = bad[0]
            raise ParabolicityError(
                f"parabolicity fails at t={t!r}, z={z[j]!r}: kappa + beta^2 = "
                f"{spec.kappa + be[j] ** 2!r}, 2 alpha = {2 * al[j]!r}, K = {spec.K!r}",
                (float(t), float(z[j])))


def stiffness_matrix(spec: SuperParabolicSpec, t: float = 0.0) -> np.ndarray:
    n, h = spec.n_space, spec.h
    half = (np.arange(n + 1) + 0.5) * h
    al = _eval(spec.alpha, t, half)
    A = np.zeros((n, n))
    idx = np.arange(n)
    A[idx, idx] = -(al[:-1] + al[1:])
    A[idx[:-1], idx[:-1] + 1] = al[1:-1]
    A[idx[1:], idx[1:] - 1] = al[1:-1]
    return A / (h * h)


def advection_matrix(spec: SuperParabolicSpec, t: float = 0.0) -> np.ndarray:
    n, h = spec.n_space, spec.h
    be = _eval(spec.beta, t, (np.arange(n) + 1.0) * h)
    B = np.zeros((n, n))
    idx = np.arange(n - 1)
    B[idx, idx + 1] = be[:-1]
    B[idx + 1, idx] = 0.0 - be[1:]
    return B / (2 * h)


def h1_weight(n: int, h: float) -> np.ndarray:
    """Gram matrix of the discrete H^1_0 norm: ``|Du|^2 + |u|^2`` with D the forward difference."""
    D = (np.eye(n + 1, n, k=0) - np.eye(n + 1, n, k=-1)) / h
    return D.T @ D + np.eye(n)


def coercivity_constants(A: np.ndarray, B: np.ndarray, V: np.ndarray,
                         k_floor: float = 0.0) -> tuple[float, float]:
    """Numerical (delta, K) for ``2<Au,u> + |Bu|^2 <= -delta |u|_V^2 + K |u|^2`` and ``|<Bu,u>| <= K|u|^2``.

    K is the quasi-skew constant (the spectral radius of the symmetric part of
    B), raised to ``k_floor``; delta is the largest value compatible with K,
    the smallest generalized eigenvalue of ``(K I - 2A_sym - B'B, V)``.
    """
    S = A + A.T + B.T @ B
    K = max(float(np.max(np.abs(np.linalg.eigvalsh(0.5 * (B + B.T))))), k_floor)
    delta = float(eigh(K * np.eye(len(A)) - S, V, eigvals_only=True)[0])
    return delta, K


def discretize_superparabolic(spec: SuperParabolicSpec, grid: TimeGrid | None = None) -> GalerkinSystem:
    """Galerkin system for the spec; time-dependent coefficients are rebuilt per node of ``grid``."""
    if spec.n_space < 1 or spec.length <= 0:
        raise InvalidArgumentError("n_space must be >= 1 and length > 0")
    times = (0.0,) if grid is None or not spec.time_dependent else tuple(grid.nodes)
    check_parabolicity(spec, times)
    V = h1_weight(spec.n_space, spec.h)
    if spec.time_dependent and grid is not None:
        A = np.stack([stiffness_matrix(spec, t) for t in grid.nodes])
        B = np.stack([advection_matrix(spec, t) for t in grid.nodes])
        consts = [coercivity_constants(a, b, V, spec.kappa) for a, b in zip(A, B)]
        delta = min(c[0] for c in consts)
        K = max(c[1] for c in consts)
    else:
        A = stiffness_matrix(spec)
        B = advection_matrix(spec)
        delta, K = coercivity_constants(A, B, V, spec.kappa)
    return GalerkinSystem(A, B, delta=delta, K=K, V=V)
