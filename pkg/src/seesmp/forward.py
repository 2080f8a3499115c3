"""Forward simulation: controlled SEEs, evolution operators, stochastic exponentials."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels
from .core import (BrownianEnsemble, CoefficientSet, GalerkinSystem, TimeGrid,
                   as_control_process)
from .errors import BlowupError, InvalidArgumentError, NumericalError

SCHEMES = ("euler", "milstein")


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """``values`` is ``(P, N+1, n)`` for vector states or ``(P, N+1)`` for scalars."""

    grid: TimeGrid
    values: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    def at(self, i: int) -> np.ndarray:
        return self.values[:, i]

    def __sub__(self, other: "PathEnsemble") -> "PathEnsemble":
        return PathEnsemble(self.grid, self.values - other.values)

    def __add__(self, other: "PathEnsemble") -> "PathEnsemble":
        return PathEnsemble(self.grid, self.values + other.values)


@dataclass(frozen=True, eq=False)
class EvolutionOperatorPaths:
    """``L[p, k]`` is the fundamental matrix from node ``anchor`` to node ``anchor + k`` on path p."""

    grid: TimeGrid
    anchor: int
    L: np.ndarray

    def at_node(self, j: int) -> np.ndarray:
        if j < self.anchor:
            raise InvalidArgumentError("node precedes the anchor")
        return self.L[:, j - self.anchor]


def _check_scheme(scheme: str) -> None:
    if scheme not in SCHEMES:
        raise InvalidArgumentError(f"scheme must be one of {SCHEMES}, got {scheme!r}")


def _as_force(spec, P: int, n: int, N: int) -> Callable[[int, np.ndarray], np.ndarray] | None:
    """Normalise a forcing given as None, (P, N, n) / (N, n) array, or callable (i, x) -> (P, n)."""
    if spec is None or callable(spec):
        return spec
    arr = np.asarray(spec, dtype=float)
    if arr.ndim == 2:
        arr = arr[None]
    arr = np.broadcast_to(arr, (P, N, n))
    return lambda i, x: arr[:, i]


def solve_linear_see(system: GalerkinSystem, ensemble: BrownianEnsemble, x0,
                     drift=None, diffusion=None, scheme: str = "euler",
                     start: int = 0) -> PathEnsemble:
    """March ``dx = (A x + drift) dt + (B x + diffusion) dw`` from node ``start``.

    Step: ``x_{i+1} = (I - dt A_i)^{-1} [x_i + dt drift_i + dw_i (B_i x_i + diffusion_i)]``;
    with ``scheme="milstein"`` the term ``(dw^2 - dt)/2 * B_i (B_i x_i + diffusion_i)``
    is added inside the bracket. Values before ``start`` are zero.
    """
    _check_scheme(scheme)
    grid = ensemble.grid
    N, P, n = grid.n_steps, ensemble.n_paths, system.dim
    x0 = np.asarray(x0, dtype=float)
    if x0.shape[-1] != n:
        raise InvalidArgumentError(f"x0 has dimension {x0.shape[-1]}, system has {n}")
    minv = system.implicit_inverses(grid)
    Bn = system.B_nodes(grid)
    drift = _as_force(drift, P, n, N)
    diffusion = _as_force(diffusion, P, n, N)
    dw = ensemble.increments
    dt = grid.dt
    out = np.zeros((P, N + 1, n))
    x = np.broadcast_to(x0, (P, n)).astype(float, copy=True)
    out[:, start] = x
    for i in range(start, N):
        g = x @ Bn[i].T
        if diffusion is not None:
            g = g + diffusion(i, x)
        v = x + dw[:, i, None] * g
        if drift is not None:
            v = v + dt * drift(i, x)
        if scheme == "milstein":
            v = v + (0.5 * (dw[:, i] ** 2 - dt))[:, None] * (g @ Bn[i].T)
        x = v @ minv[i].T
        if not np.isfinite(x).all():
            raise BlowupError(f"non-finite state at step {i}", step=i)
        out[:, i + 1] = x
    return PathEnsemble(grid, out)


def solve_see(system: GalerkinSystem, coeffs: CoefficientSet | None, control,
              ensemble: BrownianEnsemble, x0, scheme: str = "euler") -> PathEnsemble:
    """Semi-implicit Euler-Maruyama for ``dx = (A x + a) dt + (B x + b) dw``.

    ``control`` is anything ``as_control_process`` accepts; ``coeffs=None``
    means a = b = 0.
    """
    grid = ensemble.grid
    if coeffs is None:
        return solve_linear_see(system, ensemble, x0, scheme=scheme)
    u = as_control_process(control if control is not None else 0.0, ensemble.n_paths,
                           grid.n_steps)
    nodes = grid.nodes
    return solve_linear_see(system, ensemble, x0,
                            drift=lambda i, x: coeffs.a(nodes[i], x, u[:, i]),
                            diffusion=lambda i, x: coeffs.b(nodes[i], x, u[:, i]),
                            scheme=scheme)


def _flow_inputs(system: GalerkinSystem, grid: TimeGrid):
    minv = np.ascontiguousarray(system.implicit_inverses(grid))
    bmat = np.ascontiguousarray(system.B_nodes(grid)[:-1])
    return minv, bmat


def fundamental_matrix(system: GalerkinSystem, ensemble: BrownianEnsemble, t_anchor: float,
                       scheme: str = "euler") -> EvolutionOperatorPaths:
    """Per-path fundamental matrices of the homogeneous scheme from ``t_anchor``; L(t, t) = I."""
    _check_scheme(scheme)
    grid = ensemble.grid
    i0 = grid.index_of(t_anchor)
    minv, bmat = _flow_inputs(system, grid)
    L = kernels.flow_propagate(minv, bmat, np.ascontiguousarray(ensemble.increments), i0,
                               grid.dt, scheme == "milstein")
    if not np.isfinite(L).all():
        bad = np.argwhere(~np.isfinite(L))[0]
        raise BlowupError("non-finite fundamental matrix", step=int(i0 + bad[1]))
    return EvolutionOperatorPaths(grid, i0, L)


def _step_process(mu, P: int, N: int) -> np.ndarray:
    arr = np.asarray(mu, dtype=float)
    if arr.ndim == 1 and arr.shape[0] == N + 1:
        arr = arr[:-1]
    return np.broadcast_to(arr, (P, N)) if arr.ndim < 2 else arr


def stochastic_exponential(mu1, mu2, ensemble: BrownianEnsemble) -> PathEnsemble:
    """``exp(sum_{j<i} (mu2 - mu1^2/2) dt + mu1 dw_j)``; ``mu1``, ``mu2`` are scalars, (N,) or (P, N)."""
    grid = ensemble.grid
    P, N = ensemble.n_paths, grid.n_steps
    m1 = _step_process(mu1, P, N)
    m2 = _step_process(mu2, P, N)
    expo = np.zeros((P, N + 1))
    np.cumsum((m2 - 0.5 * m1 * m1) * grid.dt + m1 * ensemble.increments, axis=1, out=expo[:, 1:])
    with np.errstate(over="ignore"):
        lam = np.exp(expo)
    if not np.isfinite(lam).all():
        raise BlowupError("stochastic exponential overflowed",
                          step=int(np.argwhere(~np.isfinite(lam))[0][1]))
    return PathEnsemble(grid, lam)


def transformed_system(system: GalerkinSystem, mu1: float, mu2: float,
                       grid: TimeGrid | None = None) -> GalerkinSystem:
    """``(A + mu1 B + mu2 I, B + mu1 I)`` for deterministic scalar or node-wise (N+1,) mu's."""
    n = system.dim
    eye = np.eye(n)
    m1, m2 = np.asarray(mu1, dtype=float), np.asarray(mu2, dtype=float)
    if m1.ndim == 0 and m2.ndim == 0 and system.is_constant():
        A = np.asarray(system.A) + m1 * np.asarray(system.B) + m2 * eye
        B = np.asarray(system.B) + m1 * eye
    else:
        if grid is None:
            raise InvalidArgumentError("time-varying transform needs a grid")
        N1 = grid.n_steps + 1
        m1 = np.broadcast_to(m1, (N1,))[:, None, None]
        m2 = np.broadcast_to(m2, (N1,))[:, None, None]
        An, Bn = system.A_nodes(grid), system.B_nodes(grid)
        A = An + m1 * Bn + m2 * eye
        B = Bn + m1 * eye
    return GalerkinSystem(A, B, system.delta, system.K, system.V)


def check_transform_identity(system: GalerkinSystem, mu1, mu2, ensemble: BrownianEnsemble,
                             anchors=(0.0,), scheme: str = "milstein") -> float:
    """Max over anchors, nodes, paths and entries of ``|L~ - (lam(s)/lam(t)) L| / (1 + |L|)``.

    The entrywise form makes a block-diagonal system report the max of its
    blocks' errors. Milstein is the default because with Euler the two sides
    differ at strong order 1/2 whenever mu1 != 0.
    """
    grid = ensemble.grid
    tsys = transformed_system(system, mu1, mu2, grid)
    lam = stochastic_exponential(_node_to_step(mu1, grid), _node_to_step(mu2, grid), ensemble).values
    worst = 0.0
    for t in anchors:
        i0 = grid.index_of(t)
        L = fundamental_matrix(system, ensemble, t, scheme).L
        Lt = fundamental_matrix(tsys, ensemble, t, scheme).L
        ratio = lam[:, i0:] / lam[:, i0, None]
        err = np.abs(Lt - ratio[:, :, None, None] * L) / (1.0 + np.abs(L))
        worst = max(worst, float(err.max()))
    return worst


def _node_to_step(mu, grid: TimeGrid):
    arr = np.asarray(mu, dtype=float)
    if arr.ndim == 1 and arr.shape[0] == grid.n_steps + 1:
        return arr[:-1]
    return arr


def moment_estimate(paths: PathEnsemble | np.ndarray, alpha: float) -> tuple[float, float]:
    """Estimate of ``E[sup_t |x(t)|^{2 alpha}]`` with its jackknife standard error.

    An ensemble with zero paths gives (0, 0); one with no time nodes is rejected.
    """
    if alpha < 1:
        raise InvalidArgumentError("alpha must be >= 1")
    vals = paths.values if isinstance(paths, PathEnsemble) else np.asarray(paths, dtype=float)
    if vals.ndim < 2 or vals.shape[1] == 0:
        raise InvalidArgumentError("ensemble has no time nodes")
    if vals.shape[0] == 0:
        return 0.0, 0.0
    sq = vals * vals if vals.ndim == 2 else np.sum(vals * vals, axis=2)
    s = np.max(sq, axis=1) ** alpha
    return sample_mean_se(s)


def sample_mean_se(s: np.ndarray) -> tuple[float, float]:
    """Mean and jackknife standard error; a constant sample returns its value exactly with SE 0."""
    s = np.asarray(s, dtype=float)
    m = s.shape[0]
    if m == 0:
        return 0.0, 0.0
    s0 = s[0]
    d = s - s0
    mean = float(s0 + d.mean())
    if m == 1:
        return mean, 0.0
    loo = (d.sum() - d) / (m - 1)
    se = float(np.sqrt((m - 1) / m * np.sum((loo - loo.mean()) ** 2)))
    return mean, se


def flow_moment_ratio(system: GalerkinSystem, ensemble: BrownianEnsemble, probes: np.ndarray,
                      t_anchor: float = 0.0) -> float:
    """``max_u E|L(t, T) u|^4 / |u|^4`` over the probe rows; an empirical moment constant."""
    L = fundamental_matrix(system, ensemble, t_anchor).L[:, -1]
    probes = np.atleast_2d(probes)
    Lu = np.einsum("pij,kj->pki", L, probes)
    num = np.mean(np.sum(Lu * Lu, axis=2) ** 2, axis=0)
    return float(np.max(num / np.sum(probes * probes, axis=1) ** 2))
