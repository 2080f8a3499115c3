"""Second-order adjoint: conditionally expected backward integral equation.

Two routes compute the same matrix process:

* ``bsie_picard`` iterates
  ``P <- E_t[L~(t,T)' xi L~(t,T) + int_t^T L~(t,s)' f(s, P(s)) L~(t,s) ds]``,
  with ``L~`` the flow of ``(A - b/2 B - b^2/8 I, B + b/2 I)``;
* ``matrix_bsde_backward`` steps the equivalent matrix BSDE
  ``-dP = (A'P + PA + B'PB + B'Q + QB + bQ + f) dt - Q dw`` backward.

``f`` is a callable ``f(t, P)`` that maps an ``(n, n)`` or ``(paths, n, n)``
array to one of the same shape, or None for zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from . import kernels
from .bsde import RegressionEngine, cond_expect
from .core import BrownianEnsemble, GalerkinSystem, TimeGrid
from .errors import InvalidArgumentError, NonContractionError, NumericalError
from .forward import PathEnsemble

MatrixMap = Callable[[float, np.ndarray], np.ndarray]


@dataclass(eq=False)
class OperatorProcess:
    """``P`` is ``(N+1, n, n)`` (deterministic) or ``(paths, N+1, n, n)`` (path dependent)."""

    grid: TimeGrid
    P: np.ndarray
    Q: np.ndarray | None = None
    stderr: np.ndarray | None = None
    iterations: int = 0
    ratios: list[float] = field(default_factory=list)
    segments: list[tuple[int, int]] = field(default_factory=list)
    mode: str = "deterministic"

    @property
    def path_dependent(self) -> bool:
        return self.P.ndim == 4

    def node(self, i: int) -> np.ndarray:
        return self.P[:, i] if self.path_dependent else self.P[i]

    def mean(self) -> np.ndarray:
        """Node-wise ensemble mean, ``(N+1, n, n)``."""
        return self.P.mean(axis=0) if self.path_dependent else self.P


def transformed_coefficients(system: GalerkinSystem, grid: TimeGrid, beta) -> tuple[np.ndarray, np.ndarray]:
    """Step matrices ``(A - b/2 B - b^2/8 I, B + b/2 I)``.

    Deterministic ``beta`` (scalar or (N+1,) / (N,)) gives ``(N, n, n)``;
    per-path ``beta`` of shape (paths, N) gives ``(paths, N, n, n)``.
    """
    n = system.dim
    N = grid.n_steps
    A = system.A_nodes(grid)[:-1]
    B = system.B_nodes(grid)[:-1]
    eye = np.eye(n)
    b = np.asarray(beta, dtype=float)
    if b.ndim <= 1:
        if b.ndim == 1 and b.shape[0] == N + 1:
            b = b[:-1]
        b = np.broadcast_to(b, (N,))[:, None, None]
        return A - 0.5 * b * B - 0.125 * b * b * eye, B + 0.5 * b * eye
    b = b[:, :N, None, None]
    return A[None] - 0.5 * b * B[None] - 0.125 * b * b * eye, B[None] + 0.5 * b * eye


def _inverses(At: np.ndarray, dt: float) -> np.ndarray:
    eye = np.eye(At.shape[-1])
    try:
        return np.ascontiguousarray(np.linalg.inv(eye - dt * At))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"I - dt*A~ is singular: {exc}") from exc


def quadrature_weights(n_nodes: int, dt: float, rule: str = "trapezoid") -> np.ndarray:
    """``W[i, j]`` weights ``g(t_j)`` in the integral from ``t_i`` to the last node (j >= i)."""
    last = n_nodes - 1
    W = np.zeros((n_nodes, n_nodes))
    for i in range(last):
        if rule == "trapezoid":
            W[i, i] = 0.5 * dt
            W[i, i + 1:last] = dt
            W[i, last] = 0.5 * dt
        elif rule == "left":
            W[i, i:last] = dt
        else:
            raise InvalidArgumentError(f"unknown quadrature rule {rule!r}")
    return W


def _apply_f(f: MatrixMap | None, t: float, P: np.ndarray) -> np.ndarray:
    if f is None:
        return np.zeros_like(P)
    return np.asarray(f(t, P), dtype=float)


def _is_symmetric(M: np.ndarray) -> bool:
    return bool(np.allclose(M, np.swapaxes(M, -1, -2), rtol=0, atol=1e-14 * (1 + np.abs(M).max())))


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + np.swapaxes(M, -1, -2))


# ----------------------------------------------------------------------------
# Moment tables for the deterministic mode.

class _MomentTable:
    """Sample means of ``L~(t_i, t_j) (x) L~(t_i, t_j)`` plus batch means for standard errors.

    In lag mode (time-homogeneous coefficients) every anchor reuses the
    anchor-0 table indexed by ``j - i``.
    """

    def __init__(self, minv, bmat, dw, dt, milstein, lag, n_batches):
        P, N = dw.shape
        self.N = N
        self.lag = lag
        n = minv.shape[-1]
        per_anchor = (N + 1) * n ** 4 * (1 if lag else (N + 2) // 2)
        n_batches = int(max(2, min(n_batches, 4e7 // max(per_anchor, 1), P)))
        edges = np.linspace(0, P, n_batches + 1).astype(int)
        self.batch_sizes = np.diff(edges)
        anchors = [0] if lag else list(range(N + 1))
        self.batches = []  # per batch: list over anchors of (N+1-i, n, n, n, n)
        for a, b in zip(edges[:-1], edges[1:]):
            sub = dw[a:b]
            self.batches.append([kernels.flow_moments(minv, bmat, sub, i, dt, milstein)
                                 for i in anchors])
        w = self.batch_sizes / P
        self.mean = [sum(w[k] * self.batches[k][m] for k in range(n_batches))
                     for m in range(len(anchors))]

    def block(self, i: int, j_stop: int, which=None) -> np.ndarray:
        """Moments for anchor ``i`` and nodes ``i .. j_stop`` inclusive."""
        tabs = self.mean if which is None else self.batches[which]
        if self.lag:
            return tabs[0][: j_stop - i + 1]
        return tabs[i][: j_stop - i + 1]


def _phi(F: np.ndarray, mom: np.ndarray) -> np.ndarray:
    """``E[L' F L]`` from moments: ``sum_ac F_ac Mom_abcd`` (F may carry a leading node axis)."""
    if F.ndim == 2:
        return np.einsum("ac,abcd->bd", F, mom)
    return np.einsum("jac,jabcd->bd", F, mom)


def _deterministic_segment(table: _MomentTable, f, nodes, a: int, b: int, terminal: np.ndarray,
                           rule: str, dt: float, tol: float, max_iter: int, symmetric: bool,
                           which=None, P_fixed=None):
    """Picard iteration on nodes ``a..b`` with deterministic terminal matrix at ``b``.

    With ``P_fixed`` given, apply the map once to it (used for batch standard errors).
    """
    m = b - a + 1
    W = quadrature_weights(m, dt, rule)
    n = terminal.shape[-1]
    mom_term = [table.block(a + k, b, which)[-1] for k in range(m)]
    base = np.stack([_phi(terminal, mom_term[k]) for k in range(m)])
    moms = [table.block(a + k, b, which) for k in range(m)]

    def apply(Pk: np.ndarray) -> np.ndarray:
        F = np.stack([_apply_f(f, nodes[a + j], Pk[j]) for j in range(m)])
        out = base.copy()
        for k in range(m - 1):
            out[k] += _phi(W[k, k:, None, None] * F[k:], moms[k])
        out[m - 1] = terminal
        return _sym(out) if symmetric else out

    if P_fixed is not None:
        return apply(P_fixed)

    Pk = np.zeros((m, n, n))
    ratios: list[float] = []
    prev = None
    rising = 0
    for it in range(1, max_iter + 1):
        Pn = apply(Pk)
        change = float(np.max(np.abs(Pn - Pk)))
        if not np.isfinite(change):
            return None, ratios, it
        if prev is not None and prev > 0:
            r = change / prev
            ratios.append(r)
            rising = rising + 1 if r >= 1.0 else 0
        Pk = Pn
        if change <= tol * max(1.0, float(np.max(np.abs(Pn)))):
            return Pk, ratios, it
        if rising >= 3:
            return None, ratios, it
        prev = change
    return None, ratios, max_iter


def _segments(a_total: int, b_total: int, k: int) -> list[tuple[int, int]]:
    edges = np.unique(np.linspace(a_total, b_total, k + 1).round().astype(int))
    return [(int(edges[s]), int(edges[s + 1])) for s in range(len(edges) - 1)]


def bsie_picard(system: GalerkinSystem, xi, f: MatrixMap | None, beta, ensemble: BrownianEnsemble,
                engine: RegressionEngine | None = None, tol: float = 1e-10, max_iter: int = 100,
                x_paths=None, quadrature: str = "trapezoid", scheme: str = "euler",
                segments: int = 1, max_segments: int | None = None, n_batches: int = 32,
                path_dependent: bool | None = None, symmetrize: bool | None = None) -> OperatorProcess:
    """Picard fixed point for the operator-valued backward integral equation.

    Deterministic mode (deterministic ``xi``, ``beta`` and ``f``): expectations
    are ensemble means through moment tensors of the transformed flow; the
    result carries batch-means standard errors. Path-dependent mode (``xi``
    of shape (paths, n, n), or per-path ``beta``, or ``path_dependent=True``):
    per-path quadratic forms are regressed on features of ``x_paths``.

    If the full-horizon iteration fails to contract, the horizon is split into
    2, 4, ... segments solved backward in turn; ``NonContractionError``
    reports the last observed ratio if even ``max_segments`` fails.
    """
    grid = ensemble.grid
    N, dt, n = grid.n_steps, grid.dt, system.dim
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != n:
        raise InvalidArgumentError("xi does not match the system dimension")
    beta_arr = np.asarray(beta if beta is not None else 0.0, dtype=float)
    if path_dependent is None:
        path_dependent = xi.ndim == 3 or beta_arr.ndim == 2
    At, Bt = transformed_coefficients(system, grid, beta_arr)
    milstein = scheme == "milstein"
    if symmetrize is None:
        symmetrize = _is_symmetric(xi)
    nodes = grid.nodes
    max_segments = max_segments or N
    if path_dependent:
        return _picard_path_dependent(At, Bt, xi, f, ensemble, engine or RegressionEngine(),
                                      x_paths, quadrature, milstein, tol, max_iter, segments,
                                      max_segments, symmetrize)

    minv = _inverses(At, dt)
    bmat = np.ascontiguousarray(Bt)
    lag = system.is_constant() and beta_arr.ndim == 0
    dw = np.ascontiguousarray(ensemble.increments)
    table = _MomentTable(minv, bmat, dw, dt, milstein, lag, n_batches)

    k = max(1, int(segments))
    last_ratio = None
    while True:
        segs = _segments(0, N, k)
        P = np.empty((N + 1, n, n))
        P[N] = xi
        ratios_all: list[float] = []
        iters = 0
        ok = True
        for a, b in reversed(segs):
            Pseg, ratios, it = _deterministic_segment(table, f, nodes, a, b, P[b], quadrature, dt,
                                                      tol, max_iter, symmetrize)
            ratios_all.extend(ratios)
            iters += it
            if Pseg is None:
                ok = False
                last_ratio = ratios[-1] if ratios else last_ratio
                break
            P[a:b + 1] = Pseg
        if ok:
            break
        if k >= max_segments:
            raise NonContractionError(
                f"Picard iteration did not contract with {k} segments", ratio=last_ratio)
        k = min(2 * k, max_segments)
    P[N] = xi
    # Batch means: re-apply the converged map with each batch's moments.
    nb = len(table.batches)
    reps = np.empty((nb, N + 1, n, n))
    for bi in range(nb):
        out = np.empty((N + 1, n, n))
        out[N] = xi
        for a, b in segs:
            out[a:b + 1] = _deterministic_segment(table, f, nodes, a, b, P[b], quadrature, dt, tol,
                                                  max_iter, symmetrize, which=bi,
                                                  P_fixed=P[a:b + 1])
        reps[bi] = out
    w = table.batch_sizes / table.batch_sizes.sum()
    var = np.einsum("k,kinm->inm", w, (reps - P) ** 2) / max(nb - 1, 1)
    return OperatorProcess(grid, P, None, np.sqrt(var), iters, ratios_all, segs,
                           "deterministic-lag" if lag else "deterministic")


def _picard_path_dependent(At, Bt, xi, f, ensemble, engine, x_paths, rule, milstein, tol,
                           max_iter, segments, max_segments, symmetrize) -> OperatorProcess:
    grid = ensemble.grid
    Pn, N, dt = ensemble.n_paths, grid.n_steps, grid.dt
    n = At.shape[-1]
    minv = _inverses(At, dt)
    bmat = np.ascontiguousarray(Bt)
    dw = np.ascontiguousarray(ensemble.increments)
    xi_p = np.ascontiguousarray(np.broadcast_to(xi, (Pn, n, n)))
    feats = (x_paths.values if isinstance(x_paths, PathEnsemble) else
             np.asarray(x_paths) if x_paths is not None else ensemble.w[:, :, None])
    nodes = grid.nodes
    iu, ju = np.triu_indices(n) if symmetrize else (None, None)

    def regress_matrix(i: int, M: np.ndarray) -> np.ndarray:
        if symmetrize:
            fit = cond_expect(engine, feats[:, i], M[:, iu, ju])
            out = np.empty_like(M)
            out[:, iu, ju] = fit
            out[:, ju, iu] = fit
            return out
        return cond_expect(engine, feats[:, i], M.reshape(Pn, n * n)).reshape(Pn, n, n)

    def run_segment(a: int, b: int, terminal: np.ndarray):
        m = b - a + 1
        W = quadrature_weights(m, dt, rule)
        mv = minv[:, a:b] if minv.ndim == 4 else minv[a:b]
        bm = bmat[:, a:b] if bmat.ndim == 4 else bmat[a:b]
        mv, bm = np.ascontiguousarray(mv), np.ascontiguousarray(bm)
        sub_dw = np.ascontiguousarray(dw[:, a:b])
        Pk = np.zeros((Pn, m, n, n))
        ratios: list[float] = []
        prev = None
        rising = 0
        for it in range(1, max_iter + 1):
            F = np.stack([_apply_f(f, nodes[a + j], Pk[:, j]) for j in range(m)], axis=1)
            raw = kernels.pair_quadform_sums(mv, bm, sub_dw, terminal, np.ascontiguousarray(F), W,
                                             dt, milstein)
            new = np.empty_like(Pk)
            for j in range(m - 1):
                new[:, j] = regress_matrix(a + j, raw[:, j])
            new[:, m - 1] = terminal
            if symmetrize:
                new = _sym(new)
            change = float(np.max(np.abs(new - Pk)))
            if not np.isfinite(change):
                return None, ratios, it
            if prev is not None and prev > 0:
                ratios.append(change / prev)
                rising = rising + 1 if ratios[-1] >= 1.0 else 0
            Pk = new
            if change <= tol * max(1.0, float(np.max(np.abs(new)))):
                return Pk, ratios, it
            if rising >= 3:
                return None, ratios, it
            prev = change
        return None, ratios, max_iter

    k = max(1, int(segments))
    last_ratio = None
    while True:
        segs = _segments(0, N, k)
        P = np.empty((Pn, N + 1, n, n))
        P[:, N] = xi_p
        ratios_all: list[float] = []
        iters = 0
        ok = True
        for a, b in reversed(segs):
            Pseg, ratios, it = run_segment(a, b, np.ascontiguousarray(P[:, b]))
            ratios_all.extend(ratios)
            iters += it
            if Pseg is None:
                ok = False
                last_ratio = ratios[-1] if ratios else last_ratio
                break
            P[:, a:b + 1] = Pseg
        if ok:
            break
        if k >= max_segments:
            raise NonContractionError(
                f"Picard iteration did not contract with {k} segments", ratio=last_ratio)
        k = min(2 * k, max_segments)
    P[:, N] = xi_p
    se = P.std(axis=0) / np.sqrt(Pn)
    return OperatorProcess(grid, P, None, se, iters, ratios_all, segs, "path-dependent")


def bsie_picard_pathwise(A_steps, B_steps, xi, f: MatrixMap | None, beta,
                         ensemble: BrownianEnsemble, engine: RegressionEngine | None = None,
                         x_paths=None, tol: float = 1e-10, max_iter: int = 100,
                         quadrature: str = "trapezoid", scheme: str = "euler", segments: int = 1,
                         max_segments: int | None = None,
                         symmetrize: bool | None = None) -> OperatorProcess:
    """Path-dependent Picard iteration with per-path step matrices ``(paths, N, n, n)``.

    ``beta`` is a scalar or ``(paths, N)``; the transform of ``transformed_coefficients``
    is applied path by path.
    """
    A = np.asarray(A_steps, dtype=float)
    B = np.asarray(B_steps, dtype=float)
    if A.ndim != 4 or A.shape != B.shape:
        raise InvalidArgumentError("A_steps and B_steps must both be (paths, N, n, n)")
    grid = ensemble.grid
    Pn, N, n = A.shape[0], A.shape[1], A.shape[-1]
    if Pn != ensemble.n_paths or N != grid.n_steps:
        raise InvalidArgumentError("step matrices do not match the ensemble")
    b = np.broadcast_to(np.asarray(beta if beta is not None else 0.0, dtype=float), (Pn, N))
    bb = b[:, :, None, None]
    eye = np.eye(n)
    At = A - 0.5 * bb * B - 0.125 * bb * bb * eye
    Bt = B + 0.5 * bb * eye
    xi = np.asarray(xi, dtype=float)
    if symmetrize is None:
        symmetrize = _is_symmetric(xi)
    return _picard_path_dependent(At, Bt, xi, f, ensemble, engine or RegressionEngine(), x_paths,
                                  quadrature, scheme == "milstein", tol, max_iter, segments,
                                  max_segments or N, symmetrize)


def picard_residual(op: OperatorProcess, system: GalerkinSystem, xi, f, beta,
                    ensemble: BrownianEnsemble, quadrature: str = "trapezoid",
                    scheme: str = "euler") -> float:
    """Max change produced by one more application of the (deterministic) Picard map."""
    if op.path_dependent:
        raise InvalidArgumentError("residual check is implemented for deterministic P only")
    grid = ensemble.grid
    At, Bt = transformed_coefficients(system, grid, beta)
    lag = system.is_constant() and np.ndim(beta) == 0
    table = _MomentTable(_inverses(At, grid.dt), np.ascontiguousarray(Bt),
                         np.ascontiguousarray(ensemble.increments), grid.dt, scheme == "milstein",
                         lag, 2)
    N = grid.n_steps
    out = np.empty_like(op.P)
    out[N] = np.asarray(xi, dtype=float)
    for a, b in op.segments or [(0, N)]:
        out[a:b + 1] = _deterministic_segment(table, f, grid.nodes, a, b, op.P[b], quadrature,
                                              grid.dt, 0.0, 1, _is_symmetric(np.asarray(xi)),
                                              P_fixed=op.P[a:b + 1])
    return float(np.max(np.abs(out - op.P)))


def contraction_threshold(system: GalerkinSystem, lipschitz: float, ensemble: BrownianEnsemble,
                          beta=0.0, scheme: str = "euler") -> float:
    """Horizon length below which the Picard map is a contraction with factor 1/2.

    The map's Lipschitz constant on a window of length d is at most
    ``lipschitz * d * Lam`` with ``Lam = max_{i<=j} |E[L~ (x) L~]|`` (operator
    norm of the moment tensor acting on matrices); the threshold is
    ``1 / (2 lipschitz Lam)``.
    """
    grid = ensemble.grid
    At, Bt = transformed_coefficients(system, grid, beta)
    lag = system.is_constant() and np.ndim(beta) == 0
    table = _MomentTable(_inverses(At, grid.dt), np.ascontiguousarray(Bt),
                         np.ascontiguousarray(ensemble.increments), grid.dt, scheme == "milstein",
                         lag, 2)
    n = system.dim
    lam = 0.0
    for tab in table.mean:
        mats = np.transpose(tab, (0, 2, 4, 1, 3)).reshape(len(tab), n * n, n * n)
        lam = max(lam, float(np.max(np.linalg.norm(mats, ord=2, axis=(1, 2)))))
    if lipschitz <= 0:
        return float("inf")
    return 1.0 / (2.0 * lipschitz * lam)


# ----------------------------------------------------------------------------
# Matrix BSDE route.

def _sylvester_factors(A_nodes: np.ndarray, dt: float, constant: bool):
    """LU factors of ``K = kron(a, I) + kron(I, b')`` with ``a = I/2 - dt A'``, ``b = I/2 - dt A``.

    For row-major flattening, ``K vec(P) = vec(a P + P b) = vec(P - dt (A'P + PA))``.
    """
    n = A_nodes.shape[-1]
    eye = np.eye(n)

    def factor(A):
        a = 0.5 * eye - dt * A.T
        b = 0.5 * eye - dt * A
        K = np.kron(a, eye) + np.kron(eye, b.T)
        lu = lu_factor(K, check_finite=True)
        if np.any(np.abs(np.diag(lu[0])) < 1e-300):
            raise NumericalError("Sylvester system is singular")
        return lu

    try:
        if constant:
            lu = factor(A_nodes[0])
            return [lu] * len(A_nodes)
        return [factor(A) for A in A_nodes]
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise NumericalError(f"Sylvester solve failed: {exc}") from exc


def matrix_bsde_backward(system: GalerkinSystem, xi, f: MatrixMap | None, beta,
                         ensemble: BrownianEnsemble, engine: RegressionEngine | None = None,
                         x_paths=None, path_dependent: bool | None = None) -> OperatorProcess:
    """Backward Euler for the matrix BSDE, implicit in ``A'P + PA``.

    Deterministic data: ``Q = 0`` and
    ``P_i - dt (A'P_i + P_i A) = P_{i+1} + dt (B'P_{i+1}B + f(t_i, P_{i+1}))``.
    Path-dependent data: ``Q_i`` is the regression of ``(P_{i+1} - E_i P_{i+1}) dw / dt``
    and the explicit part adds ``B'Q + QB + beta Q``.
    """
    grid = ensemble.grid
    N, dt, n = grid.n_steps, grid.dt, system.dim
    xi = np.asarray(xi, dtype=float)
    beta_arr = np.asarray(beta if beta is not None else 0.0, dtype=float)
    if path_dependent is None:
        path_dependent = xi.ndim == 3 or beta_arr.ndim == 2
    A = system.A_nodes(grid)
    B = system.B_nodes(grid)
    lus = _sylvester_factors(A[:-1], dt, system.is_constant())
    nodes = grid.nodes
    symmetric = _is_symmetric(xi)

    if not path_dependent:
        P = np.empty((N + 1, n, n))
        P[N] = xi
        for i in range(N - 1, -1, -1):
            Pn = P[i + 1]
            rhs = Pn + dt * (B[i].T @ Pn @ B[i] + _apply_f(f, nodes[i], Pn))
            Pi = lu_solve(lus[i], rhs.reshape(-1)).reshape(n, n)
            if not np.isfinite(Pi).all():
                raise NumericalError(f"non-finite P at step {i}")
            P[i] = _sym(Pi) if symmetric else Pi
        return OperatorProcess(grid, P, np.zeros((N, n, n)), np.zeros_like(P), N, [], [(0, N)],
                               "deterministic")

    engine = engine or RegressionEngine()
    Pn_paths = ensemble.n_paths
    feats = (x_paths.values if isinstance(x_paths, PathEnsemble) else
             np.asarray(x_paths) if x_paths is not None else ensemble.w[:, :, None])
    b = np.broadcast_to(beta_arr if beta_arr.ndim == 2 else
                        np.broadcast_to(beta_arr if beta_arr.ndim == 0 else beta_arr[:N], (N,)),
                        (Pn_paths, N))
    dw = ensemble.increments
    P = np.empty((Pn_paths, N + 1, n, n))
    Q = np.empty((Pn_paths, N, n, n))
    P[:, N] = np.broadcast_to(xi, (Pn_paths, n, n))
    for i in range(N - 1, -1, -1):
        x = feats[:, i]
        nxt = P[:, i + 1].reshape(Pn_paths, n * n)
        mean_next = cond_expect(engine, x, nxt)
        Qi = cond_expect(engine, x, (nxt - mean_next) * dw[:, i, None]).reshape(Pn_paths, n, n) / dt
        E = mean_next.reshape(Pn_paths, n, n)
        Bi = B[i]
        drift = (Bi.T @ E @ Bi + Bi.T @ Qi + Qi @ Bi + b[:, i, None, None] * Qi
                 + _apply_f(f, nodes[i], E))
        rhs = (E + dt * drift).reshape(Pn_paths, n * n)
        Pi = lu_solve(lus[i], rhs.T).T.reshape(Pn_paths, n, n)
        if not np.isfinite(Pi).all():
            raise NumericalError(f"non-finite P at step {i}")
        P[:, i] = _sym(Pi) if symmetric else Pi
        Q[:, i] = Qi
    return OperatorProcess(grid, P, Q, P.std(axis=0) / np.sqrt(Pn_paths), N, [], [(0, N)],
                           "path-dependent")


def lyapunov_ode_reference(system: GalerkinSystem, xi, f: MatrixMap | None, T: float,
                           t_eval: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Deterministic oracle: ``-dP/dt = A'P + PA + B'PB + f(P)``, ``P(T) = xi``, by an adaptive RK solver."""
    from scipy.integrate import solve_ivp

    if not system.is_constant():
        raise InvalidArgumentError("reference ODE needs constant A, B")
    A = np.asarray(system.A, dtype=float)
    B = np.asarray(system.B, dtype=float)
    n = A.shape[0]

    def rhs(s, v):
        Pm = v.reshape(n, n)
        t = T - s
        return (A.T @ Pm + Pm @ A + B.T @ Pm @ B + _apply_f(f, t, Pm)).reshape(-1)

    s_eval = T - np.asarray(t_eval, dtype=float)
    order = np.argsort(s_eval)
    sol = solve_ivp(rhs, (0.0, T), np.asarray(xi, dtype=float).reshape(-1), method="DOP853",
                    t_eval=s_eval[order], rtol=rtol, atol=1e-12)
    out = np.empty((len(s_eval), n, n))
    out[order] = sol.y.T.reshape(-1, n, n)
    return out


# ----------------------------------------------------------------------------
# Diagnostics.

def _spec_norm(M: np.ndarray) -> np.ndarray:
    return np.linalg.norm(M, ord=2, axis=(-2, -1))


def apriori_diagnostics(op: OperatorProcess, xi, f: MatrixMap | None, ensemble: BrownianEnsemble,
                        engine: RegressionEngine | None = None, x_paths=None) -> dict:
    """Node ratios ``|P(t)|^2 / E_t[|xi|^2 + int_t^T |f(s, 0)|^2 ds]`` and their maximum.

    Spectral norms; ``0/0`` counts as 0. Path-dependent P uses the regression
    engine for the conditional expectation and reports the worst path.
    """
    grid = ensemble.grid
    N, dt = grid.n_steps, grid.dt
    xi = np.asarray(xi, dtype=float)
    n = xi.shape[-1]
    zero = np.zeros((n, n)) if not op.path_dependent else np.zeros((op.P.shape[0], n, n))
    f0 = np.array([_spec_norm(_apply_f(f, t, zero)) ** 2 for t in grid.nodes])
    xi2 = _spec_norm(xi) ** 2
    W = quadrature_weights(N + 1, dt, "trapezoid")
    if op.path_dependent:
        f0 = f0.T  # (paths, N+1)
        tails = f0 @ W.T
        feats = (x_paths.values if isinstance(x_paths, PathEnsemble) else
                 np.asarray(x_paths) if x_paths is not None else ensemble.w[:, :, None])
        eng = engine or RegressionEngine()
        denom = np.stack([cond_expect(eng, feats[:, i], np.broadcast_to(xi2, (len(f0),)) + tails[:, i])
                          for i in range(N + 1)], axis=1)
        num = _spec_norm(op.P) ** 2
    else:
        denom = xi2 + W @ f0
        num = _spec_norm(op.P) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(num == 0.0, 0.0, num / denom)
    if op.path_dependent:
        ratio = ratio.max(axis=0)
    return {"ratios": ratio, "max_ratio": float(np.max(ratio))}


def stability_ratio(op_a: OperatorProcess, op_b: OperatorProcess, xi_a, xi_b,
                    f_a: MatrixMap | None, f_b: MatrixMap | None) -> float:
    """Empirical Lipschitz constant ``sup_t |P_a - P_b| / (|xi_a - xi_b|^2 + int |f_a(P_b) - f_b(P_b)|^2)^(1/2)``."""
    grid = op_a.grid
    Pa, Pb = op_a.mean(), op_b.mean()
    num = float(np.max(_spec_norm(Pa - Pb)))
    dxi = np.asarray(xi_a, dtype=float) - np.asarray(xi_b, dtype=float)
    if dxi.ndim == 3:
        dxi2 = float(np.mean(_spec_norm(dxi) ** 2))
    else:
        dxi2 = float(_spec_norm(dxi) ** 2)
    df = np.array([_spec_norm(_apply_f(f_a, t, Pb[i]) - _apply_f(f_b, t, Pb[i])) ** 2
                   for i, t in enumerate(grid.nodes)])
    W = quadrature_weights(grid.n_steps + 1, grid.dt, "trapezoid")
    denom = np.sqrt(dxi2 + float((W @ df)[0]))
    if denom == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return num / denom


def continuity_probe(ops, u, v) -> list[tuple[float, float]]:
    """``(dt, max_i |<P(t_{i+1})u, v> - <P(t_i)u, v>|)`` for each process given.

    Path-dependent processes use the mean absolute increment over paths.
    """
    if isinstance(ops, OperatorProcess):
        ops = [ops]
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    table = []
    for op in ops:
        vals = np.einsum("...ij,j,i->...", op.P, u, v)
        inc = np.abs(np.diff(vals, axis=-1))
        if op.path_dependent:
            inc = inc.mean(axis=0)
        table.append((op.grid.dt, float(inc.max()) if inc.size else 0.0))
    return table
