"""Regression Monte Carlo for scalar BSDEs and the first-order adjoint.

Conditional expectations given F_{t_i} are replaced by least-squares
projections onto features of the state at t_i.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .core import BrownianEnsemble, CoefficientSet, GalerkinSystem, as_control_process
from .errors import InvalidArgumentError, RankDeficiencyWarning, StepSizeError
from .forward import PathEnsemble, stochastic_exponential


@dataclass(frozen=True)
class RegressionEngine:
    """Polynomial features of total degree <= ``degree`` (0, 1 or 2) and a ridge penalty."""

    degree: int = 2
    ridge: float = 0.0
    rank_tol: float = 1e-11

    def __post_init__(self):
        if self.degree not in (0, 1, 2):
            raise InvalidArgumentError("degree must be 0, 1 or 2")
        if self.ridge < 0:
            raise InvalidArgumentError("ridge must be nonnegative")

    def features(self, x: np.ndarray | None) -> np.ndarray:
        """Non-intercept feature columns ``(P, k)``; the intercept is handled separately."""
        if x is None or self.degree == 0:
            return np.zeros((0 if x is None else len(x), 0))
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        cols = [x]
        if self.degree == 2:
            n = x.shape[1]
            iu, ju = np.triu_indices(n)
            cols.append(x[:, iu] * x[:, ju])
        return np.concatenate(cols, axis=1)


@dataclass
class RegressionFit:
    """Fitted projection: ``coef[0]`` is the intercept, the rest follow ``engine.features``."""

    coef: np.ndarray
    stderr: np.ndarray
    predictions: np.ndarray
    kept: np.ndarray


def regress(engine: RegressionEngine, x, targets) -> RegressionFit:
    """Least squares of ``targets`` (P,) or (P, k) on intercept plus features of ``x``.

    Feature columns that are constant across paths are dropped (they are
    collinear with the intercept). Columns are centred and scaled before the
    normal equations are factored. Rank deficiency triggers a warning and a
    minimum-norm solve.
    """
    Y = np.asarray(targets, dtype=float)
    single = Y.ndim == 1
    if single:
        Y = Y[:, None]
    P = Y.shape[0]
    if P == 0:
        raise InvalidArgumentError("no paths to regress on")
    F = engine.features(x) if x is not None else np.zeros((P, 0))
    if F.shape[0] != P:
        raise InvalidArgumentError("one target per path is required")
    kept = np.flatnonzero(np.ptp(F, axis=0) > 0) if F.shape[1] else np.zeros(0, dtype=int)
    F = F[:, kept]

    y0 = Y[0]
    D = Y - y0
    ymean = D.mean(axis=0)
    const_cols = np.all(D == 0.0, axis=0)
    k = F.shape[1]
    coef_std = np.zeros((k, Y.shape[1]))
    if k:
        mu = F.mean(axis=0)
        sd = F.std(axis=0)
        Z = (F - mu) / sd
        G = Z.T @ Z / P
        rhs = Z.T @ (D - ymean) / P
        G_r = G + engine.ridge * np.eye(k)
        ev = np.linalg.eigvalsh(G_r)
        if ev[0] <= engine.rank_tol * max(ev[-1], 1.0):
            warnings.warn(f"rank-deficient regression design (min eigenvalue {ev[0]:.3e})",
                          RankDeficiencyWarning, stacklevel=3)
            coef_std = np.linalg.lstsq(G_r, rhs, rcond=None)[0]
        else:
            coef_std = cho_solve(cho_factor(G_r), rhs)
        coef_std[:, const_cols] = 0.0
        pred = y0 + ymean + Z @ coef_std
    else:
        pred = np.broadcast_to(y0 + ymean, Y.shape).copy()
    pred[:, const_cols] = y0[const_cols]

    # Back to raw feature units and classical OLS standard errors.
    if k:
        slopes = coef_std / sd[:, None]
        intercept = y0 + ymean - mu @ slopes
        X = np.concatenate([np.ones((P, 1)), F], axis=1)
        resid = Y - pred
        dof = max(P - k - 1, 1)
        s2 = np.sum(resid * resid, axis=0) / dof
        try:
            xtx_inv_diag = np.diag(np.linalg.pinv(X.T @ X))
        except np.linalg.LinAlgError:
            xtx_inv_diag = np.full(k + 1, np.nan)
        se = np.sqrt(np.outer(xtx_inv_diag, s2))
        coef = np.vstack([intercept, slopes])
    else:
        resid = Y - pred
        s2 = np.sum(resid * resid, axis=0) / max(P - 1, 1)
        coef = (y0 + ymean)[None]
        se = np.sqrt(s2 / P)[None]
    if single:
        return RegressionFit(coef[:, 0], se[:, 0], pred[:, 0], kept)
    return RegressionFit(coef, se, pred, kept)


def cond_expect(engine: RegressionEngine, features_at_t, targets) -> np.ndarray:
    """Per-path estimate of ``E[targets | F_t]`` by projection onto features of the state at t.

    ``features_at_t=None`` means no information beyond the intercept, so the
    prediction is the sample mean.
    """
    return regress(engine, features_at_t, targets).predictions


@dataclass(frozen=True, eq=False)
class BsdePair:
    """``y`` is ``(P, N+1)``; ``z`` is ``(P, N)`` (one value per step)."""

    grid: object
    y: np.ndarray
    z: np.ndarray

    @property
    def y_paths(self) -> PathEnsemble:
        return PathEnsemble(self.grid, self.y)


@dataclass(frozen=True, eq=False)
class AdjointFirstOrder:
    """``p`` is ``(P, N+1, n)``, ``q`` is ``(P, N, n)``; ``p_se`` ``(N+1, n)`` and ``q_se``
    ``(N, n)`` are leverage-averaged prediction standard errors of the regressions."""

    grid: object
    p: np.ndarray
    q: np.ndarray
    p_se: np.ndarray | None = None
    q_se: np.ndarray | None = None


def _state_at(x_paths, i: int):
    if x_paths is None:
        return None
    vals = x_paths.values if isinstance(x_paths, PathEnsemble) else np.asarray(x_paths)
    return vals[:, i]


def martingale_integrand(engine: RegressionEngine, x, y_next: np.ndarray, dw: np.ndarray,
                         dt: float, mean_next: np.ndarray | None = None) -> np.ndarray:
    """``E[(Y - E[Y | F_t]) dw | F_t] / dt``; zero exactly for a constant Y."""
    if mean_next is None:
        mean_next = cond_expect(engine, x, y_next)
    resid = y_next - mean_next
    dwb = dw if resid.ndim == 1 else dw[:, None]
    return cond_expect(engine, x, resid * dwb) / dt


def solve_bsde_lsmc(terminal, generator, x_paths, ensemble: BrownianEnsemble,
                    engine: RegressionEngine, lipschitz_y: float = 0.0,
                    inner_iterations: int = 5) -> BsdePair:
    """Backward Euler: ``y_i = E_i[y_{i+1}] + dt k(t_i, x_i, y_i, z_i)``, implicit in y.

    ``generator(t, x, y, z)`` returns ``(P,)``; ``x`` is the state at t_i
    (or None when ``x_paths`` is None). The y fixed point runs at most
    ``inner_iterations`` times starting from ``E_i[y_{i+1}]``.
    """
    grid = ensemble.grid
    P, N, dt = ensemble.n_paths, grid.n_steps, grid.dt
    if lipschitz_y * dt >= 1.0:
        raise StepSizeError(f"|k_y| dt = {lipschitz_y * dt!r} >= 1: implicit step does not contract")
    y = np.empty((P, N + 1))
    z = np.empty((P, N))
    y[:, N] = np.broadcast_to(np.asarray(terminal, dtype=float), (P,))
    nodes = grid.nodes
    dw = ensemble.increments
    for i in range(N - 1, -1, -1):
        x = _state_at(x_paths, i)
        ey = cond_expect(engine, x, y[:, i + 1])
        zi = martingale_integrand(engine, x, y[:, i + 1], dw[:, i], dt, ey)
        yi = ey + dt * np.broadcast_to(generator(nodes[i], x, ey, zi), (P,))
        prev_gap = None
        for _ in range(inner_iterations - 1):
            nxt = ey + dt * np.broadcast_to(generator(nodes[i], x, yi, zi), (P,))
            gap = float(np.max(np.abs(nxt - yi)))
            yi = nxt
            if gap == 0.0:
                break
            if prev_gap is not None and gap > prev_gap and gap > 1e-12 * (1 + np.abs(yi).max()):
                raise StepSizeError(f"implicit y-step diverges at step {i}")
            prev_gap = gap
        y[:, i] = yi
        z[:, i] = zi
    return BsdePair(grid, y, z)


def _as_step_array(v, P: int, N: int) -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 1 and arr.shape[0] == N + 1:
        arr = arr[:-1]
    return np.broadcast_to(arr, (P, N))


def solve_linear_bsde_explicit(k0, k_y, k_z, terminal, ensemble: BrownianEnsemble,
                               engine: RegressionEngine, x_paths=None,
                               method: str = "explicit") -> BsdePair:
    """Linear BSDE with generator ``k0 + k_y y + k_z z``.

    ``method="explicit"`` weights with ``Gamma = stochastic_exponential(k_z, k_y)``:
    ``y_i = E_i[(Gamma_N / Gamma_i) xi + sum_{j>=i} (Gamma_j / Gamma_i) k0_j dt]``,
    one regression per node, z from martingale increments of the resulting y.
    ``method="lsmc"`` hands the same generator to ``solve_bsde_lsmc``.
    """
    grid = ensemble.grid
    P, N, dt = ensemble.n_paths, grid.n_steps, grid.dt
    K0 = _as_step_array(k0, P, N)
    KY = _as_step_array(k_y, P, N)
    KZ = _as_step_array(k_z, P, N)
    xi = np.broadcast_to(np.asarray(terminal, dtype=float), (P,))
    if method == "lsmc":
        def gen(t, x, y, z):
            i = grid.index_of(t)
            return K0[:, i] + KY[:, i] * y + KZ[:, i] * z

        lip = float(np.max(np.abs(KY))) if KY.size else 0.0
        return solve_bsde_lsmc(xi, gen, x_paths, ensemble, engine, lipschitz_y=lip)
    if method != "explicit":
        raise InvalidArgumentError(f"unknown method {method!r}")
    gam = stochastic_exponential(KZ, KY, ensemble).values
    run = np.zeros((P, N + 1))
    np.cumsum(gam[:, :-1] * K0 * dt, axis=1, out=run[:, 1:])
    y = np.empty((P, N + 1))
    z = np.empty((P, N))
    y[:, N] = xi
    dw = ensemble.increments
    for i in range(N - 1, -1, -1):
        x = _state_at(x_paths, i)
        target = (gam[:, N] * xi + (run[:, N] - run[:, i])) / gam[:, i]
        y[:, i] = cond_expect(engine, x, target)
        z[:, i] = martingale_integrand(engine, x, y[:, i + 1], dw[:, i], dt)
    return BsdePair(grid, y, z)


def solve_first_order_adjoint(system: GalerkinSystem, coeffs: CoefficientSet, xbar, ybar, zbar,
                              ubar, ensemble: BrownianEnsemble,
                              engine: RegressionEngine) -> AdjointFirstOrder:
    """Backward scheme for ``(p, q)``, dual to the forward semi-implicit step.

    With ``M = (I - dt A)^{-1}``, ``E = E_i[p_{i+1}]`` and
    ``q = E_i[(p_{i+1} - E) dw] / dt``:

        (1 - dt k_y) p_i = (I + dt a_x')M'E + dt Bb'M'q + dt k_x
                           + dt k_z [(I + dt a_x')M'q + Bb'M'E]

    where ``Bb = B + b_x``. Coefficients are evaluated along the reference
    trajectory. The terminal value ``h_x(x(T))`` is assigned exactly.
    """
    coeffs.require("a_x", "b_x", "h_x", "k_x", "k_y", "k_z")
    grid = ensemble.grid
    P, N, dt, n = ensemble.n_paths, grid.n_steps, grid.dt, system.dim
    X = xbar.values if isinstance(xbar, PathEnsemble) else np.asarray(xbar)
    Yb = ybar.y if isinstance(ybar, BsdePair) else np.asarray(ybar)
    Zb = zbar.z if isinstance(zbar, BsdePair) else np.asarray(zbar)
    u = as_control_process(ubar, P, N)
    minv = system.implicit_inverses(grid)
    Bn = system.B_nodes(grid)
    nodes = grid.nodes
    dw = ensemble.increments
    p = np.empty((P, N + 1, n))
    q = np.empty((P, N, n))
    p_se = np.zeros((N + 1, n))
    q_se = np.zeros((N, n))
    p[:, N] = coeffs.h_x(X[:, N])
    eye = np.eye(n)
    for i in range(N - 1, -1, -1):
        x = X[:, i]
        t = nodes[i]
        e1 = cond_expect(engine, x, p[:, i + 1])
        qh = martingale_integrand(engine, x, p[:, i + 1], dw[:, i], dt, e1)
        lev = np.sqrt((engine.features(x).shape[1] + 1) / P)
        resid = p[:, i + 1] - e1
        p_se[i] = resid.std(axis=0) * lev
        q_se[i] = (resid * dw[:, i, None] / dt - qh).std(axis=0) * lev
        ax = np.broadcast_to(coeffs.a_x(t, x, u[:, i]), (P, n, n))
        bbar = Bn[i] + np.broadcast_to(coeffs.b_x(t, x, u[:, i]), (P, n, n))
        ky = np.broadcast_to(coeffs.k_y(t, x, Yb[:, i], Zb[:, i], u[:, i]), (P,))
        kz = np.broadcast_to(coeffs.k_z(t, x, Yb[:, i], Zb[:, i], u[:, i]), (P,))
        kx = np.broadcast_to(coeffs.k_x(t, x, Yb[:, i], Zb[:, i], u[:, i]), (P, n))
        mE = e1 @ minv[i]          # rows: (M' E)'
        mq = qh @ minv[i]
        J = eye + dt * ax          # (I + dt a_x); applied transposed below
        JtmE = np.einsum("pji,pj->pi", J, mE)
        Jtmq = np.einsum("pji,pj->pi", J, mq)
        BtmE = np.einsum("pji,pj->pi", bbar, mE)
        Btmq = np.einsum("pji,pj->pi", bbar, mq)
        rhs = JtmE + dt * Btmq + dt * kx + dt * kz[:, None] * (Jtmq + BtmE)
        p[:, i] = rhs / (1.0 - dt * ky)[:, None]
        q[:, i] = qh
    return AdjointFirstOrder(grid, p, q, p_se, q_se)
