"""Weak Ito formula residuals (sigma, Z) and the diffusion-inhomogeneity shift."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bsde import RegressionEngine, cond_expect, martingale_integrand
from .bsie import OperatorProcess, _apply_f
from .core import BrownianEnsemble, GalerkinSystem, OrderReport, SpikeSpec, quad_form
from .forward import PathEnsemble, sample_mean_se, solve_linear_see, stochastic_exponential
from .orders import order_report


@dataclass(eq=False)
class ItoResidualBundle:
    """``sigma``, ``M = <P x, x> + sigma`` and ``g`` on nodes ``(P, N+1)``; ``Z`` on steps ``(P, N)``."""

    rho: float
    sigma: np.ndarray | None
    Z: np.ndarray | None
    M: np.ndarray | None
    g: np.ndarray | None
    x: PathEnsemble | None
    sup_abs_sigma: float = 0.0
    sup_abs_sigma_se: float = 0.0
    sigma0_mean: float = 0.0
    sigma0_se: float = 0.0
    z_norm: float = 0.0
    z_norm_se: float = 0.0


def _zeta_process(zeta, P: int, N: int, n: int) -> np.ndarray:
    z = np.asarray(zeta, dtype=float)
    if z.ndim <= 1:
        return np.broadcast_to(np.broadcast_to(z, (n,)), (P, N, n))
    if z.ndim == 2:
        return np.broadcast_to(z[:N], (P, N, n))
    return z


def spiked_state(system: GalerkinSystem, zeta, spike: SpikeSpec, ensemble: BrownianEnsemble,
                 scheme: str = "euler") -> PathEnsemble:
    """``dx = A x dt + (B x + zeta 1_E) dw`` with ``x(0) = 0``."""
    grid = ensemble.grid
    n = system.dim
    ind = spike.indicator(grid)
    zp = _zeta_process(zeta, ensemble.n_paths, grid.n_steps, n)
    return solve_linear_see(system, ensemble, np.zeros(n),
                            diffusion=lambda i, x: zp[:, i] * ind[i], scheme=scheme)


def compute_sigma(P: OperatorProcess, system: GalerkinSystem, zeta, beta, spike: SpikeSpec,
                  ensemble: BrownianEnsemble, engine: RegressionEngine, xi=None, f=None,
                  store: bool = True, alpha: float = 1.0) -> ItoResidualBundle:
    """Defect ``sigma`` of the weak Ito formula from its conditional-expectation form.

    Backward recursion ``W_i = g_i dt + (lam_{i+1} / lam_i) W_{i+1}`` with
    ``W_N = <P_N x_N, x_N>`` and ``g = <f(P) x, x> - <P zeta, zeta> 1_E``;
    ``sigma_i = E_i[W_i] - <P_i x_i, x_i>`` (no regression at N, so
    ``sigma_N = 0`` exactly). ``Z_i`` is the martingale-increment regression of
    ``M = <P x, x> + sigma``. ``lam = stochastic_exponential(beta, 0)``.

    ``xi`` is not needed beyond ``P_N``; it is accepted for symmetry with the
    equation's data. With ``store=False`` only the summary statistics are kept.
    """
    grid = ensemble.grid
    Pn, N, dt, n = ensemble.n_paths, grid.n_steps, grid.dt, system.dim
    spike.window(grid)
    ind = spike.indicator(grid)
    x = spiked_state(system, zeta, spike, ensemble)
    X = x.values
    lam = stochastic_exponential(beta if beta is not None else 0.0, 0.0, ensemble).values
    zp = _zeta_process(zeta, Pn, N, n)
    nodes = grid.nodes
    dw = ensemble.increments

    W = quad_form(P.node(N), X[:, N])
    M_next = W.copy()
    sig_abs = np.zeros(N + 1)
    sig_se = np.zeros(N + 1)
    z2 = np.zeros(Pn)
    if store:
        sigma = np.zeros((Pn, N + 1))
        Z = np.zeros((Pn, N))
        M = np.zeros((Pn, N + 1))
        G = np.zeros((Pn, N + 1))
        M[:, N] = M_next
    s0_mean, s0_se = 0.0, 0.0
    for i in range(N - 1, -1, -1):
        Pi = P.node(i)
        xi_ = X[:, i]
        F = _apply_f(f, nodes[i], Pi)
        gi = quad_form(F, xi_)
        if ind[i]:
            gi = gi - quad_form(Pi, zp[:, i])
        W = gi * dt + (lam[:, i + 1] / lam[:, i]) * W
        quad = quad_form(Pi, xi_)
        s = cond_expect(engine, xi_, W) - quad
        Mi = quad + s
        Zi = martingale_integrand(engine, xi_, M_next, dw[:, i], dt)
        z2 += Zi * Zi * dt
        sig_abs[i], sig_se[i] = sample_mean_se(np.abs(s))
        if store:
            sigma[:, i] = s
            Z[:, i] = Zi
            M[:, i] = Mi
            G[:, i] = gi
        M_next = Mi
        if i == 0:
            s0_mean, s0_se = sample_mean_se(s)
    j = int(np.argmax(sig_abs))
    zn, zn_se = sample_mean_se(z2 ** (alpha / 2.0))
    return ItoResidualBundle(
        float(spike.rho), sigma if store else None, Z if store else None, M if store else None,
        G if store else None, x if store else None, float(sig_abs[j]), float(sig_se[j]),
        s0_mean, s0_se, zn, zn_se)


def extract_Z(bundle: ItoResidualBundle, alpha: float = 1.0) -> tuple[np.ndarray, float, float]:
    """``Z`` and ``E[(sum Z^2 dt)^{alpha/2}]`` with its standard error."""
    if bundle.Z is None:
        raise ValueError("bundle was computed with store=False")
    dt = bundle.x.grid.dt
    val, se = sample_mean_se((np.sum(bundle.Z ** 2, axis=1) * dt) ** (alpha / 2.0))
    return bundle.Z, val, se


def reconstruct_M(bundle: ItoResidualBundle, beta, ensemble: BrownianEnsemble,
                  engine: RegressionEngine) -> tuple[np.ndarray, float]:
    """Backward rebuild ``M_i = E_i[M_{i+1}] + (g_i + beta Z_i) dt`` from ``M_N``.

    Returns the rebuilt process and ``max_i mean_p |M_rebuilt - M|``.
    """
    grid = ensemble.grid
    N, dt = grid.n_steps, grid.dt
    X = bundle.x.values
    b = np.asarray(beta if beta is not None else 0.0, dtype=float)
    bsteps = np.broadcast_to(b if b.ndim == 2 else np.broadcast_to(b if b.ndim == 0 else b[:N], (N,)),
                             (ensemble.n_paths, N))
    Mh = np.empty_like(bundle.M)
    Mh[:, N] = bundle.M[:, N]
    for i in range(N - 1, -1, -1):
        Mh[:, i] = cond_expect(engine, X[:, i], Mh[:, i + 1]) + \
            (bundle.g[:, i] + bsteps[:, i] * bundle.Z[:, i]) * dt
    err = float(np.max(np.mean(np.abs(Mh - bundle.M), axis=0)))
    return Mh, err


def ito_order_sweep(P: OperatorProcess, system: GalerkinSystem, zeta, beta, t0: float, rho_list,
                    ensemble: BrownianEnsemble, engine: RegressionEngine, f=None,
                    alpha: float = 1.0) -> tuple[list[ItoResidualBundle], OrderReport, OrderReport]:
    """Common-random-number sweep over rho; o(rho^alpha) for sigma, O(rho^alpha) for Z."""
    bundles = [compute_sigma(P, system, zeta, beta, SpikeSpec(t0, r), ensemble, engine, f=f,
                             store=False, alpha=alpha) for r in rho_list]
    sig = order_report(rho_list, [b.sup_abs_sigma for b in bundles], alpha, "o",
                       [b.sup_abs_sigma_se for b in bundles], name="sup_t E|sigma|")
    zr = order_report(rho_list, [b.z_norm for b in bundles], alpha, "O",
                      [b.z_norm_se for b in bundles], name="E[(int Z^2)^(alpha/2)]")
    return bundles, sig, zr


@dataclass(eq=False)
class ShiftResult:
    rho: float
    error: float
    stderr: float
    y: PathEnsemble
    shifted: PathEnsemble


def shift_diffusion_inhomogeneity(system: GalerkinSystem, zeta0, spike: SpikeSpec,
                                  ensemble: BrownianEnsemble, alpha: float = 1.0) -> ShiftResult:
    """Compare the spiked-diffusion state y with ``sqrt(rho) z``.

    ``z`` is 0 before the window, ``zeta0 (w(t) - w(t0)) / sqrt(rho)`` on it,
    and the homogeneous flow of its end value afterwards. ``sqrt(rho) z`` is
    built directly (no division by sqrt(rho)), so with ``A = B = 0`` it
    reproduces y bit for bit. Returns ``E[sup_t |y - sqrt(rho) z|^{2 alpha}]``.
    """
    grid = ensemble.grid
    n = system.dim
    i0, i1 = spike.window(grid)
    z0 = np.broadcast_to(np.asarray(zeta0, dtype=float), (n,))
    y = spiked_state(system, z0, spike, ensemble)
    Pn, N = ensemble.n_paths, grid.n_steps
    dw = ensemble.increments
    shifted = np.zeros((Pn, N + 1, n))
    cur = np.zeros((Pn, n))
    for i in range(i0, i1):
        cur = cur + dw[:, i, None] * z0
        shifted[:, i + 1] = cur
    if i1 < N:
        tail = solve_linear_see(system, ensemble, cur, start=i1)
        shifted[:, i1:] = tail.values[:, i1:]
    diff = y.values - shifted
    s = np.max(np.sum(diff * diff, axis=2), axis=1) ** alpha
    err, se = sample_mean_se(s)
    return ShiftResult(float(spike.rho), err, se, y, PathEnsemble(grid, shifted))


def shift_order_sweep(system: GalerkinSystem, zeta0, t0: float, rho_list,
                      ensemble: BrownianEnsemble, alpha: float = 1.0) -> tuple[list[ShiftResult], OrderReport]:
    res = [shift_diffusion_inhomogeneity(system, zeta0, SpikeSpec(t0, r), ensemble, alpha)
           for r in rho_list]
    rep = order_report(rho_list, [r.error for r in res], 2 * alpha, "O", [r.stderr for r in res],
                       name="E[sup|y - sqrt(rho) z|^(2 alpha)]")
    return res, rep
