"""Spike-variation pipeline: variational systems, adjoints, duality and the maximum-principle verdict."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .bsde import (AdjointFirstOrder, BsdePair, RegressionEngine, solve_bsde_lsmc,
                   solve_first_order_adjoint, solve_linear_bsde_explicit)
from .bsie import OperatorProcess, bsie_picard, bsie_picard_pathwise
from .core import (BrownianEnsemble, CoefficientSet, GalerkinSystem, OrderReport, SpikeSpec,
                   TimeGrid, as_control_process, quad_form)
from .errors import ConfigurationError, InvalidArgumentError
from .forward import (PathEnsemble, moment_estimate, sample_mean_se, solve_linear_see, solve_see,
                      stochastic_exponential)
from .orders import order_report


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, PathEnsemble) else np.asarray(x, dtype=float)


def _n_paths_of(u) -> int:
    arr = np.asarray(u)
    return arr.shape[0] if arr.ndim == 3 else 1


def spike_control(ubar, spike: SpikeSpec, grid: TimeGrid, n_paths: int | None = None) -> np.ndarray:
    """``v`` on the window steps, ``ubar`` elsewhere; ``(P, N, m)``."""
    i0, i1 = spike.window(grid)
    N = grid.n_steps
    P = n_paths if n_paths is not None else max(_n_paths_of(ubar), _n_paths_of(spike.v))
    u = np.array(as_control_process(ubar, P, N), dtype=float)
    v = np.asarray(spike.v, dtype=float)
    if v.ndim == 3:
        u[:, i0:i1] = np.broadcast_to(v, (P, N, u.shape[-1]))[:, i0:i1]
    else:
        u[:, i0:i1] = np.broadcast_to(v.reshape(-1), (u.shape[-1],))
    return u


@dataclass(eq=False)
class VariationBundle:
    rho: float
    x1: PathEnsemble
    x2: PathEnsemble
    xrho: PathEnsemble
    remainder: PathEnsemble
    xbar: PathEnsemble
    u_rho: np.ndarray


def solve_variational(system: GalerkinSystem, coeffs: CoefficientSet, xbar, ubar,
                      spike: SpikeSpec, ensemble: BrownianEnsemble) -> VariationBundle:
    """First- and second-order variations, the spiked state and the remainder.

    Same semi-implicit step as the state (A implicit, the rest explicit):
    ``x1`` has drift ``a_x x1`` and diffusion ``B x1 + b_x x1 + db 1_E``;
    ``x2`` has drift ``a_x x2 + a_xx(x1, x1)/2 + da 1_E`` and diffusion
    ``B x2 + b_x x2 + b_xx(x1, x1)/2 + db_x x1 1_E``.
    """
    coeffs.require("a_x", "b_x", "a_xx", "b_xx")
    grid = ensemble.grid
    P, N, n = ensemble.n_paths, grid.n_steps, system.dim
    X = _values(xbar)
    ub = as_control_process(ubar, P, N)
    ur = spike_control(ub, spike, grid, P)
    ind = spike.indicator(grid)
    nodes = grid.nodes
    zero = np.zeros((P, n))

    def mv(M, x):
        return np.einsum("pij,pj->pi", M, x)

    def quad3(T3, x):
        return np.einsum("pijk,pj,pk->pi", T3, x, x)

    def delta(fn, i):
        return fn(nodes[i], X[:, i], ur[:, i]) - fn(nodes[i], X[:, i], ub[:, i])

    x1 = solve_linear_see(
        system, ensemble, np.zeros(n),
        drift=lambda i, x: mv(coeffs.a_x(nodes[i], X[:, i], ub[:, i]), x),
        diffusion=lambda i, x: mv(coeffs.b_x(nodes[i], X[:, i], ub[:, i]), x)
        + (delta(coeffs.b, i) if ind[i] else zero))
    X1 = x1.values

    def drift2(i, x):
        t, xb, u = nodes[i], X[:, i], ub[:, i]
        out = mv(coeffs.a_x(t, xb, u), x) + 0.5 * quad3(coeffs.a_xx(t, xb, u), X1[:, i])
        return out + delta(coeffs.a, i) if ind[i] else out

    def diff2(i, x):
        t, xb, u = nodes[i], X[:, i], ub[:, i]
        out = mv(coeffs.b_x(t, xb, u), x) + 0.5 * quad3(coeffs.b_xx(t, xb, u), X1[:, i])
        return out + mv(delta(coeffs.b_x, i), X1[:, i]) if ind[i] else out

    x2 = solve_linear_see(system, ensemble, np.zeros(n), drift=drift2, diffusion=diff2)
    xr = solve_see(system, coeffs, ur, ensemble, X[:, 0])
    rem = xr.values - X - X1 - x2.values
    return VariationBundle(float(spike.rho), x1, x2, xr, PathEnsemble(grid, rem),
                           PathEnsemble(grid, X), ur)


def variation_sweep(system: GalerkinSystem, coeffs: CoefficientSet, xbar, ubar, t0: float, v,
                    rho_list, ensemble: BrownianEnsemble) -> list[VariationBundle]:
    return [solve_variational(system, coeffs, xbar, ubar, SpikeSpec(t0, r, v), ensemble)
            for r in rho_list]


def variation_moments(bundle: VariationBundle, alpha_list=(1.0,)) -> dict[str, list[tuple[float, float]]]:
    """``E sup|.|^{2 alpha}`` with standard errors for each tracked quantity."""
    diff = bundle.xrho.values - bundle.xbar.values
    out = {"x1": [moment_estimate(bundle.x1.values, a) for a in alpha_list],
           "x2": [moment_estimate(bundle.x2.values, a) for a in alpha_list],
           "xrho-xbar": [moment_estimate(diff, a) for a in alpha_list],
           "remainder": [moment_estimate(bundle.remainder.values, 1.0)]}
    return out


def _variation_reports(rho, moments, alpha_list, strict) -> dict[str, list[OrderReport]]:
    out: dict[str, list[OrderReport]] = {"x1": [], "x2": [], "xrho-xbar": [], "remainder": []}
    for k, a in enumerate(alpha_list):
        for key, claim in (("x1", a), ("x2", 2 * a), ("xrho-xbar", a)):
            est = [m[key][k] for m in moments]
            out[key].append(order_report(rho, [e[0] for e in est], claim, "O",
                                         [e[1] for e in est], name=f"{key} alpha={a:g}",
                                         strict=strict))
    est = [m["remainder"][0] for m in moments]
    out["remainder"].append(order_report(rho, [e[0] for e in est], 2.0, "o", [e[1] for e in est],
                                         name="remainder alpha=1", strict=strict))
    return out


def verify_variation_orders(bundles: list[VariationBundle], alpha_list=(1.0,),
                            strict: bool = False) -> dict[str, list[OrderReport]]:
    """Reports per alpha: x1 O(rho^a), x2 O(rho^{2a}), x^rho - xbar O(rho^a);
    remainder second moment o(rho^2)."""
    return _variation_reports([b.rho for b in bundles],
                              [variation_moments(b, alpha_list) for b in bundles],
                              alpha_list, strict)


def variation_order_sweep(system: GalerkinSystem, coeffs: CoefficientSet, xbar, ubar, t0: float, v,
                          rho_list, ensemble: BrownianEnsemble, alpha_list=(1.0,),
                          strict: bool = False):
    """Streaming form of ``verify_variation_orders``: one bundle in memory at a time.

    Returns ``(moments per rho, reports)``.
    """
    moments = []
    for r in rho_list:
        b = solve_variational(system, coeffs, xbar, ubar, SpikeSpec(t0, r, v), ensemble)
        moments.append(variation_moments(b, alpha_list))
        del b
    return moments, _variation_reports(list(rho_list), moments, alpha_list, strict)


@dataclass(eq=False)
class AdjointBundle:
    """State, cost pair and adjoints along a reference control."""

    grid: TimeGrid
    xbar: PathEnsemble
    ubar: np.ndarray
    ybar: BsdePair
    first: AdjointFirstOrder
    P: OperatorProcess
    k_y: np.ndarray
    k_z: np.ndarray

    @property
    def p(self) -> np.ndarray:
        return self.first.p

    @property
    def q(self) -> np.ndarray:
        return self.first.q

    def P_at(self, i: int) -> np.ndarray:
        """``(n, n)`` or ``(paths, n, n)``."""
        return self.P.node(i)


def solve_cost(coeffs: CoefficientSet, x_paths, u, ensemble: BrownianEnsemble,
               engine: RegressionEngine) -> BsdePair:
    """Recursive cost ``-dy = k(t, x, y, z, u) dt - z dw``, ``y(T) = h(x(T))``."""
    grid = ensemble.grid
    X = _values(x_paths)
    U = as_control_process(u, ensemble.n_paths, grid.n_steps)

    def gen(t, x, y, z):
        return coeffs.k(t, x, y, z, U[:, grid.index_of(t)])

    lip = coeffs.bound if np.isfinite(coeffs.bound) else 0.0
    return solve_bsde_lsmc(coeffs.h(X[:, -1]), gen, PathEnsemble(grid, X), ensemble, engine,
                           lipschitz_y=lip)


def solve_second_order_adjoint(system: GalerkinSystem, coeffs: CoefficientSet, xbar, ybar: BsdePair,
                               first: AdjointFirstOrder, ubar, ensemble: BrownianEnsemble,
                               engine: RegressionEngine, **bsie_kw) -> tuple[OperatorProcess,
                                                                            np.ndarray, np.ndarray]:
    """Operator adjoint with ``xi = h_xx(xbar(T))`` and generator ``k_y P + G``.

    The flow is that of ``(Abar + k_z Bbar, Bbar)`` with transform parameter
    ``k_z``, where ``Abar = A + a_x`` and ``Bbar = B + b_x``;
    ``G = J' D2k J + <p, a_xx> + k_z <p, b_xx> + <q, b_xx>`` with
    ``J = [I; p'; (Bbar' p + q)']``. Data that turn out identical on every
    path take the deterministic route. Returns ``(P, k_y, k_z)`` with
    ``k_y, k_z`` of shape ``(paths, N+1)``.
    """
    coeffs.require("a_x", "b_x", "a_xx", "b_xx", "h_xx", "k_y", "k_z", "D2k")
    grid = ensemble.grid
    Pn, N, n = ensemble.n_paths, grid.n_steps, system.dim
    X = _values(xbar)
    ub = as_control_process(ubar, Pn, N)
    An, Bn = system.A_nodes(grid), system.B_nodes(grid)
    nodes = grid.nodes
    Abar = np.empty((Pn, N + 1, n, n))
    Bbar = np.empty((Pn, N + 1, n, n))
    G = np.empty((Pn, N + 1, n, n))
    ky = np.empty((Pn, N + 1))
    kz = np.empty((Pn, N + 1))
    eye = np.broadcast_to(np.eye(n), (Pn, n, n))
    for i in range(N + 1):
        s = min(i, N - 1)
        t, x, u = nodes[i], X[:, i], ub[:, s]
        y, z = ybar.y[:, i], ybar.z[:, s]
        p, q = first.p[:, i], first.q[:, s]
        ax = np.broadcast_to(coeffs.a_x(t, x, u), (Pn, n, n))
        bx = np.broadcast_to(coeffs.b_x(t, x, u), (Pn, n, n))
        axx = np.broadcast_to(coeffs.a_xx(t, x, u), (Pn, n, n, n))
        bxx = np.broadcast_to(coeffs.b_xx(t, x, u), (Pn, n, n, n))
        Abar[:, i] = An[i] + ax
        Bbar[:, i] = Bn[i] + bx
        ky[:, i] = np.broadcast_to(coeffs.k_y(t, x, y, z, u), (Pn,))
        kz[:, i] = np.broadcast_to(coeffs.k_z(t, x, y, z, u), (Pn,))
        D2 = np.broadcast_to(coeffs.D2k(t, x, y, z, u), (Pn, n + 2, n + 2))
        w = np.einsum("pji,pj->pi", Bbar[:, i], p) + q
        J = np.concatenate([eye, p[:, None, :], w[:, None, :]], axis=1)
        G[:, i] = (np.einsum("pki,pkl,plj->pij", J, D2, J)
                   + np.einsum("pk,pkij->pij", p, axx)
                   + kz[:, i, None, None] * np.einsum("pk,pkij->pij", p, bxx)
                   + np.einsum("pk,pkij->pij", q, bxx))
    xi = np.broadcast_to(coeffs.h_xx(X[:, N]), (Pn, n, n))

    def same(a):
        return bool(np.all(a == a[:1]))

    Aeff = Abar + kz[:, :, None, None] * Bbar
    if all(same(a) for a in (Aeff, Bbar, G, ky, kz, xi)):
        A0, B0, G0, ky0, kz0 = Aeff[0], Bbar[0], G[0], ky[0], kz[0]
        const = bool(np.all(A0 == A0[:1]) and np.all(B0 == B0[:1]) and np.all(kz0 == kz0[0]))
        sysd = GalerkinSystem(A0[0], B0[0]) if const else GalerkinSystem(A0, B0)
        beta = float(kz0[0]) if const else kz0
        f = (lambda t, Pm: ky0[grid.index_of(t)] * Pm + G0[grid.index_of(t)])
        op = bsie_picard(sysd, xi[0], f, beta, ensemble, engine=engine, **bsie_kw)
    else:
        def f(t, Pm):
            j = grid.index_of(t)
            return ky[:, j, None, None] * Pm + G[:, j]

        op = bsie_picard_pathwise(Aeff[:, :N], Bbar[:, :N], np.ascontiguousarray(xi), f,
                                  kz[:, :N], ensemble, engine=engine, x_paths=PathEnsemble(grid, X),
                                  **bsie_kw)
    return op, ky, kz


def compute_adjoints(system: GalerkinSystem, coeffs: CoefficientSet, xbar, ubar,
                     ensemble: BrownianEnsemble, engine: RegressionEngine, **bsie_kw) -> AdjointBundle:
    grid = ensemble.grid
    X = PathEnsemble(grid, _values(xbar))
    ub = np.ascontiguousarray(as_control_process(ubar, ensemble.n_paths, grid.n_steps))
    yb = solve_cost(coeffs, X, ub, ensemble, engine)
    first = solve_first_order_adjoint(system, coeffs, X, yb, yb, ub, ensemble, engine)
    op, ky, kz = solve_second_order_adjoint(system, coeffs, X, yb, first, ub, ensemble, engine,
                                            **bsie_kw)
    return AdjointBundle(grid, X, ub, yb, first, op, ky[:, :-1], kz[:, :-1])


def _bracket_at(coeffs: CoefficientSet, adj: AdjointBundle, i: int, v: np.ndarray,
                paths=slice(None)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Spike bracket at step i for control values v ``(P, m)``; also ``da`` and ``db``."""
    t = adj.grid.node(i)
    x = adj.xbar.values[paths, i]
    u = adj.ubar[paths, i]
    y, z = adj.ybar.y[paths, i], adj.ybar.z[paths, i]
    p, q = adj.p[paths, i], adj.q[paths, i]
    da = coeffs.a(t, x, v) - coeffs.a(t, x, u)
    db = coeffs.b(t, x, v) - coeffs.b(t, x, u)
    shift = np.sum(p * db, axis=1)
    Pm = adj.P_at(i)
    if Pm.ndim == 3:
        Pm = Pm[paths]
    val = (np.sum(p * da, axis=1) + np.sum(q * db, axis=1)
           + (coeffs.k(t, x, y, z + shift, v) - coeffs.k(t, x, y, z, u))
           + 0.5 * quad_form(Pm, db))
    return val, da, db


def spike_bracket(coeffs: CoefficientSet, adj: AdjointBundle, spike: SpikeSpec) -> np.ndarray:
    """``(P, N)`` array of the spike bracket on the window, zero elsewhere."""
    grid = adj.grid
    P, N = adj.ubar.shape[0], grid.n_steps
    i0, i1 = spike.window(grid)
    ur = spike_control(adj.ubar, spike, grid, P)
    k0 = np.zeros((P, N))
    for i in range(i0, i1):
        k0[:, i] = _bracket_at(coeffs, adj, i, ur[:, i])[0]
    return k0


def solve_hat_bsde(coeffs: CoefficientSet, adj: AdjointBundle, spike: SpikeSpec,
                   ensemble: BrownianEnsemble, engine: RegressionEngine) -> BsdePair:
    """Linear BSDE ``k_y yh + k_z zh + bracket 1_E`` with zero terminal value."""
    k0 = spike_bracket(coeffs, adj, spike)
    return solve_linear_bsde_explicit(k0, adj.k_y, adj.k_z, 0.0, ensemble, engine,
                                      x_paths=adj.xbar)


def duality_value(coeffs: CoefficientSet, adj: AdjointBundle, spike: SpikeSpec,
                  ensemble: BrownianEnsemble) -> tuple[float, float]:
    """``E sum_i lam_i bracket_i dt`` with ``lam = stochastic_exponential(k_z, k_y)``; (value, stderr)."""
    k0 = spike_bracket(coeffs, adj, spike)
    if not np.any(k0):
        return 0.0, 0.0
    lam = stochastic_exponential(adj.k_z, adj.k_y, ensemble).values
    s = np.sum(lam[:, :-1] * k0, axis=1) * ensemble.grid.dt
    return sample_mean_se(s)


def hamiltonian(t: float, x, y, z, v, p, q, coeffs: CoefficientSet, b_ref=None) -> np.ndarray:
    """``<p, a(t,x,v)> + <q, b(t,x,v)> + k(t, x, y, z + <p, b(t,x,v) - b_ref>, v)``.

    ``b_ref`` is the reference diffusion ``b(t, xbar, ubar)``; ``None`` means no z-shift.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    P = x.shape[0]
    v = np.asarray(v, dtype=float)
    v = np.broadcast_to(v.reshape(1, -1) if v.ndim <= 1 else v, (P, max(v.size, 1) if v.ndim <= 1
                                                                 else v.shape[-1]))
    p = np.broadcast_to(np.asarray(p, dtype=float), x.shape)
    q = np.broadcast_to(np.asarray(q, dtype=float), x.shape)
    y = np.broadcast_to(np.asarray(y, dtype=float), (P,))
    z = np.broadcast_to(np.asarray(z, dtype=float), (P,))
    bv = coeffs.b(t, x, v)
    shift = 0.0 if b_ref is None else np.sum(p * (bv - np.broadcast_to(b_ref, bv.shape)), axis=1)
    return np.sum(p * coeffs.a(t, x, v), axis=1) + np.sum(q * bv, axis=1) + \
        coeffs.k(t, x, y, z + shift, v)


@dataclass(eq=False)
class SmpVerdict:
    """``values[i, s, j]``: bracket at step i, sampled path s, lattice point j; ``tol`` alike."""

    values: np.ndarray
    tol: np.ndarray
    minima: np.ndarray
    path_index: np.ndarray
    lattice: np.ndarray
    fraction_ok: float
    at_candidate_max_abs: float
    min_nonnegative: bool
    attained_at_candidate: bool
    worst: dict

    @property
    def passed(self) -> bool:
        return self.min_nonnegative and self.attained_at_candidate

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"


def smp_verdict(coeffs: CoefficientSet, adj: AdjointBundle, lattice, n_sub: int = 256,
                q_fail: float = 0.02, tol_factor: float = 5.0) -> SmpVerdict:
    """Lattice check of ``inf_v {dH(v) + <P db, db>/2} = 0`` at every step on ``n_sub`` paths.

    ``tol`` per sample is ``tol_factor`` standard errors of the bracket,
    propagated from the regression errors of p, q and the standard error of P.
    PASS needs the bracket >= -tol over the whole lattice on a fraction
    >= 1 - q_fail of samples; the candidate's own bracket is 0 by construction
    and must be the lattice minimum up to tol on the same fraction.
    """
    lat = np.asarray(lattice, dtype=float)
    if lat.size == 0:
        raise InvalidArgumentError("empty control lattice")
    lat = lat.reshape(len(lat), -1)
    grid = adj.grid
    N = grid.n_steps
    P = adj.ubar.shape[0]
    S = min(n_sub, P)
    paths = np.arange(S)
    L = len(lat)
    vals = np.empty((N, S, L))
    tol = np.empty((N, S, L))
    p_se, q_se = adj.first.p_se, adj.first.q_se
    Pse = adj.P.stderr
    at_cand = 0.0
    for i in range(N):
        t = grid.node(i)
        cand, _, _ = _bracket_at(coeffs, adj, i, adj.ubar[:S, i], paths)
        at_cand = max(at_cand, float(np.max(np.abs(cand))))
        x, y, z = adj.xbar.values[:S, i], adj.ybar.y[:S, i], adj.ybar.z[:S, i]
        p = adj.p[:S, i]
        ps = np.zeros_like(p) if p_se is None else p_se[i]
        qs = np.zeros_like(p) if q_se is None else q_se[i]
        if Pse is None:
            Ps = 0.0
        else:
            Ps = Pse[:, i] if Pse.ndim == 4 else Pse[i]
        for j in range(L):
            v = np.broadcast_to(lat[j], (S, lat.shape[1]))
            val, da, db = _bracket_at(coeffs, adj, i, v, paths)
            kz = np.broadcast_to(coeffs.k_z(t, x, y, z + np.sum(p * db, axis=1), v), (S,))
            sp = da + kz[:, None] * db
            var = np.sum((sp * ps) ** 2 + (db * qs) ** 2, axis=1)
            if np.ndim(Ps):
                var = var + (0.5 * np.einsum("pi,...ij,pj->p", np.abs(db), Ps, np.abs(db))) ** 2
            vals[i, :, j] = val
            tol[i, :, j] = tol_factor * np.sqrt(var)
    ok = np.all(vals >= -tol, axis=2)
    frac = float(ok.mean())
    mins = vals.min(axis=2)
    # The candidate's bracket is 0, so "attained at the candidate up to tol" is min >= -tol.
    attained = float(np.mean(np.all(vals - 0.0 >= -tol, axis=2)))
    slack = vals + tol
    w = np.unravel_index(int(np.argmin(slack)), slack.shape)
    worst = {"t_index": int(w[0]), "path_index": int(paths[w[1]]), "control_index": int(w[2]),
             "value": float(vals[w]), "tol": float(tol[w])}
    return SmpVerdict(vals, tol, mins, paths, lat, frac, at_cand, frac >= 1.0 - q_fail,
                      at_cand == 0.0 and attained >= 1.0 - q_fail, worst)


def interval_control(values, n_steps: int) -> np.ndarray:
    """Piecewise-constant ``(N, m)`` control from one value per interval (near-equal step counts)."""
    vals = np.asarray(values, dtype=float)
    vals = vals.reshape(len(vals), -1)
    counts = [len(c) for c in np.array_split(np.arange(n_steps), len(vals))]
    return np.repeat(vals, counts, axis=0)


def brute_force_optimal(system: GalerkinSystem, coeffs: CoefficientSet, lattice, n_intervals: int,
                        ensemble: BrownianEnsemble, x0, engine: RegressionEngine,
                        cap: int = 4096) -> tuple[np.ndarray, list[tuple[tuple[int, ...], float]]]:
    """Exhaustive search over piecewise-constant controls with common random numbers.

    Returns the minimising ``(N, m)`` control (first in lexicographic order
    among exact ties) and the table ``[(lattice indices, J)]`` in that order.
    """
    lat = np.asarray(lattice, dtype=float)
    if lat.size == 0:
        raise InvalidArgumentError("empty control lattice")
    lat = lat.reshape(len(lat), -1)
    total = len(lat) ** int(n_intervals)
    if total > cap:
        raise ConfigurationError(f"{total} controls exceed the enumeration cap {cap}")
    grid = ensemble.grid
    table: list[tuple[tuple[int, ...], float]] = []
    best, best_j = None, np.inf
    for idx in itertools.product(range(len(lat)), repeat=int(n_intervals)):
        u = interval_control(lat[list(idx)], grid.n_steps)
        x = solve_see(system, coeffs, u, ensemble, x0)
        J = float(np.mean(solve_cost(coeffs, x, u, ensemble, engine).y[:, 0]))
        table.append((idx, J))
        if J < best_j:
            best, best_j = u, J
    return best, table


@dataclass(eq=False)
class HatResult:
    rho: float
    yhat: BsdePair
    sup_yhat: float
    sup_yhat_se: float
    duality: float
    duality_se: float
    diff_sup: float
    diff_sup_se: float


def _sup_abs_mean(arr: np.ndarray) -> tuple[float, float]:
    stats = [sample_mean_se(np.abs(arr[:, i])) for i in range(arr.shape[1])]
    j = int(np.argmax([s[0] for s in stats]))
    return stats[j]


def hat_analysis(system: GalerkinSystem, coeffs: CoefficientSet, adj: AdjointBundle,
                 spike: SpikeSpec, ensemble: BrownianEnsemble,
                 engine: RegressionEngine) -> HatResult:
    """``yhat``, the duality value and ``sup_t E|yhat^rho - yhat|``.

    ``yhat^rho = y^rho - ybar - <p, x1 + x2> - <P x1, x1>/2`` with ``y^rho``
    the cost process along the spiked control.
    """
    yh = solve_hat_bsde(coeffs, adj, spike, ensemble, engine)
    dv, dse = duality_value(coeffs, adj, spike, ensemble)
    vb = solve_variational(system, coeffs, adj.xbar, adj.ubar, spike, ensemble)
    yr = solve_cost(coeffs, vb.xrho, vb.u_rho, ensemble, engine)
    X1, X2 = vb.x1.values, vb.x2.values
    N = ensemble.grid.n_steps
    quad = np.stack([quad_form(adj.P_at(i), X1[:, i]) for i in range(N + 1)], axis=1)
    yhr = yr.y - adj.ybar.y - np.sum(adj.p * (X1 + X2), axis=2) - 0.5 * quad
    s, sse = _sup_abs_mean(yh.y)
    d, dse2 = _sup_abs_mean(yhr - yh.y)
    return HatResult(float(spike.rho), yh, s, sse, dv, dse, d, dse2)


def hat_order_sweep(system: GalerkinSystem, coeffs: CoefficientSet, adj: AdjointBundle, t0: float,
                    v, rho_list, ensemble: BrownianEnsemble, engine: RegressionEngine
                    ) -> tuple[list[HatResult], OrderReport, OrderReport]:
    res = [hat_analysis(system, coeffs, adj, SpikeSpec(t0, r, v), ensemble, engine)
           for r in rho_list]
    r1 = order_report(rho_list, [h.sup_yhat for h in res], 1.0, "O", [h.sup_yhat_se for h in res],
                      name="sup_t E|yhat|")
    r2 = order_report(rho_list, [h.diff_sup for h in res], 1.0, "o", [h.diff_sup_se for h in res],
                      name="sup_t E|yhat^rho - yhat|")
    return res, r1, r2
