"""Experiment runner: ``seesmp run <config> [--seed N] [--paths N] [--out DIR] [--threads N] [--strict]``.

Configs are INI files (one ``[run]`` section, an optional ``[system]`` and
``[family]`` section, and one section named after the experiment) or JSON
objects with the same nesting. INI values are read as JSON when they parse
(numbers, lists, booleans) and as plain strings otherwise.

Exit status: 0 all verdicts pass, 1 some verdict fails, 2 configuration
error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import os
import sys
import time
import warnings
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import kernels
from .bsde import RegressionEngine
from .bsie import bsie_picard, matrix_bsde_backward
from .core import (GalerkinSystem, OrderReport, SpikeSpec, build_time_grid, sample_brownian,
                   validate_assumptions)
from .errors import (ConfigurationError, DroppedDataWarning, InsufficientDataError,
                     InvalidArgumentError, NumericalError, RankDeficiencyWarning)
from .forward import check_transform_identity, sample_mean_se, solve_linear_see, solve_see
from .ito import ito_order_sweep, shift_order_sweep
from .orders import order_report
from .models import (control_family, default_spde_system, piecewise_constant, riccati_gains,
                     scalar_nonlinear_family, scalar_system, simulate_feedback)
from .smp import (brute_force_optimal, compute_adjoints, hat_analysis, hat_order_sweep,
                  smp_verdict, variation_order_sweep)

EXPERIMENTS: dict[str, Callable[["Context"], "Result"]] = {}

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3


# ---------------------------------------------------------------- config

def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except (json.JSONDecodeError, ValueError):
        return raw.strip()


def load_config(path: str) -> dict[str, dict[str, Any]]:
    """Sections as nested dicts; JSON when the file starts with ``{``, INI otherwise."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path!r}: {exc}") from exc
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"invalid JSON config: {exc}") from exc
        if not all(isinstance(v, dict) for v in data.values()):
            raise ConfigurationError("every top-level JSON value must be an object (a section)")
        return {k: dict(v) for k, v in data.items()}
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=path)
    except configparser.Error as exc:
        raise ConfigurationError(f"invalid config: {exc}") from exc
    return {s: {k: _parse_value(v) for k, v in parser.items(s)} for s in parser.sections()}


class Section:
    """Typed access to one config section; unread keys are reported by ``finish``."""

    def __init__(self, name: str, data: dict[str, Any] | None):
        self.name = name
        self.data = dict(data or {})
        self.used: set[str] = set()

    def _get(self, key: str, default: Any) -> Any:
        self.used.add(key)
        if key in self.data:
            return self.data[key]
        if default is _REQUIRED:
            raise ConfigurationError(f"[{self.name}] missing required key {key!r}")
        return default

    def _fail(self, key: str, what: str, value: Any) -> ConfigurationError:
        return ConfigurationError(f"[{self.name}] {key} must be {what}, got {value!r}")

    def float(self, key: str, default: Any = None) -> float:
        v = self._get(key, default)
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise self._fail(key, "a finite number", v)
        return float(v)

    def int(self, key: str, default: Any = None, minimum: int = 1) -> int:
        v = self._get(key, default)
        if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
            raise self._fail(key, f"an integer >= {minimum}", v)
        return int(v)

    def bool(self, key: str, default: Any = None) -> bool:
        v = self._get(key, default)
        if not isinstance(v, bool):
            raise self._fail(key, "true or false", v)
        return v

    def str(self, key: str, default: Any = None, choices=None) -> str:
        v = self._get(key, default)
        if not isinstance(v, str) or (choices is not None and v not in choices):
            raise self._fail(key, f"one of {sorted(choices)}" if choices else "a string", v)
        return v

    def array(self, key: str, default: Any = None, ndim: int | None = None) -> np.ndarray:
        v = self._get(key, default)
        try:
            arr = np.asarray(v, dtype=float)
        except (TypeError, ValueError):
            raise self._fail(key, "numeric", v) from None
        if (ndim is not None and arr.ndim != ndim) or not np.isfinite(arr).all():
            raise self._fail(key, f"a finite {ndim}-d numeric array", v)
        return arr

    def matrix(self, key: str, n: int, default: Any = None) -> np.ndarray:
        """A scalar means that multiple of the identity."""
        arr = self.array(key, default)
        if arr.ndim == 0:
            return float(arr) * np.eye(n)
        if arr.shape != (n, n):
            raise self._fail(key, f"a scalar or an {n}x{n} matrix", arr.tolist())
        return arr

    def vector(self, key: str, n: int, default: Any = None) -> np.ndarray:
        arr = self.array(key, default)
        if arr.ndim == 0:
            return np.full(n, float(arr))
        if arr.shape != (n,):
            raise self._fail(key, f"a scalar or a length-{n} list", arr.tolist())
        return arr

    def finish(self) -> None:
        extra = sorted(set(self.data) - self.used)
        if extra:
            raise ConfigurationError(f"[{self.name}] unknown keys: {', '.join(extra)}")


_REQUIRED = object()


def build_system(sec: Section) -> GalerkinSystem:
    kind = sec.str("kind", "scalar", {"scalar", "matrix", "zero", "spde"})
    if kind == "scalar":
        return scalar_system(sec.float("a", -0.5), sec.float("b", 0.5))
    if kind == "zero":
        n = sec.int("dim", 1)
        return GalerkinSystem(np.zeros((n, n)), np.zeros((n, n)))
    if kind == "matrix":
        A = sec.array("A", _REQUIRED, ndim=2)
        n = A.shape[0]
        if A.shape != (n, n):
            raise ConfigurationError("[system] A must be square")
        return GalerkinSystem(A, sec.matrix("B", n, 0.0))
    return default_spde_system(sec.int("n_space", 2), sec.float("alpha", 0.05),
                               sec.float("beta", 0.3), sec.float("kappa", 0.01))


@dataclass
class Family:
    coeffs: Any
    params: dict[str, Any]


def build_family(sec: Section, n: int, T: float) -> Family:
    kind = sec.str("kind", "control", {"control", "scalar-nonlinear"})
    ky, kz = sec.float("kappa_y", 0.0), sec.float("kappa_z", 0.0)
    U = sec.array("U", None) if "U" in sec.data else None
    if kind == "scalar-nonlinear":
        if n != 1:
            raise ConfigurationError("the scalar-nonlinear family needs a 1-d system")
        sec.used.add("U")
        return Family(scalar_nonlinear_family(ky, kz, U), {"kind": kind})
    p = {"kind": kind, "c1": sec.float("c1", 0.5), "c2": sec.float("c2", 0.3),
         "Q": sec.matrix("Q", n, 0.5), "r": sec.float("r", 0.1), "H": sec.matrix("H", n, 1.0),
         "h1": sec.vector("h1", n, 0.0), "kappa_y": ky, "kappa_z": kz,
         "gamma": sec.array("gamma", 0.0)}
    sec.used.add("U")
    g = np.atleast_1d(p["gamma"])
    if g.ndim != 1:
        raise ConfigurationError("[family] gamma must be a number or a list")
    gamma = piecewise_constant(g, T)
    coeffs = control_family(n, p["c1"], p["c2"], p["Q"], p["r"], p["H"], p["h1"], ky, kz,
                            gamma=gamma, U=U)
    p["gamma_values"] = g
    return Family(coeffs, p)


def rho_list_of(sec: Section, grid, t0: float, default_max: float, default_n: int = 5) -> list[float]:
    """Explicit ``rho_list`` or ``rho_max * 2^-j``; strictly decreasing and on the grid."""
    if "rho_list" in sec.data:
        rho = [float(r) for r in sec.array("rho_list", ndim=1)]
    else:
        rmax = sec.float("rho_max", default_max)
        k = sec.int("n_rho", default_n, minimum=3)
        rho = [rmax / 2 ** j for j in range(k)]
    if len(rho) < 3 or any(r <= 0 for r in rho) or any(a <= b for a, b in zip(rho, rho[1:])):
        raise ConfigurationError(f"rho_list must be >= 3 positive strictly decreasing values: {rho}")
    for r in rho:
        try:
            SpikeSpec(t0, r).window(grid)
        except InvalidArgumentError as exc:
            raise ConfigurationError(f"rho = {r!r} with t0 = {t0!r} is not grid aligned: {exc}") from exc
    return rho


# ---------------------------------------------------------------- results

@dataclass
class Result:
    columns: list[str]
    rows: list[list[Any]]
    measurements: list[dict[str, Any]] = field(default_factory=list)
    verdicts: list[dict[str, Any]] = field(default_factory=list)


@dataclass
class Context:
    run: Section
    system_sec: Section
    family_sec: Section
    params: Section
    seed: int
    n_paths: int
    T: float
    n_steps: int

    @property
    def grid(self):
        return build_time_grid(self.T, self.n_steps)

    def ensemble(self, grid=None, n_paths: int | None = None, seed: int | None = None):
        return sample_brownian(grid or self.grid, n_paths or self.n_paths,
                               self.seed if seed is None else seed)

    def system(self) -> GalerkinSystem:
        return build_system(self.system_sec)

    def engine(self) -> RegressionEngine:
        return RegressionEngine(self.params.int("regression_degree", 2, minimum=0))


def _num(x: Any) -> Any:
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.ndarray):
        return [_num(v) for v in x.tolist()] if x.ndim else _num(x.item())
    if isinstance(x, (list, tuple)):
        return [_num(v) for v in x]
    if isinstance(x, dict):
        return {k: _num(v) for k, v in x.items()}
    return x


def order_verdict(rep: OrderReport) -> dict[str, Any]:
    if rep.kind == "O":
        claim = f"slope within {rep.claimed_order} +/- {rep.slope_tolerance}"
    else:
        claim = f"slope >= {rep.claimed_order + rep.margin}"
    return {"name": rep.name, "type": "order", "kind": rep.kind, "claimed_order": rep.claimed_order,
            "criterion": claim + f", R^2 >= {rep.r2_min}", "slope": _num(rep.fitted_slope),
            "r_squared": _num(rep.r_squared), "verdict": rep.verdict, "passed": rep.passed}


def check_verdict(name: str, passed: bool, **detail) -> dict[str, Any]:
    return {"name": name, "type": "check", "verdict": "pass" if passed else "fail",
            "passed": bool(passed), **_num(detail)}


def order_rows(quantity: str | None, rep: OrderReport, stderr=None) -> list[list[Any]]:
    se = rep.stderr_list if stderr is None else stderr
    se = np.zeros(len(rep.rho_list)) if se is None else np.asarray(se, dtype=float)
    head = [] if quantity is None else [quantity]
    return [head + [r, e, s] for r, e, s in zip(rep.rho_list, rep.error_list, se)]


def experiment(name: str):
    def deco(fn):
        EXPERIMENTS[name] = fn
        return fn
    return deco


# ---------------------------------------------------------------- experiments

@experiment("see-orders")
def _see_orders(ctx: Context) -> Result:
    """Strong error of the forward scheme and the exponential-transform identity against dt."""
    sysm = ctx.system()
    n = sysm.dim
    p = ctx.params
    mu1, mu2 = p.float("mu1", 0.3), p.float("mu2", 0.1)
    steps = [int(s) for s in p.array("n_steps_list", [64, 128, 256], ndim=1)]
    if len(steps) < 3 or any(s <= 0 or s != int(s) for s in steps) or sorted(set(steps)) != steps:
        raise ConfigurationError("n_steps_list must be >= 3 increasing positive integers")
    factor = p.int("reference_factor", 4)
    scheme = p.str("scheme", "milstein", {"euler", "milstein"})
    x0 = p.vector("x0", n, 1.0)
    fine_n = steps[-1] * factor
    if any(fine_n % s for s in steps):
        raise ConfigurationError("every n_steps must divide the reference step count")
    fine = ctx.ensemble(build_time_grid(ctx.T, fine_n))
    ref = solve_linear_see(sysm, fine, x0).values
    dts, strong, strong_se, ident = [], [], [], []
    for s in steps:
        k = fine_n // s
        coarse = fine.coarsen(k)
        x = solve_linear_see(sysm, coarse, x0).values
        d = x - ref[:, ::k]
        m, se = sample_mean_se(np.max(np.sum(d * d, axis=2), axis=1))
        dts.append(ctx.T / s)
        strong.append(m)
        strong_se.append(se)
        ident.append(check_transform_identity(sysm, mu1, mu2, coarse, scheme=scheme))
    # rho here is dt, listed in decreasing order.
    order = np.argsort(dts)[::-1]
    dts = [dts[i] for i in order]
    r1 = _order(dts, [strong[i] for i in order], 1.0, "O", [strong_se[i] for i in order],
                "E[sup_t |x_dt - x_ref|^2]")
    r2 = _order(dts, [ident[i] for i in order], 0.5, "o", None, "transform identity error")
    rows = order_rows("strong_error", r1) + order_rows("transform_identity", r2)
    return Result(["quantity", "rho", "estimate", "stderr"], rows,
                  [{"quantity": "reference_n_steps", "value": fine_n}],
                  [order_verdict(r1), order_verdict(r2)])


def _order(rho, err, claimed, kind, se, name) -> OrderReport:
    return order_report(rho, err, claimed, kind, se, name=name)


@experiment("bsie-equivalence")
def _bsie_equivalence(ctx: Context) -> Result:
    """Picard BSIE against the backward matrix BSDE on a refined grid; closed form when scalar."""
    sysm = ctx.system()
    n = sysm.dim
    p = ctx.params
    xi = p.matrix("xi", n, 1.0)
    c = p.float("f_scale", 0.0)
    beta = p.float("beta", 0.0)
    refine = p.int("refine", 4)
    tol = p.float("tolerance", 1e-2)
    f = None if c == 0.0 else (lambda t, P, c=c: c * P)
    grid = ctx.grid
    op = bsie_picard(sysm, xi, f, beta, ctx.ensemble())
    mb = matrix_bsde_backward(sysm, xi, f, beta, ctx.ensemble(grid.refine(refine), 1))
    ref = mb.P[::refine]
    rel = np.linalg.norm(op.P - ref, axis=(1, 2)) / np.maximum(np.linalg.norm(ref, axis=(1, 2)),
                                                                1e-300)
    rows = [[i, t, e] for i, (t, e) in enumerate(zip(grid.nodes, rel))]
    verdicts = [check_verdict("max Frobenius relative error", bool(rel.max() <= tol),
                              value=rel.max(), tolerance=tol)]
    meas: list[dict[str, Any]] = [{"quantity": "picard_iterations", "value": op.iterations},
                                  {"quantity": "mode", "value": op.mode}]
    closed = (n == 1 and c == 0.0 and beta == 0.0 and sysm.is_constant()
              and float(xi[0, 0]) == 1.0)
    if p.bool("closed_form", closed):
        if not closed:
            raise ConfigurationError("closed_form needs a constant scalar system, xi = 1, f = 0, beta = 0")
        a, b = float(np.asarray(sysm.A)[0, 0]), float(np.asarray(sysm.B)[0, 0])
        lam = 2 * a + b * b
        exact = np.exp(lam * (ctx.T - grid.nodes))
        se = op.stderr[:, 0, 0] if op.stderr is not None else np.zeros_like(exact)
        gap = np.abs(op.P[:, 0, 0] - exact)
        bound = 3 * se + 2 * grid.dt * abs(lam) * exact
        meas += [{"quantity": "closed_form", "t_index": i, "gap": g, "bound": bd}
                 for i, (g, bd) in enumerate(zip(gap, bound))]
        verdicts.append(check_verdict("closed-form adjoint", bool(np.all(gap <= bound)),
                                      worst_ratio=float(np.max(gap / np.maximum(bound, 1e-300)))))
    return Result(["t_index", "t", "frobenius_rel_error"], rows, meas, verdicts)


@experiment("ito-orders")
def _ito_orders(ctx: Context) -> Result:
    """Weak Ito residual sigma (o(rho)) and martingale part Z (O(rho)) over a rho sweep."""
    sysm = ctx.system()
    n = sysm.dim
    p = ctx.params
    t0 = p.float("t0", 0.5)
    grid = ctx.grid
    rho = rho_list_of(p, grid, t0, ctx.T - t0)
    beta = p.float("beta", 0.0)
    c = p.float("f_scale", -0.3)
    zeta = p.vector("zeta", n, 1.0)
    xi = p.matrix("xi", n, 1.0)
    p_paths = p.int("p_paths", 100000)
    p_seed = p.int("p_seed", 99, minimum=0)
    f = None if c == 0.0 else (lambda t, P, c=c: c * P)
    if not sysm.is_constant():
        raise ConfigurationError("ito-orders needs constant A and B")
    shifted = GalerkinSystem(np.asarray(sysm.A) + beta * np.asarray(sysm.B), sysm.B)
    P = bsie_picard(shifted, xi, f, beta, ctx.ensemble(n_paths=p_paths, seed=p_seed))
    _, sig, zr = ito_order_sweep(P, sysm, zeta, beta, t0, rho, ctx.ensemble(), ctx.engine(), f=f)
    rows = order_rows("sup_E_abs_sigma", sig) + order_rows("E_Z_norm", zr)
    return Result(["quantity", "rho", "estimate", "stderr"], rows,
                  [{"quantity": "P0", "value": np.asarray(P.P[0])}],
                  [order_verdict(sig), order_verdict(zr)])


@experiment("shift-orders")
def _shift_orders(ctx: Context) -> Result:
    """Moving the spike from the diffusion: E[sup |y - sqrt(rho) z|^2] = O(rho^2)."""
    sysm = ctx.system()
    p = ctx.params
    t0 = p.float("t0", 0.25)
    rho = rho_list_of(p, ctx.grid, t0, 0.5)
    zeta0 = p.vector("zeta0", sysm.dim, 1.0)
    _, rep = shift_order_sweep(sysm, zeta0, t0, rho, ctx.ensemble())
    return Result(["rho", "estimate", "stderr"], order_rows(None, rep), [], [order_verdict(rep)])


@experiment("variation-orders")
def _variation_orders(ctx: Context) -> Result:
    """Moments of x1, x2, x^rho - xbar and the remainder against rho."""
    sysm = ctx.system()
    n = sysm.dim
    fam = build_family(ctx.family_sec, n, ctx.T)
    p = ctx.params
    t0 = p.float("t0", 0.25)
    rho = rho_list_of(p, ctx.grid, t0, 0.125)
    x0 = p.vector("x0", n, 1.0)
    ubar, v = p.float("ubar", 0.0), p.float("v", 1.0)
    alphas = [float(a) for a in np.atleast_1d(p.array("alpha_list", [1.0]))]
    ens = ctx.ensemble()
    xbar = solve_see(sysm, fam.coeffs, ubar, ens, x0)
    moments, reps = variation_order_sweep(sysm, fam.coeffs, xbar, ubar, t0, v, rho, ens, alphas)
    rows, verdicts = [], []
    for name, lst in reps.items():
        for a, rep in zip(alphas, lst):
            rows += [[name, a] + r for r in order_rows(None, rep)]
            verdicts.append(order_verdict(rep))
    return Result(["quantity", "alpha", "rho", "estimate", "stderr"], rows, [], verdicts)


@experiment("hat-orders")
def _hat_orders(ctx: Context) -> Result:
    """Second-order expansion of the cost: yhat = O(rho), duality, yhat^rho - yhat = o(rho)."""
    sysm = ctx.system()
    n = sysm.dim
    fam = build_family(ctx.family_sec, n, ctx.T)
    p = ctx.params
    t0 = p.float("t0", 0.25)
    grid = ctx.grid
    rho = rho_list_of(p, grid, t0, 0.125)
    x0 = p.vector("x0", n, 0.0)
    ubar, v = p.float("ubar", 0.0), p.float("v", 1.0)
    C = p.float("dt_constant", 1.0)
    ens, eng = ctx.ensemble(), ctx.engine()
    xbar = solve_see(sysm, fam.coeffs, ubar, ens, x0)
    adj = compute_adjoints(sysm, fam.coeffs, xbar, ubar, ens, eng)
    res, r1, r2 = hat_order_sweep(sysm, fam.coeffs, adj, t0, v, rho, ens, eng)
    rows = order_rows("sup_E_abs_yhat", r1) + order_rows("sup_E_abs_yhat_rho_minus_yhat", r2)
    verdicts = [order_verdict(r1), order_verdict(r2)]
    gaps = []
    for h in res:
        y0, y0se = sample_mean_se(h.yhat.y[:, 0])
        rows.append(["duality_value", h.rho, h.duality, h.duality_se])
        rows.append(["yhat0", h.rho, y0, y0se])
        gap = abs(h.duality - y0)
        bound = 3 * math.hypot(h.duality_se, y0se) + C * grid.dt
        gaps.append({"rho": h.rho, "gap": gap, "bound": bound})
    verdicts.append(check_verdict("duality = yhat(0)", all(g["gap"] <= g["bound"] for g in gaps),
                                  per_rho=gaps))
    return Result(["quantity", "rho", "estimate", "stderr"], rows, [], verdicts)


def _candidate(ctx: Context, sysm, fam: Family, lattice, ens, x0, eng):
    """Reference control per the ``candidate`` key; returns (u, measurements)."""
    p = ctx.params
    kind = p.str("candidate", "brute-force", {"brute-force", "brute-force-flipped", "riccati"})
    meas: list[dict[str, Any]] = []
    if kind == "riccati":
        fp = fam.params
        if fam.params["kind"] != "control" or np.any(fp["h1"] != 0) or np.any(fp["gamma_values"] != 0):
            raise ConfigurationError("the riccati candidate needs the control family with h1 = 0, gamma = 0")
        _, gains = riccati_gains(sysm, fp["c1"], fp["c2"], fp["Q"], fp["r"], fp["H"], ens.grid,
                                 fp["kappa_y"], fp["kappa_z"])
        _, u = simulate_feedback(sysm, fam.coeffs, gains, ens, x0, float(lattice.min()),
                                 float(lattice.max()))
        meas.append({"quantity": "candidate_max_abs", "value": float(np.abs(u).max())})
        return u, meas
    n_int = p.int("n_intervals", 3)
    u, table = brute_force_optimal(sysm, fam.coeffs, lattice, n_int, ens, x0, eng)
    meas += [{"quantity": "enumerated_cost", "controls": [float(lattice[j]) for j in idx], "J": J}
             for idx, J in table]
    if kind == "brute-force-flipped":
        u = -u
    return u, meas


def _verdict_rows(vd, mode: str) -> list[list[Any]]:
    N, S, L = vd.values.shape
    rows = []
    if mode == "all":
        for i in range(N):
            for s in range(S):
                for j in range(L):
                    rows.append([i, int(vd.path_index[s]), j, vd.values[i, s, j]])
    else:
        arg = np.argmin(vd.values, axis=2)
        for i in range(N):
            for s in range(S):
                rows.append([i, int(vd.path_index[s]), int(arg[i, s]), vd.values[i, s, arg[i, s]]])
    return rows


def _verdict_summary(vd, q_fail: float) -> dict[str, Any]:
    return check_verdict("maximum principle", vd.passed, fraction_ok=vd.fraction_ok,
                         required_fraction=1.0 - q_fail,
                         candidate_bracket_max_abs=vd.at_candidate_max_abs,
                         min_nonnegative=vd.min_nonnegative,
                         attained_at_candidate=vd.attained_at_candidate, worst=vd.worst)


@experiment("smp-verdict")
def _smp_verdict(ctx: Context) -> Result:
    """Lattice check of the maximum-principle inequality along a candidate control."""
    sysm = ctx.system()
    n = sysm.dim
    fam = build_family(ctx.family_sec, n, ctx.T)
    p = ctx.params
    U = fam.coeffs.U
    lattice = p.array("lattice", None if U is None else U.ravel().tolist())
    if lattice.ndim != 1 or lattice.size == 0:
        raise ConfigurationError("[smp-verdict] lattice must be a non-empty list (or set [family] U)")
    x0 = p.vector("x0", n, [0.5, 0.25][:n] if n <= 2 else 0.5)
    n_sub = p.int("n_sub", 256)
    q_fail = p.float("q_fail", 0.02)
    tol_factor = p.float("tol_factor", 5.0)
    mode = p.str("csv_rows", "minima", {"minima", "all"})
    ens, eng = ctx.ensemble(), ctx.engine()
    u, meas = _candidate(ctx, sysm, fam, lattice, ens, x0, eng)
    xbar = solve_see(sysm, fam.coeffs, u, ens, x0)
    adj = compute_adjoints(sysm, fam.coeffs, xbar, u, ens, eng)
    vd = smp_verdict(fam.coeffs, adj, lattice, n_sub=n_sub, q_fail=q_fail, tol_factor=tol_factor)
    return Result(["t_index", "path_index", "control_index", "expression_value"],
                  _verdict_rows(vd, mode), meas, [_verdict_summary(vd, q_fail)])


@experiment("full-pipeline")
def _full_pipeline(ctx: Context) -> Result:
    """Assumption probes, candidate, adjoints, maximum-principle verdict and one duality check."""
    sysm = ctx.system()
    n = sysm.dim
    fam = build_family(ctx.family_sec, n, ctx.T)
    p = ctx.params
    U = fam.coeffs.U
    lattice = p.array("lattice", None if U is None else U.ravel().tolist())
    if lattice.ndim != 1 or lattice.size == 0:
        raise ConfigurationError("[full-pipeline] lattice must be a non-empty list (or set [family] U)")
    x0 = p.vector("x0", n, [0.5, 0.25][:n] if n <= 2 else 0.5)
    t0, rho, v = p.float("t0", 0.25), p.float("rho", 0.125), p.float("v", float(lattice[0]))
    rho_list_of(Section("check", {"rho_list": [rho, rho / 2, rho / 4]}), ctx.grid, t0, rho)
    q_fail = p.float("q_fail", 0.02)
    C = p.float("dt_constant", 1.0)
    grid = ctx.grid
    ens, eng = ctx.ensemble(), ctx.engine()
    rows: list[list[Any]] = []
    verdicts = []
    rep = validate_assumptions(sysm, fam.coeffs, grid=grid, seed=ctx.seed)
    for name, chk in rep.checks.items():
        rows.append(["assumptions", name, chk.worst_value, 0.0])
    verdicts.append(check_verdict("assumption probes", rep.passed,
                                  failed=[k for k, c in rep.checks.items() if not c.passed]))
    u, meas = _candidate(ctx, sysm, fam, lattice, ens, x0, eng)
    for m in meas:
        if "J" in m:
            rows.append(["enumeration", "J(" + " ".join(f"{c:g}" for c in m["controls"]) + ")",
                         m["J"], 0.0])
    xbar = solve_see(sysm, fam.coeffs, u, ens, x0)
    adj = compute_adjoints(sysm, fam.coeffs, xbar, u, ens, eng)
    y0, y0se = sample_mean_se(adj.ybar.y[:, 0])
    rows.append(["cost", "J(candidate)", y0, y0se])
    vd = smp_verdict(fam.coeffs, adj, lattice, n_sub=p.int("n_sub", 256), q_fail=q_fail,
                     tol_factor=p.float("tol_factor", 5.0))
    rows.append(["verdict", "fraction_ok", vd.fraction_ok, 0.0])
    verdicts.append(_verdict_summary(vd, q_fail))
    h = hat_analysis(sysm, fam.coeffs, adj, SpikeSpec(t0, rho, v), ens, eng)
    hy0, hy0se = sample_mean_se(h.yhat.y[:, 0])
    rows += [["expansion", "duality_value", h.duality, h.duality_se],
             ["expansion", "yhat0", hy0, hy0se],
             ["expansion", "sup_E_abs_yhat_rho_minus_yhat", h.diff_sup, h.diff_sup_se]]
    bound = 3 * math.hypot(h.duality_se, hy0se) + C * grid.dt
    verdicts.append(check_verdict("duality = yhat(0)", abs(h.duality - hy0) <= bound,
                                  gap=abs(h.duality - hy0), bound=bound))
    return Result(["stage", "quantity", "value", "stderr"], rows, meas, verdicts)


# ---------------------------------------------------------------- output

def format_cell(x: Any) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_csv(path: str, columns: list[str], rows: list[list[Any]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([format_cell(c) for c in r])


WATCHED = (RankDeficiencyWarning, DroppedDataWarning)


def run(config_path: str, seed: int | None = None, paths: int | None = None,
        out: str | None = None, threads: int | None = None, strict: bool = False,
        stream=sys.stderr) -> int:
    """Execute one experiment config and write ``<name>.csv`` and ``<name>.json``; return the exit status."""
    start = time.perf_counter()
    try:
        cfg = load_config(config_path)
        run_sec = Section("run", cfg.get("run"))
        name = run_sec.str("experiment", _REQUIRED)
        if name not in EXPERIMENTS:
            raise ConfigurationError(f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}")
        ctx = Context(run_sec, Section("system", cfg.get("system")),
                      Section("family", cfg.get("family")), Section(name, cfg.get(name)),
                      seed if seed is not None else run_sec.int("seed", 1, minimum=0),
                      paths if paths is not None else run_sec.int("n_paths", 2000),
                      run_sec.float("T", 1.0), run_sec.int("n_steps", 256))
        if seed is not None:
            run_sec.used.add("seed")
        if paths is not None:
            run_sec.used.add("n_paths")
        if ctx.seed < 0 or ctx.n_paths < 1 or ctx.T <= 0:
            raise ConfigurationError("seed must be >= 0, n_paths >= 1 and T > 0")
        thr = threads if threads is not None else run_sec.int("threads", 1)
        csv_name = run_sec.str("csv", f"{name}.csv")
        json_name = run_sec.str("report", f"{name}.json")
        unknown = sorted(set(cfg) - {"run", "system", "family", name})
        if unknown:
            raise ConfigurationError(f"unknown sections: {', '.join(unknown)}")
        out_dir = run_sec.str("out", ".")
        out_dir = out if out is not None else out_dir
        kernels.set_threads(thr)
    except (ConfigurationError, InvalidArgumentError) as exc:
        print(f"config error: {exc}", file=stream)
        return EXIT_CONFIG

    report: dict[str, Any] = {"experiment": name, "config-echo": cfg, "seed": ctx.seed,
                              "measurements": [], "verdicts": [], "runtime_seconds": 0.0}
    status = EXIT_PASS
    result: Result | None = None
    caught: list[warnings.WarningMessage] = []
    try:
        os.makedirs(out_dir, exist_ok=True)
        with warnings.catch_warnings(record=True) as caught, np.errstate(over="ignore"):
            warnings.simplefilter("always")
            result = EXPERIMENTS[name](ctx)
        for sec in (ctx.run, ctx.system_sec, ctx.family_sec, ctx.params):
            if sec.data:
                sec.finish()
    except (ConfigurationError, InvalidArgumentError) as exc:
        print(f"config error: {exc}", file=stream)
        report["error"] = {"type": type(exc).__name__, "message": str(exc)}
        status = EXIT_CONFIG
    except (NumericalError, InsufficientDataError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {type(exc).__name__}: {exc}", file=stream)
        report["error"] = {"type": type(exc).__name__, "message": str(exc),
                           **{k: _num(v) for k, v in vars(exc).items() if not k.startswith("_")}}
        status = EXIT_NUMERICAL
    finally:
        kernels.set_threads(1)

    watched = [w for w in caught if issubclass(w.category, WATCHED)]
    report["warnings"] = [f"{w.category.__name__}: {w.message}" for w in watched]
    if result is not None and status == EXIT_PASS:
        verdicts = list(result.verdicts)
        if strict and watched:
            verdicts.append(check_verdict("strict: no rank-deficiency or dropped-pair warnings",
                                          False, count=len(watched)))
        report["measurements"] = [dict(zip(result.columns, [_num(c) for c in r]))
                                  for r in result.rows] + _num(result.measurements)
        report["verdicts"] = verdicts
        report["csv_columns"] = result.columns
        report["csv"] = csv_name
        write_csv(os.path.join(out_dir, csv_name), result.columns, result.rows)
        status = EXIT_PASS if all(v["passed"] for v in verdicts) else EXIT_FAIL
        for v in verdicts:
            print(f"{v['verdict'].upper():10s} {v['name']}", file=stream)
    report["status"] = status
    report["backend"] = kernels.BACKEND
    report["threads"] = thr
    report["runtime_seconds"] = time.perf_counter() - start
    with open(os.path.join(out_dir, json_name), "w", encoding="utf-8") as fh:
        json.dump(_num(report), fh, indent=2, default=str)
        fh.write("\n")
    return status


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="seesmp", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment config")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--paths", type=int)
    r.add_argument("--out")
    r.add_argument("--threads", type=int)
    r.add_argument("--strict", action="store_true")
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_PASS
    if args.threads is not None and args.threads < 1:
        print("config error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    return run(args.config, args.seed, args.paths, args.out, args.threads, args.strict)


if __name__ == "__main__":
    sys.exit(main())
