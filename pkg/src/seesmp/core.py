"""Foundational types: time grids, Brownian ensembles, truncated systems, coefficient sets.

Array conventions used throughout the package:

* states ``x``: ``(P, n)`` at one node, ``(P, N+1, n)`` along a path ensemble;
* controls ``u``: ``(P, m)`` at one node, ``(P, N, m)`` or ``(N, m)`` as a process;
* node-wise matrices: ``(N+1, n, n)``; Brownian increments ``(P, N)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .errors import ConfigurationError, InvalidArgumentError


@dataclass(frozen=True)
class TimeGrid:
    """Uniform mesh ``t_i = i * T / n_steps`` on ``[0, T]``."""

    t_end: float
    n_steps: int
    t_start: float = 0.0

    @property
    def dt(self) -> float:
        return self.t_end / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        out = np.arange(self.n_steps + 1) * self.t_end / self.n_steps
        out[-1] = self.t_end
        return out

    def node(self, i: int) -> float:
        return self.t_end if i == self.n_steps else i * self.t_end / self.n_steps

    def index_of(self, t: float) -> int:
        """Index of the node at time ``t``; raises if ``t`` is off the grid."""
        x = t / self.dt
        i = int(round(x))
        if abs(x - i) > 1e-9 * max(1.0, abs(x)) or i < 0 or i > self.n_steps:
            raise InvalidArgumentError(f"time {t!r} is not a node of the grid (dt={self.dt!r})")
        return i

    def steps_of(self, duration: float) -> int:
        """Number of steps spanned by ``duration``; raises unless it is a multiple of dt."""
        if duration < 0:
            raise InvalidArgumentError("duration must be nonnegative")
        x = duration / self.dt
        k = int(round(x))
        if abs(x - k) > 1e-9 * max(1.0, abs(x)):
            raise InvalidArgumentError(f"duration {duration!r} is not a multiple of dt={self.dt!r}")
        return k

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.t_end, self.n_steps * factor)


def build_time_grid(T: float, n_steps: int) -> TimeGrid:
    if not np.isfinite(T) or T <= 0:
        raise InvalidArgumentError(f"T must be positive, got {T!r}")
    if int(n_steps) != n_steps or n_steps < 1:
        raise InvalidArgumentError(f"n_steps must be a positive integer, got {n_steps!r}")
    return TimeGrid(float(T), int(n_steps))


@dataclass(frozen=True, eq=False)
class BrownianEnsemble:
    """Per-path Brownian increments on a grid.

    ``increments[p, i]`` is ``w(t_{i+1}) - w(t_i)`` on path ``p``.
    """

    grid: TimeGrid
    n_paths: int
    seed: int
    increments: np.ndarray

    @property
    def dw(self) -> np.ndarray:
        return self.increments

    @property
    def w(self) -> np.ndarray:
        """Brownian paths ``(P, N+1)`` with ``w(0) = 0``."""
        out = np.zeros((self.n_paths, self.grid.n_steps + 1))
        np.cumsum(self.increments, axis=1, out=out[:, 1:])
        return out

    def coarsen(self, factor: int) -> "BrownianEnsemble":
        """Ensemble on the grid with ``n_steps / factor`` steps built from the same paths."""
        if self.grid.n_steps % factor:
            raise InvalidArgumentError("coarsening factor must divide n_steps")
        g = TimeGrid(self.grid.t_end, self.grid.n_steps // factor)
        inc = self.increments.reshape(self.n_paths, g.n_steps, factor).sum(axis=2)
        inc.flags.writeable = False
        return BrownianEnsemble(g, self.n_paths, self.seed, inc)

    def subset(self, n_paths: int) -> "BrownianEnsemble":
        inc = self.increments[:n_paths]
        return BrownianEnsemble(self.grid, inc.shape[0], self.seed, inc)


def sample_brownian(grid: TimeGrid, n_paths: int, seed: int) -> BrownianEnsemble:
    """Counter-based Brownian increments: entry (p, i) depends only on (seed, p, i)."""
    if int(n_paths) != n_paths or n_paths < 1:
        raise InvalidArgumentError(f"n_paths must be a positive integer, got {n_paths!r}")
    z = kernels.normal_increments(int(seed), int(n_paths), grid.n_steps)
    inc = z * np.sqrt(grid.dt)
    inc.flags.writeable = False
    return BrownianEnsemble(grid, int(n_paths), int(seed), inc)


MatrixSpec = np.ndarray | Callable[[float], np.ndarray]


def _node_matrices(spec, grid: TimeGrid | None, dim: int) -> np.ndarray:
    if callable(spec):
        if grid is None:
            return np.asarray(spec(0.0), dtype=float).reshape(1, dim, dim)
        return np.stack([np.asarray(spec(t), dtype=float) for t in grid.nodes])
    arr = np.asarray(spec, dtype=float)
    if arr.ndim == 2:
        return arr[None]
    return arr


@dataclass(frozen=True, eq=False)
class GalerkinSystem:
    """Finite-dimensional truncation: ``dx = A x dt + B x dw`` plus perturbations.

    ``A`` and ``B`` are ``(n, n)`` constants, ``(N+1, n, n)`` node-wise arrays,
    or callables of time. ``V`` is the weight of the V-norm ``u' V u``.
    """

    A: MatrixSpec
    B: MatrixSpec
    delta: float = 0.0
    K: float = 0.0
    V: np.ndarray | None = None

    @property
    def dim(self) -> int:
        if callable(self.A):
            return int(np.asarray(self.A(0.0)).shape[-1])
        return int(np.asarray(self.A).shape[-1])

    def is_constant(self) -> bool:
        return not callable(self.A) and not callable(self.B) \
            and np.ndim(self.A) == 2 and np.ndim(self.B) == 2

    def A_nodes(self, grid: TimeGrid) -> np.ndarray:
        return self._expand(self.A, grid)

    def B_nodes(self, grid: TimeGrid) -> np.ndarray:
        return self._expand(self.B, grid)

    def _expand(self, spec, grid: TimeGrid) -> np.ndarray:
        m = _node_matrices(spec, grid, self.dim)
        if m.shape[0] == 1:
            return np.broadcast_to(m, (grid.n_steps + 1,) + m.shape[1:])
        if m.shape[0] != grid.n_steps + 1:
            raise InvalidArgumentError("node-wise matrices do not match the grid")
        return m

    @property
    def V_weight(self) -> np.ndarray:
        return np.eye(self.dim) if self.V is None else np.asarray(self.V, dtype=float)

    def implicit_inverses(self, grid: TimeGrid) -> np.ndarray:
        """``(I - dt A_i)^{-1}`` for every step ``i < N``."""
        from .errors import NumericalError

        A = self.A_nodes(grid)[:-1]
        eye = np.eye(self.dim)
        try:
            if self.is_constant():
                inv = np.linalg.inv(eye - grid.dt * A[0])
                return np.broadcast_to(inv, A.shape)
            return np.linalg.inv(eye - grid.dt * A)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"I - dt*A is singular: {exc}") from exc


_DERIVATIVES = ("a_x", "b_x", "a_xx", "b_xx", "h_x", "h_xx", "k_x", "k_y", "k_z", "D2k")


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """Nonlinear data (a, b, h, k), their derivatives and the control set.

    All callables are vectorised over paths: ``x`` is ``(P, n)``, ``u`` is
    ``(P, m)``, ``y`` and ``z`` are ``(P,)``. Shapes returned:
    ``a, b -> (P, n)``; ``a_x, b_x -> (P, n, n)`` with ``[i, j] = d a_i / d x_j``;
    ``a_xx, b_xx -> (P, n, n, n)``; ``h -> (P,)``; ``h_x -> (P, n)``;
    ``h_xx -> (P, n, n)``; ``k -> (P,)``; ``k_x -> (P, n)``; ``k_y, k_z -> (P,)``;
    ``D2k -> (P, n+2, n+2)``, the Hessian of k in (x, y, z).
    """

    a: Callable
    b: Callable
    h: Callable
    k: Callable
    a_x: Callable | None = None
    b_x: Callable | None = None
    a_xx: Callable | None = None
    b_xx: Callable | None = None
    h_x: Callable | None = None
    h_xx: Callable | None = None
    k_x: Callable | None = None
    k_y: Callable | None = None
    k_z: Callable | None = None
    D2k: Callable | None = None
    U: np.ndarray | None = None
    control_dim: int = 1
    bound: float = np.inf

    def require(self, *names: str) -> None:
        missing = [n for n in (names or _DERIVATIVES) if getattr(self, n) is None]
        if missing:
            raise ConfigurationError(f"missing derivative callbacks: {', '.join(missing)}")


@dataclass(frozen=True)
class SpikeSpec:
    """Spike window ``[t0, t0 + rho)`` carrying the control value ``v``."""

    t0: float
    rho: float
    v: np.ndarray | float = 0.0

    def window(self, grid: TimeGrid) -> tuple[int, int]:
        """Node indices ``(i0, i1)`` with the window covering steps ``i0 <= i < i1``."""
        if self.rho < 0:
            raise InvalidArgumentError("rho must be nonnegative")
        i0 = grid.index_of(self.t0)
        k = grid.steps_of(self.rho)
        if i0 + k > grid.n_steps or (k > 0 and i0 >= grid.n_steps):
            raise InvalidArgumentError("spike window leaves [0, T)")
        return i0, i0 + k

    def indicator(self, grid: TimeGrid) -> np.ndarray:
        i0, i1 = self.window(grid)
        ind = np.zeros(grid.n_steps)
        ind[i0:i1] = 1.0
        return ind


@dataclass
class OrderReport:
    """Fitted log-log slope of errors against rho, judged against a claimed order."""

    rho_list: np.ndarray
    error_list: np.ndarray
    fitted_slope: float
    r_squared: float
    claimed_order: float
    kind: str
    verdict: str
    stderr_list: np.ndarray | None = None
    name: str = ""
    slope_tolerance: float = 0.25
    margin: float = 0.25
    r2_min: float = 0.95

    @property
    def passed(self) -> bool:
        return self.verdict in ("pass", "exact-zero")


@dataclass
class AssumptionCheck:
    name: str
    passed: bool
    worst_value: float
    worst_probe: np.ndarray | None = None
    detail: str = ""


@dataclass
class AssumptionReport:
    checks: dict[str, AssumptionCheck] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def __getitem__(self, key: str) -> AssumptionCheck:
        return self.checks[key]


def probe_normals(seed: int, n_probes: int, dim: int) -> np.ndarray:
    """Counter-based probe vectors; a longer request extends a shorter one."""
    if n_probes == 0:
        return np.zeros((0, dim))
    return kernels.normal_increments(int(seed) ^ 0x5EED, dim, n_probes).T.copy()


def validate_assumptions(system: GalerkinSystem, coeffs: CoefficientSet | None,
                         n_probes: int = 64, grid: TimeGrid | None = None, seed: int = 0,
                         rtol: float = 1e-4, fd_step: float = 1e-5,
                         y_scale: float = 1.0) -> AssumptionReport:
    """Probe-based checks of coercivity, quasi-skew symmetry and derivative consistency.

    Probes are the canonical basis plus ``n_probes`` counter-generated vectors,
    so enlarging ``n_probes`` only adds probes.
    """
    n = system.dim
    report = AssumptionReport()
    grid_nodes = grid.nodes if grid is not None else np.array([0.0])
    A_all = system.A_nodes(grid) if grid is not None else _node_matrices(system.A, None, n)
    B_all = system.B_nodes(grid) if grid is not None else _node_matrices(system.B, None, n)
    probes = np.vstack([np.eye(n), probe_normals(seed, n_probes, n)])
    V = system.V_weight
    norm2 = np.sum(probes * probes, axis=1)
    vnorm2 = np.einsum("pi,ij,pj->p", probes, V, probes)

    worst_c, worst_s = -np.inf, -np.inf
    probe_c = probe_s = None
    for A, B in zip(A_all, B_all):
        Au = probes @ A.T
        Bu = probes @ B.T
        lhs = 2 * np.sum(Au * probes, axis=1) + np.sum(Bu * Bu, axis=1)
        excess = (lhs + system.delta * vnorm2 - system.K * norm2) / norm2
        j = int(np.argmax(excess))
        if excess[j] > worst_c:
            worst_c, probe_c = float(excess[j]), probes[j]
        skew = (np.abs(np.sum(Bu * probes, axis=1)) - system.K * norm2) / norm2
        j = int(np.argmax(skew))
        if skew[j] > worst_s:
            worst_s, probe_s = float(skew[j]), probes[j]
    tol = 1e-12 * (1.0 + max(np.abs(A_all).max(), np.abs(B_all).max() ** 2))
    report.checks["coercivity"] = AssumptionCheck("coercivity", worst_c <= tol, worst_c, probe_c)
    report.checks["quasi_skew"] = AssumptionCheck("quasi_skew", worst_s <= tol, worst_s, probe_s)

    if coeffs is None:
        return report
    coeffs.require()
    report.checks.update(_gradient_checks(coeffs, n, max(n_probes, 1), seed, rtol, fd_step,
                                          float(grid_nodes[0]), y_scale))
    return report


def _rel_err(fd: np.ndarray, d: np.ndarray) -> tuple[float, int]:
    err = np.abs(fd - d) / np.maximum(1.0, np.maximum(np.abs(fd), np.abs(d)))
    flat = err.reshape(err.shape[0], -1).max(axis=1)
    j = int(np.argmax(flat))
    return float(flat[j]), j


def _gradient_checks(c: CoefficientSet, n: int, n_probes: int, seed: int, rtol: float,
                     eps: float, t: float, y_scale: float) -> dict[str, AssumptionCheck]:
    raw = probe_normals(seed + 1, n_probes, n + 2 + c.control_dim)
    x = raw[:, :n]
    y = y_scale * raw[:, n]
    z = y_scale * raw[:, n + 1]
    if c.U is not None and len(np.atleast_1d(c.U)) > 0:
        Upts = np.asarray(c.U, dtype=float).reshape(-1, c.control_dim)
        u = Upts[np.arange(n_probes) % len(Upts)]
    else:
        u = raw[:, n + 2:]
    out: dict[str, AssumptionCheck] = {}

    def fd_x(fn, *tail):
        cols = []
        for j in range(n):
            e = np.zeros(n)
            e[j] = eps
            cols.append((fn(x + e, *tail) - fn(x - e, *tail)) / (2 * eps))
        return np.stack(cols, axis=-1)

    def record(name, fd, d):
        fd = np.asarray(fd, dtype=float)
        d = np.broadcast_to(np.asarray(d, dtype=float), fd.shape)
        val, j = _rel_err(fd, d)
        out[name] = AssumptionCheck(name, val <= rtol, val, raw[j])

    record("a_x", fd_x(lambda xx: c.a(t, xx, u)), c.a_x(t, x, u))
    record("b_x", fd_x(lambda xx: c.b(t, xx, u)), c.b_x(t, x, u))
    record("a_xx", fd_x(lambda xx: c.a_x(t, xx, u)), c.a_xx(t, x, u))
    record("b_xx", fd_x(lambda xx: c.b_x(t, xx, u)), c.b_xx(t, x, u))
    record("h_x", fd_x(lambda xx: c.h(xx)), c.h_x(x))
    record("h_xx", fd_x(lambda xx: c.h_x(xx)), c.h_xx(x))
    record("k_x", fd_x(lambda xx: c.k(t, xx, y, z, u)), c.k_x(t, x, y, z, u))
    record("k_y", (c.k(t, x, y + eps, z, u) - c.k(t, x, y - eps, z, u)) / (2 * eps),
           c.k_y(t, x, y, z, u))
    record("k_z", (c.k(t, x, y, z + eps, u) - c.k(t, x, y, z - eps, u)) / (2 * eps),
           c.k_z(t, x, y, z, u))

    def grad_xyz(xx, yy, zz):
        return np.concatenate([c.k_x(t, xx, yy, zz, u),
                               np.asarray(c.k_y(t, xx, yy, zz, u)).reshape(-1, 1) * np.ones((len(xx), 1)),
                               np.asarray(c.k_z(t, xx, yy, zz, u)).reshape(-1, 1) * np.ones((len(xx), 1))],
                              axis=1)

    cols = []
    for j in range(n + 2):
        dx = np.zeros(n)
        dy = dz = 0.0
        if j < n:
            dx[j] = eps
        elif j == n:
            dy = eps
        else:
            dz = eps
        cols.append((grad_xyz(x + dx, y + dy, z + dz) - grad_xyz(x - dx, y - dy, z - dz)) / (2 * eps))
    record("D2k", np.stack(cols, axis=-1), c.D2k(t, x, y, z, u))

    bounds = {
        "a_x": np.linalg.norm(np.broadcast_to(c.a_x(t, x, u), (n_probes, n, n)), ord=2, axis=(1, 2)),
        "b_x": np.linalg.norm(np.broadcast_to(c.b_x(t, x, u), (n_probes, n, n)), ord=2, axis=(1, 2)),
        "k_y": np.abs(np.broadcast_to(c.k_y(t, x, y, z, u), (n_probes,))),
        "k_z": np.abs(np.broadcast_to(c.k_z(t, x, y, z, u), (n_probes,))),
    }
    worst = max(float(v.max()) for v in bounds.values())
    out["bounded"] = AssumptionCheck("bounded", worst <= c.bound, worst, None,
                                     f"declared bound {c.bound!r}")
    return out


def as_control_process(u, n_paths: int, n_steps: int) -> np.ndarray:
    """Broadcast a control given as scalar, (m,), (N, m) or (P, N, m) to (P, N, m)."""
    arr = np.asarray(u, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, 1, -1) if arr.shape[0] != n_steps else arr.reshape(1, n_steps, 1)
    elif arr.ndim == 2:
        arr = arr[None]
    return np.broadcast_to(arr, (n_paths, n_steps, arr.shape[-1]))


def quad_form(M: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``<M x, x>`` per path; ``M`` is (n, n) or (P, n, n), ``x`` is (P, n)."""
    if M.ndim == 2:
        return np.einsum("pi,ij,pj->p", x, M, x)
    return np.einsum("pi,pij,pj->p", x, M, x)
