"""Instance families with exact derivatives, Riccati feedback and closed-loop simulation."""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

from .core import BrownianEnsemble, CoefficientSet, GalerkinSystem, TimeGrid
from .errors import InvalidArgumentError, NumericalError
from .forward import PathEnsemble, solve_linear_see
from .spde import SuperParabolicSpec, discretize_superparabolic


def default_spde_system(n_space: int = 2, alpha: float = 0.05, beta: float = 0.3,
                        kappa: float = 0.01) -> GalerkinSystem:
    """Finite-difference truncation of the super-parabolic example on (0, 1)."""
    return discretize_superparabolic(SuperParabolicSpec(n_space=n_space, alpha=alpha, beta=beta,
                                                        kappa=kappa))


def scalar_system(a: float, b: float) -> GalerkinSystem:
    return GalerkinSystem(np.array([[float(a)]]), np.array([[float(b)]]))


def _sym(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    return 0.5 * (M + M.T)


def control_family(n: int, c1: float, c2: float, Q, r: float, H, h1=None,
                   kappa_y: float = 0.0, kappa_z: float = 0.0,
                   gamma: Callable[[float], float] | None = None, U=None) -> CoefficientSet:
    """``a = c1 u e1``, ``b = c2 u e1``, ``k = <Q x, x> + r u^2 + gamma(t) u + kappa_y y + kappa_z z``,
    ``h = <H x, x> + <h1, x>``; scalar control."""
    Qs, Hs = _sym(Q), _sym(H)
    if Qs.shape != (n, n) or Hs.shape != (n, n):
        raise InvalidArgumentError("Q and H must be (n, n)")
    h1v = np.zeros(n) if h1 is None else np.asarray(h1, dtype=float)
    g = gamma or (lambda t: 0.0)

    def a(t, x, u):
        out = np.zeros_like(x, dtype=float)
        out[:, 0] = c1 * u[:, 0]
        return out

    def b(t, x, u):
        out = np.zeros_like(x, dtype=float)
        out[:, 0] = c2 * u[:, 0]
        return out

    def zeros2(t, x, u):
        return np.zeros((len(x), n, n))

    def zeros3(t, x, u):
        return np.zeros((len(x), n, n, n))

    def k(t, x, y, z, u):
        return (np.einsum("pi,ij,pj->p", x, Qs, x) + r * np.sum(u * u, axis=1)
                + g(t) * u[:, 0] + kappa_y * y + kappa_z * z)

    def D2k(t, x, y, z, u):
        out = np.zeros((len(x), n + 2, n + 2))
        out[:, :n, :n] = 2.0 * Qs
        return out

    return CoefficientSet(
        a=a, b=b,
        h=lambda x: np.einsum("pi,ij,pj->p", x, Hs, x) + x @ h1v,
        k=k,
        a_x=zeros2, b_x=zeros2, a_xx=zeros3, b_xx=zeros3,
        h_x=lambda x: 2.0 * x @ Hs + h1v,
        h_xx=lambda x: np.broadcast_to(2.0 * Hs, (len(x), n, n)),
        k_x=lambda t, x, y, z, u: 2.0 * x @ Qs,
        k_y=lambda t, x, y, z, u: np.full(len(x), float(kappa_y)),
        k_z=lambda t, x, y, z, u: np.full(len(x), float(kappa_z)),
        D2k=D2k,
        U=None if U is None else np.asarray(U, dtype=float).reshape(-1, 1),
        control_dim=1,
        bound=max(abs(kappa_y), abs(kappa_z), 1.0),
    )


def scalar_nonlinear_family(kappa_y: float = 0.0, kappa_z: float = 0.0, U=None) -> CoefficientSet:
    """``a = 0.5 u - 0.5 sin x``, ``b = sin x + u``, ``k = x^2 + u^2 + kappa_y y + kappa_z z``, ``h = x^2``."""

    def col(v):
        return v[:, :, None]

    return CoefficientSet(
        a=lambda t, x, u: 0.5 * u[:, :1] - 0.5 * np.sin(x),
        b=lambda t, x, u: np.sin(x) + u[:, :1],
        h=lambda x: x[:, 0] ** 2,
        k=lambda t, x, y, z, u: x[:, 0] ** 2 + u[:, 0] ** 2 + kappa_y * y + kappa_z * z,
        a_x=lambda t, x, u: col(-0.5 * np.cos(x)),
        b_x=lambda t, x, u: col(np.cos(x)),
        a_xx=lambda t, x, u: col(col(0.5 * np.sin(x))),
        b_xx=lambda t, x, u: col(col(-np.sin(x))),
        h_x=lambda x: 2.0 * x,
        h_xx=lambda x: np.full((len(x), 1, 1), 2.0),
        k_x=lambda t, x, y, z, u: 2.0 * x,
        k_y=lambda t, x, y, z, u: np.full(len(x), float(kappa_y)),
        k_z=lambda t, x, y, z, u: np.full(len(x), float(kappa_z)),
        D2k=lambda t, x, y, z, u: np.broadcast_to(np.diag([2.0, 0.0, 0.0]), (len(x), 3, 3)),
        U=None if U is None else np.asarray(U, dtype=float).reshape(-1, 1),
        control_dim=1,
        bound=max(abs(kappa_y), abs(kappa_z), 1.0),
    )


def piecewise_constant(values, T: float) -> Callable[[float], float]:
    """Function of t equal to ``values[j]`` on the j-th of ``len(values)`` equal intervals of [0, T)."""
    vals = np.asarray(values, dtype=float)
    m = len(vals)

    def g(t: float) -> float:
        return float(vals[min(int(np.floor(t * m / T + 1e-12)), m - 1)])

    return g


def riccati_gains(system: GalerkinSystem, c1: float, c2: float, Q, r: float, H,
                  grid: TimeGrid, kappa_y: float = 0.0, kappa_z: float = 0.0,
                  rtol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Riccati matrix ``Pi`` on the nodes and feedback rows ``g`` with ``u* = -<g, x>``.

    Under the measure change that absorbs ``kappa_z`` the drift is
    ``A + kappa_z B`` and the control enters the drift with ``c1 + kappa_z c2``;
    ``kappa_y`` acts as a discount rate:

        -Pi' = At' Pi + Pi At + B' Pi B + kappa_y Pi + Q - m m' / (r + c2^2 Pi_11),
        m = (c1 + kappa_z c2) Pi e1 + c2 B' Pi e1,   Pi(T) = H.
    """
    if not system.is_constant():
        raise InvalidArgumentError("Riccati feedback needs constant A and B")
    A = np.asarray(system.A, dtype=float)
    B = np.asarray(system.B, dtype=float)
    n = A.shape[0]
    At = A + kappa_z * B
    ct = c1 + kappa_z * c2
    Qs, Hs = _sym(Q), _sym(H)
    e1 = np.zeros(n)
    e1[0] = 1.0

    def gain(Pi):
        m = ct * Pi @ e1 + c2 * B.T @ Pi @ e1
        return m, r + c2 * c2 * Pi[0, 0]

    def rhs(t, v):
        Pi = v.reshape(n, n)
        m, den = gain(Pi)
        d = At.T @ Pi + Pi @ At + B.T @ Pi @ B + kappa_y * Pi + Qs - np.outer(m, m) / den
        return -d.ravel()

    T = grid.t_end
    sol = solve_ivp(rhs, (T, 0.0), Hs.ravel(), method="DOP853", rtol=rtol, atol=rtol * 1e-2,
                    t_eval=grid.nodes[::-1])
    if not sol.success:
        raise NumericalError(f"Riccati integration failed: {sol.message}")
    Pi = sol.y.T[::-1].reshape(-1, n, n)
    g = np.empty((len(Pi), n))
    for i, M in enumerate(Pi):
        m, den = gain(M)
        g[i] = m / den
    return Pi, g


def simulate_feedback(system: GalerkinSystem, coeffs: CoefficientSet, gains: np.ndarray,
                      ensemble: BrownianEnsemble, x0, lo: float = -np.inf,
                      hi: float = np.inf) -> tuple[PathEnsemble, np.ndarray]:
    """Closed loop with ``u_i = clip(-<g_i, x_i>, lo, hi)``; returns the state and ``u`` ``(P, N, 1)``."""
    grid = ensemble.grid
    P, N = ensemble.n_paths, grid.n_steps
    nodes = grid.nodes
    u = np.zeros((P, N, 1))
    done = np.zeros(N, dtype=bool)

    def control(i, x):
        if not done[i]:
            u[:, i, 0] = np.clip(-(x @ gains[i]), lo, hi)
            done[i] = True
        return u[:, i]

    x = solve_linear_see(system, ensemble, x0,
                         drift=lambda i, x: coeffs.a(nodes[i], x, control(i, x)),
                         diffusion=lambda i, x: coeffs.b(nodes[i], x, control(i, x)))
    return x, u
