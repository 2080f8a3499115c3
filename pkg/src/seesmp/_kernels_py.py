"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in the compiled
``_kernels`` module. Shapes follow one convention: ``minv`` and ``bmat`` are
``(N, n, n)`` node-wise matrices, ``dw`` is ``(P, N)``.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_PATH_MULT = np.uint64(0xD1B54A32D192ED03)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO_PI = 2.0 * np.pi
_INV_2_53 = 1.0 / 9007199254740992.0


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def path_keys(seed: int, path_start: int, n_paths: int) -> np.ndarray:
    s = _mix64(np.array([seed % (1 << 64)], dtype=np.uint64))
    idx = np.arange(path_start, path_start + n_paths, dtype=np.uint64) + np.uint64(1)
    return _mix64(s + idx * _PATH_MULT)


def normal_increments(seed: int, path_start: int, n_paths: int, n_steps: int) -> np.ndarray:
    """Standard normals indexed by (seed, path, step) via a splitmix64 stream per path."""
    keys = path_keys(seed, path_start, n_paths)[:, None]
    ctr = np.arange(n_steps, dtype=np.uint64)[None, :] * np.uint64(2)
    b1 = _mix64(keys + (ctr + np.uint64(1)) * _GOLDEN)
    b2 = _mix64(keys + (ctr + np.uint64(2)) * _GOLDEN)
    u1 = ((b1 >> np.uint64(11)).astype(np.float64) + 0.5) * _INV_2_53
    u2 = ((b2 >> np.uint64(11)).astype(np.float64) + 0.5) * _INV_2_53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2)


def _step(minv_i, b_i, b2_i, L, dwi, dt, milstein):
    v = L + dwi[:, None, None] * np.matmul(b_i, L)
    if milstein:
        v += (0.5 * (dwi * dwi - dt))[:, None, None] * np.matmul(b2_i, L)
    return np.matmul(minv_i, v)


def flow_propagate(minv, bmat, dw, i0, dt, milstein):
    """Fundamental matrices L(t_i0, t_j), j >= i0, for every path: (P, N+1-i0, n, n)."""
    n_paths, n_steps = dw.shape
    n = minv.shape[-1]
    b2 = np.matmul(bmat, bmat) if milstein else None
    out = np.empty((n_paths, n_steps + 1 - i0, n, n))
    L = np.broadcast_to(np.eye(n), (n_paths, n, n)).copy()
    out[:, 0] = L
    for k, i in enumerate(range(i0, n_steps)):
        L = _step(minv[i], bmat[i], None if b2 is None else b2[i], L, dw[:, i], dt, milstein)
        out[:, k + 1] = L
    return out


def flow_moments(minv, bmat, dw, i0, dt, milstein):
    """Path sums of L (x) L: entry [k, a, b, c, d] = sum_p L[a,b] L[c,d] at node i0+k."""
    n_paths, n_steps = dw.shape
    n = minv.shape[-1]
    b2 = np.matmul(bmat, bmat) if milstein else None
    out = np.empty((n_steps + 1 - i0, n, n, n, n))
    L = np.broadcast_to(np.eye(n), (n_paths, n, n)).copy()
    out[0] = np.einsum("pab,pcd->abcd", L, L)
    for k, i in enumerate(range(i0, n_steps)):
        L = _step(minv[i], bmat[i], None if b2 is None else b2[i], L, dw[:, i], dt, milstein)
        out[k + 1] = np.einsum("pab,pcd->abcd", L, L)
    return out


def pair_quadform_sums(minv, bmat, dw, xi, fmat, weights, dt, milstein):
    """Per path and anchor i: L(i,N)' xi L(i,N) + sum_j weights[i, j] L(i,j)' F_j L(i,j).

    ``minv``/``bmat`` may carry a leading path axis. ``xi`` is (P, n, n),
    ``fmat`` is (P, N+1, n, n), ``weights`` is (N+1, N+1).
    """
    n_paths, n_steps = dw.shape
    n = xi.shape[-1]
    per_path = minv.ndim == 4
    b2 = np.matmul(bmat, bmat) if milstein else None
    out = np.empty((n_paths, n_steps + 1, n, n))
    for i in range(n_steps + 1):
        L = np.broadcast_to(np.eye(n), (n_paths, n, n)).copy()
        acc = weights[i, i] * fmat[:, i]
        for j in range(i, n_steps):
            if per_path:
                L = _step(minv[:, j], bmat[:, j], None if b2 is None else b2[:, j],
                          L, dw[:, j], dt, milstein)
            else:
                L = _step(minv[j], bmat[j], None if b2 is None else b2[j],
                          L, dw[:, j], dt, milstein)
            w = weights[i, j + 1]
            if w != 0.0:
                acc = acc + w * np.matmul(np.swapaxes(L, 1, 2), np.matmul(fmat[:, j + 1], L))
        out[:, i] = acc + np.matmul(np.swapaxes(L, 1, 2), np.matmul(xi, L))
    return out
