"""Time the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--paths N] [--steps N] [--dim N] [--repeat N]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from seesmp import kernels


def cases(paths: int, steps: int, dim: int):
    dt = 1.0 / steps
    rng = np.random.default_rng(0)
    A = -np.eye(dim) + 0.1 * rng.standard_normal((dim, dim))
    B = 0.2 * rng.standard_normal((dim, dim))
    minv = np.broadcast_to(np.linalg.inv(np.eye(dim) - dt * A), (steps, dim, dim)).copy()
    bmat = np.broadcast_to(B, (steps, dim, dim)).copy()
    dw = np.sqrt(dt) * rng.standard_normal((paths, steps))
    small = max(paths // 16, 1)
    xi = np.broadcast_to(np.eye(dim), (small, dim, dim)).copy()
    fmat = np.broadcast_to(0.1 * np.eye(dim), (small, steps + 1, dim, dim)).copy()
    w = np.triu(np.full((steps + 1, steps + 1), dt))
    return {
        "normal_increments": lambda: kernels.normal_increments(7, paths, steps),
        "flow_propagate": lambda: kernels.flow_propagate(minv, bmat, dw, 0, dt),
        "flow_moments": lambda: kernels.flow_moments(minv, bmat, dw, 0, dt),
        "pair_quadform_sums": lambda: kernels.pair_quadform_sums(minv, bmat, dw[:small], xi, fmat,
                                                                 w, dt),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--paths", type=int, default=4000)
    ap.add_argument("--steps", type=int, default=128)
    ap.add_argument("--dim", type=int, default=2)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    backends = ["python"] + (["compiled"] if kernels.compiled_available() else [])
    timings: dict[str, dict[str, float]] = {}
    for name in backends:
        kernels.use_backend(name)
        for case, fn in cases(args.paths, args.steps, args.dim).items():
            timings.setdefault(case, {})[name] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    print(f"paths={args.paths} steps={args.steps} dim={args.dim} (best of {args.repeat}, seconds)")
    print(f"{'kernel':22s}" + "".join(f"{b:>12s}" for b in backends) + "     speedup")
    for case, t in timings.items():
        speed = t["python"] / t["compiled"] if "compiled" in t else float("nan")
        print(f"{case:22s}" + "".join(f"{t[b]:12.4f}" for b in backends) + f"{speed:11.1f}x")


if __name__ == "__main__":
    main()
