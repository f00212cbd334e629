"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--trials 256] [--T 2000] [--repeat 5]

Both backends run on identical inputs (one block of trials on the L=2
shift-register chain); the script reports the best wall time of each and
the largest absolute difference between their outputs.
"""
import argparse
import time

import numpy as np

from odemarkov import kernels
from odemarkov.chain import build_shift_register, stationary
from odemarkov.oper import gain_factors
from odemarkov.rng import draw_block


def best_of(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=256)
    ap.add_argument("--T", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--alpha", type=float, default=0.05)
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    model = build_shift_register(2)
    info = stationary(model)
    cum = kernels.transition_cumsum(model.P)
    gains = np.ascontiguousarray(gain_factors(model, args.alpha))
    u0, U, Z = draw_block(1, range(args.trials), args.T, model.k)
    start = kernels.initial_states(u0, "stationary", info.pi)
    x0 = np.zeros(model.k)
    depths = np.array([8, 16, 32, 64, min(args.T, 128)], dtype=np.int64)

    # compile outside the timed region
    states = kernels.chain_paths_numba(cum, start, U)
    kernels.linear_norms_numba(states, gains, x0, Z, True)
    kernels.coupled_endpoints_numba(states, gains, Z, True, depths)

    cases = {
        "chain_paths": (lambda: kernels.chain_paths_numpy(cum, start, U),
                        lambda: kernels.chain_paths_numba(cum, start, U)),
        "linear_norms": (lambda: kernels.linear_norms_numpy(states, gains, x0, Z, True)[0],
                         lambda: kernels.linear_norms_numba(states, gains, x0, Z, True)[0]),
        "coupled_endpoints": (
            lambda: kernels.coupled_endpoints_numpy(states, gains, Z, True, depths),
            lambda: kernels.coupled_endpoints_numba(states, gains, Z, True, depths)),
    }
    print(f"trials={args.trials} T={args.T} repeat={args.repeat}")
    print(f"{'kernel':<18} {'numpy [s]':>10} {'numba [s]':>10} {'speedup':>8} {'max|diff|':>10}")
    for name, (f_np, f_nb) in cases.items():
        t_np, r_np = best_of(f_np, args.repeat)
        t_nb, r_nb = best_of(f_nb, args.repeat)
        diff = float(np.max(np.abs(np.asarray(r_np, dtype=float) - np.asarray(r_nb, dtype=float))))
        print(f"{name:<18} {t_np:>10.4f} {t_nb:>10.4f} {t_np / t_nb:>8.1f} {diff:>10.2e}")


if __name__ == "__main__":
    main()
