"""Time the numba kernels against their numpy fallbacks.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--end-to-end]

Each kernel is warmed up once (so JIT compilation is not counted) and then
timed with the best of ``--repeat`` runs.  ``--end-to-end`` also times one
Case 1 EM fit in two subprocesses, with and without DIPOLE_GRID_DISABLE_NUMBA.
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from dipole_grid import _kernels as kn

E2E = """
import time, numpy as np
from dipole_grid import em, statespace as ss
from dipole_grid.forward import ForwardModel
from dipole_grid.geometry import HeadModel, RoiBox, discretize, place_sensors
head = HeadModel()
sens = place_sensors(head, 102, seed=7)
p = ss.case1_params(102)
traj = ss.simulate(ss.SimConfig(p, head, sens, 100, 0))
grid = discretize(RoiBox(((-10, 10), (-10, 10), (0, 10))), (12, 12, 12))
fwd = ForwardModel(sens)
em.fit(traj.measurements, grid, p, em.EmConfig(max_iters=1), fwd)
t0 = time.perf_counter()
em.fit(traj.measurements, grid, p, em.EmConfig(max_iters=5, tol=1e-15), fwd)
print(time.perf_counter() - t0)
"""


def cases(rng):
    K, L, T = 4096, 102, 100
    P, Q = rng.uniform(-10, 10, (K, 3)), rng.normal(size=(K, 3))
    S = rng.normal(size=(L, 3)) * 3 + np.array([0, 0, 14])
    W = np.linalg.cholesky(np.linalg.inv(np.diag([0.5, 0.7, 0.9]))).T
    small = P[:1728]
    trans = rng.uniform(size=(1728, 1728))
    trans /= trans.sum(1, keepdims=True)
    init = np.full(1728, 1 / 1728)
    le = rng.normal(size=(T, 1728)) * 5
    alpha, log_scale = kn.NUMPY_KERNELS["forward"](init, trans, le)
    return {
        "meg_field_matrix": (P, Q, S, 1.0),
        "eeg_potential_matrix": (P, Q, S, 0.25),
        "min_distance": (P, S),
        "gauss_logpdf_pairs": (small, small, W, -2.0),
        "forward": (init, trans, le),
        "backward": (trans, le, log_scale),
    }


def best_of(fn, args, repeat):
    fn(*args)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def end_to_end():
    out = {}
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, DIPOLE_GRID_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
        out[label] = float(res.stdout.strip().splitlines()[-1])
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args()
    if not kn.HAVE_NUMBA:
        sys.exit("numba is unavailable or disabled; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}")
    for name, a in cases(rng).items():
        t_np = best_of(kn.NUMPY_KERNELS[name], a, args.repeat)
        t_nb = best_of(kn.NUMBA_KERNELS[name], a, args.repeat)
        print(f"{name:<22}{1e3 * t_np:>12.2f}{1e3 * t_nb:>12.2f}{t_np / t_nb:>10.2f}")
    if args.end_to_end:
        t = end_to_end()
        print(f"{'EM fit, 5 iterations':<22}{1e3 * t['numpy']:>12.0f}{1e3 * t['numba']:>12.0f}"
              f"{t['numpy'] / t['numba']:>10.2f}")


if __name__ == "__main__":
    main()
