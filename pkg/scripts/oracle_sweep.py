"""Compare the solver with exhaustive grid search on random tiny instances
and tabulate the per-period gap relative to the grid resolution n*max(S)/m.

    python3 scripts/oracle_sweep.py --instances 40 --m 8 --seed 0
"""

import argparse
import time

import numpy as np

from dynpo import DistortionFn, RiskSpec, SamplePathSet, SolveConfig, es_distortion, identity, solve_cdpo
from dynpo.allocation import risk_to_go_matrix
from dynpo.oracle import TinyInstance, brute_force_cpo_t, verify_po_definition

SHAPES = [(2, 1, 6), (2, 2, 3), (3, 1, 3), (2, 1, 5), (2, 2, 2), (3, 2, 1)]


def random_distortion(rng):
    kind = rng.integers(3)
    if kind == 0:
        return identity()
    if kind == 1:
        return es_distortion(float(rng.uniform(0.1, 0.9)))
    a = rng.uniform(0.05, 0.95)
    return DistortionFn([0, a, 1], [0, rng.uniform(a, 1), 1])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--instances", type=int, default=40)
    ap.add_argument("--m", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)

    print(f"{'#':>3} {'n':>2} {'T':>2} {'N':>2} {'t':>2} {'solver':>12} {'oracle':>12} {'gap/res':>9}  CDPO")
    ratios = []
    start = time.perf_counter()
    for k in range(args.instances):
        n, horizon, n_paths = SHAPES[k % len(SHAPES)]
        ps = SamplePathSet(np.round(rng.uniform(0, 10, (n_paths, horizon)), 2))
        specs = tuple(RiskSpec.constant(random_distortion(rng), horizon) for _ in range(n))
        res = solve_cdpo(SolveConfig(specs, ps, c_policy="none"))
        inst = TinyInstance(ps, args.m)
        rtg = risk_to_go_matrix(specs, res.allocation)
        status = verify_po_definition(inst, specs, res.allocation, "CDPO").status
        for t in range(horizon):
            oracle = brute_force_cpo_t(inst, specs, t, downstream=res.allocation).best
            solver = float(ps.weights @ rtg[:, t, :].sum(axis=1))
            resolution = n * ps.aggregate(t + 1).max() / args.m
            ratio = (oracle - solver) / resolution
            ratios.append(ratio)
            print(f"{k:>3} {n:>2} {horizon:>2} {n_paths:>2} {t:>2} {solver:>12.6f} {oracle:>12.6f} {ratio:>9.2e}  {status}")
    ratios = np.array(ratios)
    print(
        f"\n{len(ratios)} period checks in {time.perf_counter() - start:.1f}s; "
        f"oracle - solver in [{ratios.min():.2e}, {ratios.max():.2e}] grid resolutions"
    )


if __name__ == "__main__":
    main()
