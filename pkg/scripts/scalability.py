"""Wall time of one block filter pass as the cross-section grows.

    python scripts/scalability.py --T 1000 --shapes 10x10 20x10 50x10 100x10 100x20
"""

import argparse
import time

import numpy as np

from clustergarch import corrparam as cp
from clustergarch import distributions as dk
from clustergarch import dynamics as dy
from clustergarch import scores as sc


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--T", type=int, default=1000)
    ap.add_argument("--shapes", nargs="+", default=["10x10", "20x10", "50x10", "100x10", "100x20"],
                    help="NxK, N assets split evenly into K clusters")
    ap.add_argument("--dist", default=dk.CLUSTER, choices=dk.TAGS)
    args = ap.parse_args()
    print(f"{'n':>5} {'K':>4} {'state':>6} {'filter s':>9} {'us/step':>8}")
    for shape in args.shapes:
        n, k = (int(v) for v in shape.lower().split("x"))
        sizes = [n // k + (1 if i < n % k else 0) for i in range(k)]
        spec = cp.BlockSpec(tuple(sizes))
        count = dk.n_dofs(args.dist, n, spec)
        kind = sc.ModelKind(dk.ModelDistribution(args.dist, (7.0,) * count), spec)
        rho = np.full((k, k), 0.2)
        np.fill_diagonal(rho, 0.4)
        params = dy.VarParams.scalar(cp.eta_of_block(cp.factors_from_rho(rho, spec)), 0.97, 0.03)
        z = dy.simulate(kind, params, args.T, seed=0).z
        dy.run_filter(z[:5], kind, params)
        start = time.perf_counter()
        dy.run_filter(z, kind, params)
        secs = time.perf_counter() - start
        print(f"{n:>5} {k:>4} {params.d:>6} {secs:>9.3f} {secs / args.T * 1e6:>8.1f}")


if __name__ == "__main__":
    main()
