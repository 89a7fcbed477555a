"""KL-best single Student t for an equally weighted sum of G independent t's.

    python scripts/kl_best_t.py --dof 6 --groups 1 2 3 5 10 20
"""

import argparse

import numpy as np

from clustergarch import distributions as dk


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dof", type=float, default=6.0)
    ap.add_argument("--groups", type=int, nargs="+", default=[1, 2, 3, 5, 10, 20])
    args = ap.parse_args()
    print(f"{'G':>4} {'best dof':>10} {'excess kurtosis':>16}")
    for g in args.groups:
        best = dk.kl_best_t(np.full(g, g**-0.5), [args.dof] * g)
        # excess kurtosis of the weighted sum: sum w^4 * 6/(nu-4)
        kurt = 6.0 / (args.dof - 4.0) / g if args.dof > 4 else float("inf")
        print(f"{g:>4} {best:>10.4f} {kurt:>16.4f}")


if __name__ == "__main__":
    main()
