#!/usr/bin/env python3
"""Compare block-inverse A/G against the closed-form expressions.

Also reports the error of the sign-flipped cross matrix, which shows which
sign convention is consistent with the block inverse.
"""
import argparse

import numpy as np

from jbsiam.jb import ag_discrepancy


def random_spd(d, rng):
    q = rng.standard_normal((d, d))
    return q @ q.T / d + 0.1 * np.eye(d)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    print(f"{'dim':>4} {'A':>10} {'G':>10} {'-G':>10} {'G asym':>10}")
    for d in (2, 4, 8, 16, 32):
        worst = {}
        for _ in range(args.trials):
            for k, v in ag_discrepancy(random_spd(d, rng), random_spd(d, rng)).items():
                worst[k] = max(worst.get(k, 0.0), v)
        print(f"{d:4d} {worst['a']:10.2e} {worst['g']:10.2e} {worst['g_flipped']:10.2e} {worst['g_cf_asymmetry']:10.2e}")


if __name__ == "__main__":
    main()
