"""Parameter counts and right-hand-side timing as the state dimension grows.

    python3 scripts/scaling.py --n-list 10,20,30,50 --trials 200
"""

import argparse

from metriplectic.metrics import ARCHITECTURES, loglog_slope, scaling_table


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-list", default="10,20,30,50")
    ap.add_argument("--r", type=int, default=1)
    ap.add_argument("--trials", type=int, default=200)
    args = ap.parse_args()
    ns = [int(v) for v in args.n_list.split(",")]
    rows = scaling_table(ns, r=args.r, trials=args.trials)
    print("n," + ",".join(ARCHITECTURES) + ",rhs_seconds")
    for row in rows:
        print(",".join(str(row[k]) for k in ("n", *ARCHITECTURES)) + f",{row['rhs_seconds']:.3e}")
    for arch in ARCHITECTURES:
        print(f"# slope {arch}: {loglog_slope(ns, [row[arch] for row in rows]):.3f}")
    print(f"# slope nms rhs time: {loglog_slope(ns, [row['rhs_seconds'] for row in rows]):.3f}")


if __name__ == "__main__":
    main()
