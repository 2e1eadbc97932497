"""Trajectory error of a trained model under Gaussian parameter noise.

Each seed draws one noise direction, scaled by every epsilon, so the error
ratio between 2*eps and eps shows whether the error is linear in eps.

    python3 scripts/error_growth.py --ckpt runs/dno/nms.json
"""

import argparse
from pathlib import Path

import numpy as np

from metriplectic.metrics import error_growth_probe
from metriplectic.training import Checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ckpt", type=Path, required=True)
    ap.add_argument("--ic", default="2,0,0")
    ap.add_argument("--horizon", type=float, default=5.0)
    ap.add_argument("--eps", default="1e-4,2e-4,1e-3,2e-3,1e-2")
    ap.add_argument("--seeds", type=int, default=10)
    args = ap.parse_args()
    model = Checkpoint.from_json(args.ckpt.read_text()).model()
    x0 = np.array([float(v) for v in args.ic.split(",")])
    eps = [float(v) for v in args.eps.split(",")]
    rows = error_growth_probe(model, eps, args.horizon, x0, n_seeds=args.seeds)
    print("eps,l2_error,failed")
    for row in rows:
        print(f"{row['eps']:g},{row['error']:.6e},{row['failed']}")
    by_eps = {row["eps"]: row["error"] for row in rows}
    for e in eps:
        if 2 * e in by_eps:
            print(f"# error({2 * e:g}) / error({e:g}) = {by_eps[2 * e] / by_eps[e]:.3f}")


if __name__ == "__main__":
    main()
