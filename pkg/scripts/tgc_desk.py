"""Desk-scale two gas containers run with only (q, p) observed.

Trains on [0, 20], rolls the model out to t = 50 and reports the (q, p) MSE on
the training window, learned-energy drift and boundedness.

    python3 scripts/tgc_desk.py --out runs/tgc
"""

import argparse
import json
import logging
from pathlib import Path

from metriplectic.experiments import TGC_DESK, desk_data, desk_report, desk_train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/tgc"))
    ap.add_argument("--steps", type=int, default=TGC_DESK.train.steps)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    raw, filled = desk_data(TGC_DESK)
    ck, seconds = desk_train(TGC_DESK, filled, "nms", seed=args.seed, steps=args.steps)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "nms.json").write_text(ck.to_json())
    rep = desk_report(TGC_DESK, raw, ck.model())
    rep["seconds"] = seconds
    print(json.dumps(rep, indent=1))
    (args.out / "summary.json").write_text(json.dumps(rep, indent=1) + "\n")


if __name__ == "__main__":
    main()
