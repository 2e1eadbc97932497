"""Desk-scale damped nonlinear oscillator run: NMS and a NODE baseline on the same data.

Trains on [0, 6] with (q, p) observed and S filled by a straight line, then
rolls both models out over [0, 15] and writes a JSON summary plus the two
checkpoints.

    python3 scripts/dno_desk.py --out runs/dno
"""

import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path

from metriplectic.experiments import DNO_DESK, desk_data, desk_report, desk_train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/dno"))
    ap.add_argument("--steps", type=int, default=DNO_DESK.train.steps)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--hidden", type=int, default=DNO_DESK.hidden)
    ap.add_argument("--skip-node", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    setup = replace(DNO_DESK, hidden=args.hidden)
    raw, filled = desk_data(setup)
    args.out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for kind in ("nms",) if args.skip_node else ("nms", "node"):
        ck, seconds = desk_train(setup, filled, kind, seed=args.seed, steps=args.steps)
        (args.out / f"{kind}.json").write_text(ck.to_json())
        rep = desk_report(setup, raw, ck.model(), kind)
        rep["seconds"] = seconds
        summary[kind] = rep
        print(kind, json.dumps(rep))
    if "node" in summary:
        summary["drift_ratio"] = summary["node"]["exact_drift"] / max(summary["nms"]["exact_drift"], 1e-300)
        print(f"exact-energy drift ratio node/nms: {summary['drift_ratio']:.3g}")
    (args.out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")


if __name__ == "__main__":
    main()
