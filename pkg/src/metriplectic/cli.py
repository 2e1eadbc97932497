"""Command-line entry point: gen, train, eval, rollout, check, scaling.

Configuration comes from a TOML file with dotted keys (``train.lr = 0.01``)
and every key can be overridden by the flag of the same name
(``--train.lr 0.005``).  Set METRIPLECTIC_LOG to change log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .brackets import MetriplecticModel, NondegeneracyError, degeneracy_residuals, jacobi_residual
from .metrics import LOSS_CONVENTION, evaluate, scaling_table
from .nets import NETWORKS, ModelConfig
from .odeint import ODEError, SolverConfig, solve
from .systems import (
    Dataset,
    DomainError,
    generate_dataset,
    get_system,
    temporal_split,
    trajectory_split,
)
from .training import Checkpoint, NodeModel, TrainConfig, TrainingError, init_unobserved_linear, train

log = logging.getLogger("metriplectic")


class CliError(Exception):
    """Validation failure reported with exit code 1."""


# run configuration --------------------------------------------------------------


@dataclass
class ModelSection:
    kind: str = "nms"
    r: int = 1
    r_prime: int = 0          # 0 means r_prime = r
    hidden: list = field(default_factory=lambda: [5])
    node_hidden: list = field(default_factory=lambda: [30, 30])
    cholesky_mode: bool = True
    hamiltonian_mode: bool = False


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)

    @staticmethod
    def keys() -> dict[str, object]:
        """Dotted key -> default value."""
        out = {}
        defaults = RunConfig()
        for sec in ("model", "train", "solver"):
            for f in fields(getattr(defaults, sec)):
                if sec == "train" and f.name == "solver":
                    continue
                out[f"{sec}.{f.name}"] = getattr(getattr(defaults, sec), f.name)
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        known = cls.keys()
        unknown = sorted(set(flat) - set(known))
        if unknown:
            raise CliError(f"unknown configuration keys: {', '.join(unknown)}")
        parts = {"model": {}, "train": {}, "solver": {}}
        for key, val in flat.items():
            sec, name = key.split(".", 1)
            parts[sec][name] = val
        solver = SolverConfig(**parts["solver"])
        return cls(ModelSection(**parts["model"]), TrainConfig(**parts["train"], solver=solver), solver)

    def model_config(self, n: int) -> ModelConfig:
        m = self.model
        return ModelConfig(n=n, r=m.r, r_prime=m.r_prime or None,
                           hidden={k: tuple(m.hidden) for k in NETWORKS},
                           cholesky_mode=m.cholesky_mode, hamiltonian_mode=m.hamiltonian_mode)


def _flatten(doc: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _parse_value(text: str, default):
    if isinstance(default, bool):
        low = text.lower()
        if low not in ("true", "false", "1", "0"):
            raise CliError(f"expected a boolean, got {text!r}")
        return low in ("true", "1")
    if isinstance(default, list):
        return [int(v) for v in text.split(",") if v]
    if default is None:
        return float(text)
    return type(default)(text)


def add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML file with dotted keys")
    g = p.add_argument_group("configuration overrides")
    for key, default in RunConfig.keys().items():
        g.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="FLOAT" if default is None else type(default).__name__.upper(),
                       help=f"default {default}")


def load_run_config(args) -> RunConfig:
    flat = {}
    if args.config is not None:
        with open(args.config, "rb") as fh:
            flat = _flatten(tomllib.load(fh))
    known = RunConfig.keys()
    for key, default in known.items():
        val = getattr(args, f"cfg:{key}", None)
        if val is not None:
            flat[key] = _parse_value(val, default)
    if getattr(args, "seed", None) is not None:
        flat["train.seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        flat["train.mode"] = args.mode
    if getattr(args, "model", None) is not None:
        flat["model.kind"] = args.model
    try:
        return RunConfig.from_flat(flat)
    except (TypeError, ValueError) as exc:
        raise CliError(str(exc)) from exc


# file formats -------------------------------------------------------------------


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else _fmt(v) for v in row])


def _sidecar(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def _to_builtin(obj):
    if isinstance(obj, dict):
        return {k: _to_builtin(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_builtin(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _to_builtin(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def save_dataset(ds: Dataset, path: Path) -> None:
    n = ds.n
    multi = ds.n_traj > 1
    header = (["traj"] if multi else []) + ["t"] + [f"x{i}" for i in range(n)]
    rows = []
    for k in range(ds.n_traj):
        for j in range(ds.lengths[k]):
            row = [ds.times[j], *ds.states[k, j]]
            rows.append(([str(k)] if multi else []) + row)
    write_csv(path, header, rows)
    meta = {"system": ds.system, "split": ds.split, "observable": ds.observable.tolist(),
            "lengths": ds.lengths.tolist(), "constants": ds.constants}
    _sidecar(path).write_text(json.dumps(_to_builtin(meta), indent=1) + "\n")


def load_dataset(path: Path) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        body = [[float(v) for v in row] for row in reader if row]
    multi = header[0] == "traj"
    arr = np.array(body, dtype=np.float64).reshape(len(body), len(header))
    n = len(header) - (2 if multi else 1)
    side = _sidecar(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    if multi:
        ids = arr[:, 0].astype(int)
        n_traj = ids.max() + 1
        lengths = np.bincount(ids, minlength=n_traj)
        longest = int(np.argmax(lengths))
        times = arr[ids == longest, 1]
        states = np.zeros((n_traj, times.size, n))
        for k in range(n_traj):
            states[k, :lengths[k]] = arr[ids == k, 2:]
    else:
        times, states, lengths = arr[:, 0], arr[None, :, 1:], np.array([arr.shape[0]])
    split = meta.get("split")
    if split is None:
        split = (temporal_split(*(times[-1] * np.array([0.2, 0.3, 1.0]))) if not multi
                 else trajectory_split(states.shape[0]))
    return Dataset(meta.get("system", "unknown"), times, states,
                   meta.get("observable", [True] * n), split, lengths, meta.get("constants", {}))


def coordinate_names(system: str, n: int) -> list[str]:
    if system == "tgc":
        return ["q", "p", "S1", "S2"]
    if system == "tdp":
        return ["q1x", "q1y", "q2x", "q2y", "p1x", "p1y", "p2x", "p2y", "S1", "S2"]
    if system.startswith("dno") or system == "rod":
        d = (n - 1) // 2
        return [f"q{i}" for i in range(d)] + [f"p{i}" for i in range(d)] + ["S"]
    return [f"x{i}" for i in range(n)]


def parse_observe(text: str, system: str, n: int) -> np.ndarray:
    """Mask from comma tokens: indices, exact names or name stems such as q or S."""
    names = coordinate_names(system, n)
    mask = np.zeros(n, dtype=bool)
    for tok in (t.strip() for t in text.split(",")):
        if not tok:
            continue
        if tok.isdigit():
            if int(tok) >= n:
                raise CliError(f"coordinate index {tok} out of range for n={n}")
            mask[int(tok)] = True
            continue
        hits = [i for i, nm in enumerate(names) if nm == tok or nm.rstrip("0123456789xy") == tok]
        if not hits:
            raise CliError(f"no coordinate named {tok!r} (have {', '.join(names)})")
        mask[hits] = True
    if not mask.any():
        raise CliError("observation mask is empty")
    return mask


def load_checkpoint(path: Path) -> Checkpoint:
    try:
        return Checkpoint.from_json(Path(path).read_text())
    except (KeyError, json.JSONDecodeError) as exc:
        raise CliError(f"malformed checkpoint {path}: {exc}") from exc


def _floats(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",")], dtype=np.float64)


# commands -----------------------------------------------------------------------


def cmd_gen(args) -> int:
    consts = dict(_kv(c) for c in args.const or [])
    spec = get_system(args.system, **consts)
    if args.ic:
        ics = np.array([_floats(s) for s in args.ic])
    elif args.n_traj > 1:
        ics = spec.sample_states(np.random.default_rng(args.seed), args.n_traj)
    else:
        ics = spec.default_ic[None]
    if ics.shape[1] != spec.n:
        raise CliError(f"{args.system} expects initial conditions of length {spec.n}")
    split = None
    if args.split:
        kind, _, vals = args.split.partition(":")
        v = _floats(vals) if vals else None
        if kind == "temporal":
            split = temporal_split(*v)
        elif kind == "trajectory":
            split = trajectory_split(ics.shape[0], tuple(v) if v is not None else (0.8, 0.1, 0.1), args.seed)
        else:
            raise CliError("--split must be temporal:a,b,c or trajectory[:f_train,f_val,f_test]")
    ds = generate_dataset(spec, ics, args.dt, args.steps, split=split, stride=args.stride, seed=args.seed)
    save_dataset(ds, args.out)
    log.info("wrote %s (%d trajectories, %d snapshots)", args.out, ds.n_traj, ds.times.size)
    return 0


def _kv(text: str):
    k, sep, v = text.partition("=")
    if not sep:
        raise CliError(f"expected key=value, got {text!r}")
    return k, float(v)


def build_model(cfg: RunConfig, n: int):
    if cfg.model.kind == "nms":
        return MetriplecticModel(cfg.model_config(n), seed=cfg.train.seed)
    if cfg.model.kind == "node":
        return NodeModel(n, tuple(cfg.model.node_hidden), seed=cfg.train.seed)
    raise CliError(f"unknown model kind {cfg.model.kind!r}")


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    ds = load_dataset(args.data)
    if args.observe:
        ds.observable = parse_observe(args.observe, ds.system, ds.n)
    ds = init_unobserved_linear(ds)
    model = build_model(cfg, ds.n)
    ckpt = train(model, ds, cfg.train)
    args.out.write_text(ckpt.to_json())
    loss_path = args.loss_csv or args.out.with_suffix(".loss.csv")
    write_csv(loss_path, ["step", "loss", "val", "skipped", "failed", "seconds"],
              [[h[k] for k in ("step", "loss", "val", "skipped", "failed", "seconds")]
               for h in ckpt.history])
    print(f"best validation {ckpt.best_val:.6g} at step {ckpt.step}; wrote {args.out}")
    return 0


class ExactModel:
    """Ground-truth system exposed through the model interface."""

    kind = "exact"

    def __init__(self, spec):
        self.spec = spec
        self.n = spec.n

    def rhs(self, x, theta=None):
        return self.spec.rhs(x)


def cmd_eval(args) -> int:
    cfg = load_run_config(args)
    ds = load_dataset(args.data)
    if args.observe:
        ds.observable = parse_observe(args.observe, ds.system, ds.n)
    try:
        spec = get_system(ds.system, **ds.constants)
    except ValueError:
        spec = None
    if args.exact:
        if spec is None:
            raise CliError(f"dataset system {ds.system!r} has no closed form")
        model = ExactModel(spec)
    else:
        if args.ckpt is None:
            raise CliError("eval needs --ckpt or --exact")
        model = load_checkpoint(args.ckpt).model()
        if model.n != ds.n:
            raise CliError(f"checkpoint has n={model.n}, dataset has n={ds.n}")
        if not ds.observable.all():
            ds = init_unobserved_linear(ds)
    report, runs = evaluate(model, ds, args.segment, spec=spec, solver=cfg.solver, seed=cfg.train.seed)
    doc = {"convention": LOSS_CONVENTION, **_to_builtin(report.to_dict())}
    args.out.write_text(json.dumps(doc, indent=1) + "\n")
    if args.traj_dir is not None:
        write_eval_csvs(args.traj_dir, model, ds, runs)
    print(f"{args.segment}: mse {report.mse:.6g} mae {report.mae:.6g}")
    return 0


def write_eval_csvs(out_dir: Path, model, ds: Dataset, runs) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    names = coordinate_names(ds.system, ds.n)
    for i, name in enumerate(names):
        rows = [[str(k), ds.times[j], x[j, i], p[j, i]]
                for k, _, p, x, _ in runs for j in range(len(p))]
        write_csv(out_dir / f"{name}.csv", ["traj", "t", "truth", "prediction"], rows)
    if model.kind == "nms":
        rows = []
        for k, _, p, _, _ in runs:
            f = model.fields(p)
            sdot = np.sum(np.asarray(f.gS) * model.rhs(p), axis=-1)
            rows += [[str(k), ds.times[j], f.E[j], f.S[j], sdot[j]] for j in range(len(p))]
        write_csv(out_dir / "thermo.csv", ["traj", "t", "E", "S", "Sdot"], rows)


def cmd_rollout(args) -> int:
    cfg = load_run_config(args)
    model = load_checkpoint(args.ckpt).model()
    x0 = _floats(args.ic)
    if x0.size != model.n:
        raise CliError(f"initial condition has length {x0.size}, model expects {model.n}")
    if args.t_end <= 0 or args.dt_out <= 0:
        raise CliError("--t-end and --dt-out must be positive")
    times = np.linspace(0.0, args.t_end, int(round(args.t_end / args.dt_out)) + 1)
    traj = solve(lambda t, x: model.rhs(x), x0, times, cfg.solver)
    write_csv(args.out, ["t"] + [f"x{i}" for i in range(model.n)],
              [[t, *x] for t, x in zip(traj.times, traj.states)])
    return 0


CHECK_TOL = {"skew_L": 1e-12, "sym_M": 1e-12, "L_gradS_rel": 1e-10, "M_gradE_rel": 1e-10,
             "min_eig_M_rel": -1e-10}


def cmd_check(args) -> int:
    cfg = load_run_config(args)
    if args.ckpt is not None:
        ck = load_checkpoint(args.ckpt)
        if ck.kind != "nms":
            raise CliError("check applies to metriplectic checkpoints only")
        model = ck.model()
    else:
        if args.n is None:
            raise CliError("check needs --ckpt or --n for a fresh model")
        model = MetriplecticModel(cfg.model_config(args.n), seed=args.seed)
    rng = np.random.default_rng(args.seed)
    xs = rng.standard_normal((args.n_states, model.n)) * args.scale
    worst = {k: (np.inf if k == "min_eig_M_rel" else 0.0) for k in CHECK_TOL}
    for x in xs:
        for k, v in degeneracy_residuals(model, x).items():
            worst[k] = min(worst[k], v) if k == "min_eig_M_rel" else max(worst[k], v)
    ok = True
    print(f"{'quantity':<16}{'worst':>14}{'tolerance':>12}  status")
    for k, tol in CHECK_TOL.items():
        good = worst[k] >= tol if k == "min_eig_M_rel" else worst[k] <= tol
        ok &= good
        print(f"{k:<16}{worst[k]:>14.3e}{tol:>12.0e}  {'ok' if good else 'FAIL'}")
    if model.n <= 12:
        jac = max(jacobi_residual(model, x) for x in xs[:min(5, len(xs))])
        print(f"{'jacobi':<16}{jac:>14.3e}{'n/a':>12}  (diagnostic)")
    return 0 if ok else 1


def cmd_scaling(args) -> int:
    n_list = sorted(int(v) for v in args.n_list.split(","))
    rows = scaling_table(n_list, r=args.r, trials=args.trials, seed=args.seed)
    keys = ["n", "nms", "gnode", "gfinn"] + (["rhs_seconds"] if args.trials > 0 else [])
    with open(args.out, "w", newline="") if args.out else _stdout() as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for row in rows:
            w.writerow([row[k] if isinstance(row[k], int) else _fmt(row[k]) for k in keys])
    return 0


class _stdout:
    def __enter__(self):
        return sys.stdout

    def __exit__(self, *exc):
        return False


# parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metriplectic", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="simulate a benchmark system to CSV")
    g.add_argument("--system", required=True)
    g.add_argument("--dt", type=float, default=0.001)
    g.add_argument("--steps", type=int, default=1000)
    g.add_argument("--stride", type=int, default=1)
    g.add_argument("--ic", action="append", help="comma-separated initial state (repeatable)")
    g.add_argument("--n-traj", type=int, default=1, help="sample this many initial states")
    g.add_argument("--split", help="temporal:t_train,t_val,t_test or trajectory[:f_train,f_val,f_test]")
    g.add_argument("--const", action="append", help="system constant key=value")
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="fit a model to a dataset")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--mode", choices=["windowed", "origin"])
    t.add_argument("--model", choices=["nms", "node"])
    t.add_argument("--observe", help="observed coordinates, e.g. q,p")
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--loss-csv", type=Path)
    add_config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="roll out a checkpoint and score it")
    e.add_argument("--data", type=Path, required=True)
    src = e.add_mutually_exclusive_group()
    src.add_argument("--ckpt", type=Path)
    src.add_argument("--exact", action="store_true", help="evaluate the closed-form system")
    e.add_argument("--segment", default="test", choices=["train", "val", "test", "all"])
    e.add_argument("--observe")
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--traj-dir", type=Path)
    add_config_flags(e)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rollout", help="integrate a checkpoint from an initial state")
    r.add_argument("--ckpt", type=Path, required=True)
    r.add_argument("--ic", required=True)
    r.add_argument("--t-end", type=float, required=True)
    r.add_argument("--dt-out", type=float, default=0.01)
    r.add_argument("--out", type=Path, required=True)
    add_config_flags(r)
    r.set_defaults(func=cmd_rollout)

    c = sub.add_parser("check", help="structural audit of a metriplectic model")
    c.add_argument("--ckpt", type=Path)
    c.add_argument("--n", type=int, help="state dimension of a fresh model")
    c.add_argument("--n-states", type=int, default=20)
    c.add_argument("--scale", type=float, default=1.0)
    add_config_flags(c)
    c.set_defaults(func=cmd_check)

    s = sub.add_parser("scaling", help="parameter counts and rhs wall time versus n")
    s.add_argument("--n-list", default="10,20,30,50")
    s.add_argument("--r", type=int, default=1)
    s.add_argument("--trials", type=int, default=1000)
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_scaling)

    for sp in (g, t, e, r, c, s):
        sp.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("METRIPLECTIC_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ODEError, FloatingPointError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 2
    except (CliError, ValueError, KeyError, TrainingError, DomainError, NondegeneracyError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
