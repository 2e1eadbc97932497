"""Training loops, Adamax, the NODE baseline and checkpoints.

Rollouts assume autonomous dynamics, so every window is integrated on a
relative time grid starting at zero.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tape as T
from .brackets import MetriplecticModel, NondegeneracyError
from .nets import ModelConfig, glorot_uniform, mlp_apply, mlp_param_count
from .odeint import ODEError, SolverConfig, dopri5_solve, integrate_recorded
from .systems import Dataset

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ROLLOUT_ERRORS = (ODEError, NondegeneracyError, T.TapeError, FloatingPointError)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "windowed"
    steps: int = 30000
    batch_size: int = 8
    rollout_length: int = 3
    max_offset: int = 10
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    val_every: int = 100
    loss: str = "mse"
    fill_weight: float = 0.0  # loss weight on filled (unobserved) coordinates
    select: str = "best_val"  # or "last": keep the final parameters
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.mode not in ("windowed", "origin"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.loss not in ("mse", "mae"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.rollout_length < 1 or self.batch_size < 1:
            raise ValueError("rollout_length and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.mode == "windowed" and self.rollout_length > self.max_offset:
            raise ValueError("rollout_length cannot exceed max_offset (offsets are distinct)")
        if self.select not in ("best_val", "last"):
            raise ValueError(f"unknown selection rule {self.select!r}")
        if self.fill_weight < 0:
            raise ValueError("fill_weight must be nonnegative")
        if self.steps < 0 or self.val_every < 1:
            raise ValueError("steps must be >= 0 and val_every >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# unobserved-state initialization ------------------------------------------------


def init_unobserved_linear(dataset: Dataset, observable=None, horizon: float | None = None) -> Dataset:
    """Fill unobserved columns with the line from 0 at t=0 to 1 at t=horizon.

    ``horizon`` defaults to t_train for a temporal split and to each
    trajectory's final time otherwise.
    """
    mask = dataset.observable if observable is None else np.asarray(observable, dtype=bool)
    out = copy.deepcopy(dataset)
    out.observable = mask.copy()
    hidden = np.flatnonzero(~mask)
    if hidden.size == 0:
        return out
    for k in range(out.n_traj):
        if horizon is not None:
            T_end = horizon
        elif out.split["kind"] == "temporal":
            T_end = out.split["t_train"]
        else:
            T_end = out.times[out.lengths[k] - 1]
        if T_end <= 0:
            raise ValueError("straight-line fill needs a positive horizon")
        line = out.times / T_end
        out.states[k][:, hidden] = line[:, None]
    return out


# optimizer ------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: np.ndarray
    u: np.ndarray
    t: int = 0
    skipped: int = 0

    @classmethod
    def zeros(cls, size: int) -> "OptimizerState":
        return cls(np.zeros(size), np.zeros(size))


def adamax_step(state: OptimizerState, params: np.ndarray, grads: np.ndarray, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adamax update; returns new (state, params) and leaves inputs untouched."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and optimizer shapes disagree")
    if not np.all(np.isfinite(grads)):
        warnings.warn("non-finite gradient; update skipped", RuntimeWarning)
        return OptimizerState(state.m, state.u, state.t, state.skipped + 1), params
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grads
    u = np.maximum(beta2 * state.u, np.abs(grads))
    new = params - (lr / (1 - beta1 ** t)) * m / (u + eps)
    return OptimizerState(m, u, t, state.skipped), new


# NODE baseline -------------------------------------------------------------


class NodeModel:
    """Unstructured MLP vector field R^n -> R^n."""

    kind = "node"

    def __init__(self, n: int, hidden=(30, 30), theta=None, seed: int = 0):
        self.widths = (int(n), *(int(h) for h in hidden), int(n))
        if theta is None:
            theta = glorot_uniform(np.random.default_rng(seed), self.widths)
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (mlp_param_count(self.widths),):
            raise ValueError(f"NODE with widths {self.widths} needs {mlp_param_count(self.widths)} parameters")
        self.theta = theta

    @property
    def n(self) -> int:
        return self.widths[0]

    @property
    def num_params(self) -> int:
        return self.theta.size

    @property
    def config_dict(self) -> dict:
        return {"n": self.n, "hidden": list(self.widths[1:-1])}

    def rhs(self, x, theta=None):
        return node_baseline_rhs(self, x, theta)

    def __call__(self, t, x, theta=None):
        return node_baseline_rhs(self, x, theta)


def node_baseline_rhs(model: NodeModel, x, theta=None):
    return mlp_apply(model.theta if theta is None else theta, model.widths, x)


def model_config_dict(model) -> dict:
    return model.config.to_dict() if model.kind == "nms" else model.config_dict


def clone_with(model, theta: np.ndarray):
    if model.kind == "nms":
        return MetriplecticModel(model.config, theta.copy())
    return NodeModel(model.n, model.widths[1:-1], theta.copy())


# checkpoints ---------------------------------------------------------------


def _finite_or_none(v):
    return float(v) if v is not None and np.isfinite(v) else None


@dataclass
class Checkpoint:
    kind: str
    config: dict
    theta: np.ndarray
    seed: int = 0
    step: int = 0
    best_val: float | None = None
    config_hash: str = ""
    system: str | None = None
    observable: list | None = None
    train_config: dict | None = None
    history: list = field(default_factory=list, repr=False)

    def parameter_blocks(self) -> dict[str, list[float]]:
        if self.kind == "nms":
            cfg = ModelConfig.from_dict(self.config)
            return {k: self.theta[s].tolist() for k, s in cfg.offsets().items()}
        return {"mlp": self.theta.tolist()}

    def to_json(self) -> str:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "kind": self.kind,
            "config": self.config,
            "parameters": self.parameter_blocks(),
            "provenance": {
                "seed": self.seed, "step": self.step, "best_val": _finite_or_none(self.best_val),
                "config_hash": self.config_hash, "system": self.system,
                "observable": self.observable, "train_config": self.train_config,
            },
        }
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Checkpoint":
        doc = json.loads(text)
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported checkpoint schema {doc.get('schema_version')!r}")
        kind = doc["kind"]
        blocks = doc["parameters"]
        if kind == "nms":
            cfg = ModelConfig.from_dict(doc["config"])
            theta = np.concatenate([np.asarray(blocks[k], dtype=np.float64) for k in cfg.offsets()])
            expected = cfg.num_params
        elif kind == "node":
            theta = np.asarray(blocks["mlp"], dtype=np.float64)
            c = doc["config"]
            expected = mlp_param_count((c["n"], *c["hidden"], c["n"]))
        else:
            raise ValueError(f"unknown model kind {kind!r}")
        if theta.size != expected:
            raise ValueError(f"checkpoint holds {theta.size} parameters, config needs {expected}")
        prov = doc["provenance"]
        return cls(kind=kind, config=doc["config"], theta=theta, seed=prov["seed"],
                   step=prov["step"], best_val=prov["best_val"], config_hash=prov["config_hash"],
                   system=prov["system"], observable=prov["observable"],
                   train_config=prov["train_config"])

    def model(self):
        if self.kind == "nms":
            return MetriplecticModel(ModelConfig.from_dict(self.config), self.theta.copy())
        return NodeModel(self.config["n"], self.config["hidden"], self.theta.copy())


def config_hash(*parts: dict) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def make_checkpoint(model, cfg: TrainConfig, step: int, best_val, dataset: Dataset | None,
                    history=None) -> Checkpoint:
    mcfg = model_config_dict(model)
    tcfg = cfg.to_dict()
    return Checkpoint(
        kind=model.kind, config=mcfg, theta=model.theta.copy(), seed=cfg.seed, step=step,
        best_val=best_val, config_hash=config_hash(mcfg, tcfg),
        system=dataset.system if dataset is not None else None,
        observable=dataset.observable.tolist() if dataset is not None else None,
        train_config=tcfg, history=list(history or []),
    )


# losses and rollouts -----------------------------------------------------------


def _pointwise(diff, kind: str):
    return T.square(diff) if kind == "mse" else T.sqrt(T.add(T.square(diff), 1e-24))


def rollout(model, x0, times, solver: SolverConfig | None = None) -> np.ndarray:
    """Detached rollout of a model from x0 on the given times."""
    solver = solver or SolverConfig()
    return dopri5_solve(lambda t, x: model.rhs(x), x0, times, solver).states


def trajectory_loss(pred: np.ndarray, target: np.ndarray, observable, kind: str = "mse") -> float:
    mask = np.asarray(observable, dtype=bool)
    d = pred[..., mask] - target[..., mask]
    return float(np.mean(d * d) if kind == "mse" else np.mean(np.abs(d)))


class _Sampler:
    """Draws training windows from a dataset."""

    def __init__(self, dataset: Dataset, cfg: TrainConfig, rng: np.random.Generator):
        self.ds, self.cfg, self.rng = dataset, cfg, rng
        if dataset.split["kind"] == "temporal":
            train_idx = dataset.segment("train")
            self.trajs = [0]
            self.last = {0: int(train_idx[-1])}
        else:
            self.trajs = list(dataset.segment("train"))
            self.last = {k: int(dataset.lengths[k] - 1) for k in self.trajs}
        if cfg.mode == "windowed":
            self.n_max = cfg.max_offset
            usable = [k for k in self.trajs if self.last[k] >= self.n_max]
            if not usable:
                raise TrainingError(f"no training trajectory is longer than max_offset={self.n_max}")
            self.trajs = usable
        else:
            short = min(self.last[k] for k in self.trajs)
            if short < cfg.rollout_length:
                raise TrainingError("rollout_length exceeds the training segment")

    def draw(self):
        """(x0 batch, eval offsets, per-element offsets, targets) for one step."""
        cfg, ds = self.cfg, self.ds
        ks = self.rng.choice(self.trajs, size=cfg.batch_size)
        if cfg.mode == "windowed":
            starts = np.array([self.rng.integers(0, self.last[k] - self.n_max + 1) for k in ks])
            offsets = [np.sort(self.rng.choice(self.n_max, cfg.rollout_length, replace=False) + 1)
                       for _ in ks]
        else:
            starts = np.zeros(len(ks), dtype=int)
            offsets = [np.arange(1, cfg.rollout_length + 1) for _ in ks]
        x0 = ds.states[ks, starts]
        targets = [ds.states[k, s + o] for k, s, o in zip(ks, starts, offsets)]
        return x0, offsets, targets


def _batch_loss(model, theta, x0, offsets, targets, dt, mask, cfg: TrainConfig):
    """Loss of one batch on the tape; raises on solver failure."""
    union = np.unique(np.concatenate(offsets))
    t_eval = np.concatenate([[0.0], union * dt])
    rec = integrate_recorded(lambda t, x: model.rhs(x, theta), x0, t_eval, cfg.solver)
    pred = rec.stacked()  # (n_eval, B, n)
    nb = x0.shape[0]
    pos = {o: i + 1 for i, o in enumerate(union)}
    target = np.zeros(T.value(pred).shape)
    weight = np.zeros(T.value(pred).shape)
    coord = np.where(mask, 1.0, cfg.fill_weight)
    coord /= coord.sum()
    for b in range(nb):
        for o, tgt in zip(offsets[b], targets[b]):
            target[pos[o], b] = tgt
            weight[pos[o], b] = coord / (len(offsets[b]) * nb)
    err = _pointwise(T.sub(pred, target), cfg.loss)
    return T.vsum(T.mul(err, weight)), rec.stats


def batch_loss_and_grad(model, x0, offsets, targets, dt, mask, cfg: TrainConfig):
    """Loss and parameter gradient, skipping batch elements whose rollout fails."""
    tape = T.Tape()
    theta = tape.var(model.theta)
    try:
        loss, stats = _batch_loss(model, theta, x0, offsets, targets, dt, mask, cfg)
        tape.backward(loss)
        return float(loss.value), theta.grad.copy(), 0, tape.saturations
    except ROLLOUT_ERRORS:
        pass
    # fall back to element-wise solves and drop the failures
    total, grad, kept, failed, sat = 0.0, np.zeros_like(model.theta), 0, 0, 0
    for b in range(x0.shape[0]):
        tape = T.Tape()
        theta = tape.var(model.theta)
        try:
            loss, _ = _batch_loss(model, theta, x0[b:b + 1], offsets[b:b + 1],
                                  targets[b:b + 1], dt, mask, cfg)
            tape.backward(loss)
        except ROLLOUT_ERRORS as exc:
            warnings.warn(f"rollout of batch element {b} failed: {exc}", RuntimeWarning)
            failed += 1
            continue
        total += float(loss.value)
        grad += theta.grad
        kept += 1
        sat += tape.saturations
    if kept == 0:
        raise TrainingError("every rollout in the batch failed")
    return total / kept, grad / kept, failed, sat


def validation_loss(model, dataset: Dataset, cfg: TrainConfig) -> float:
    """Full-rollout loss on the validation segment (inf if the rollout fails)."""
    mask = dataset.observable
    try:
        if dataset.split["kind"] == "temporal":
            val = dataset.segment("val")
            if val.size == 0:
                val = dataset.segment("train")
            last = int(val[-1])
            pred = rollout(model, dataset.states[0, 0], dataset.times[:last + 1], cfg.solver)
            return trajectory_loss(pred[val], dataset.states[0, val], mask, cfg.loss)
        losses = []
        for k in dataset.segment("val"):
            n_t = dataset.lengths[k]
            pred = rollout(model, dataset.states[k, 0], dataset.times[:n_t], cfg.solver)
            losses.append(trajectory_loss(pred, dataset.states[k, :n_t], mask, cfg.loss))
        return float(np.mean(losses)) if losses else float("nan")
    except ROLLOUT_ERRORS as exc:
        log.warning("validation rollout failed: %s", exc)
        return float("inf")


def train(model, dataset: Dataset, cfg: TrainConfig, callback=None) -> Checkpoint:
    """Fit ``model`` (NMS or NODE) to ``dataset`` and return the best checkpoint.

    Unobserved columns of ``dataset`` must already be filled (see
    :func:`init_unobserved_linear`); the loss only sees observed columns.
    """
    if dataset.n != model.n:
        raise ValueError(f"dataset has n={dataset.n}, model has n={model.n}")
    if not np.all(np.isfinite(dataset.states[:, :dataset.lengths.min()])):
        raise ValueError("dataset contains non-finite values (fill unobserved columns first)")
    rng = np.random.default_rng(cfg.seed)
    mask = dataset.observable
    work = clone_with(model, model.theta)
    opt = OptimizerState.zeros(work.theta.size)
    best_theta = work.theta.copy()
    best_val = validation_loss(work, dataset, cfg)
    best_step = 0
    history = [{"step": 0, "loss": float("nan"), "val": best_val, "skipped": 0, "failed": 0,
                "seconds": 0.0}]
    if cfg.steps == 0:
        return make_checkpoint(work, cfg, 0, best_val, dataset, history)

    sampler = _Sampler(dataset, cfg, rng)
    dt = dataset.dt
    start = time.perf_counter()
    failed_total = 0
    saturations = 0
    for step in range(1, cfg.steps + 1):
        x0, offsets, targets = sampler.draw()
        loss, grads, failed, sat = batch_loss_and_grad(work, x0, offsets, targets, dt, mask, cfg)
        failed_total += failed
        saturations += sat
        opt, work.theta = adamax_step(opt, work.theta, grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        record = {"step": step, "loss": loss, "val": float("nan"), "skipped": opt.skipped,
                  "failed": failed_total, "seconds": time.perf_counter() - start}
        if step % cfg.val_every == 0 or step == cfg.steps:
            val = validation_loss(work, dataset, cfg)
            record["val"] = val
            if val < best_val or not np.isfinite(best_val):
                best_val, best_theta, best_step = val, work.theta.copy(), step
            log.info("step %d loss %.3e val %.3e (best %.3e @ %d)", step, loss, val, best_val, best_step)
        history.append(record)
        if callback is not None:
            callback(step, work)
    if saturations:
        log.warning("%d activation inputs were clamped during training", saturations)
    if cfg.select == "last":
        best_theta, best_step, best_val = work.theta, cfg.steps, history[-1]["val"]
    best = clone_with(model, best_theta)
    return make_checkpoint(best, cfg, best_step, best_val, dataset, history)
