"""Error metrics, thermodynamic diagnostics, parameter counts and probes.

MSE is the mean of squared errors over time steps and (masked) components;
MAE is the mean absolute error with the same normalization.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from math import comb

import numpy as np

from . import tape as T
from .brackets import MetriplecticModel, degeneracy_residuals
from .nets import ModelConfig
from .odeint import SolverConfig, dopri5_solve, solve
from .training import ROLLOUT_ERRORS, clone_with

LOSS_CONVENTION = "mse = mean over time and components of squared error; mae = mean absolute error"


def _masked_diff(a, b, mask):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"trajectory shapes differ: {a.shape} vs {b.shape}")
    d = a - b
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (a.shape[-1],):
            raise ValueError("mask length must equal the state dimension")
        d = d[..., mask]
    return d


def mse(a, b, mask=None) -> float:
    d = _masked_diff(a, b, mask)
    return float(np.mean(d * d))


def mae(a, b, mask=None) -> float:
    return float(np.mean(np.abs(_masked_diff(a, b, mask))))


# parameter counts ---------------------------------------------------------------

ARCHITECTURES = ("nms", "gnode", "gfinn")


def param_count(architecture: str, n: int, r: int) -> int:
    """Number of learnable scalar functions (not raw weights) of each architecture."""
    if not 1 <= r <= n:
        raise ValueError(f"need 1 <= r <= n, got n={n}, r={r}")
    if architecture == "nms":
        return ((n + r) ** 2 - (n - r)) // 2 + 2
    if architecture == "gnode":
        return comb(n, 3) + r * comb(n, 2) + comb(r + 1, 2) + 2
    if architecture == "gfinn":
        return r * n * (n - 1) + r * r + 2
    raise ValueError(f"unknown architecture {architecture!r}")


def loglog_slope(ns, values) -> float:
    return float(np.polyfit(np.log(ns), np.log(values), 1)[0])


def scaling_table(n_list, r: int = 1, trials: int = 1000, hidden: int = 5, seed: int = 0) -> list[dict]:
    """Counts per architecture plus the median wall time of one NMS rhs evaluation."""
    n_list = [int(n) for n in n_list]
    if n_list != sorted(n_list):
        raise ValueError("n_list must be sorted")
    rng = np.random.default_rng(seed)
    rows = []
    for n in n_list:
        row = {"n": n, **{a: param_count(a, n, min(r, n)) for a in ARCHITECTURES}}
        if trials > 0:
            cfg = ModelConfig(n=n, r=min(r, n), hidden={k: (hidden,) for k in "ABKES"})
            model = MetriplecticModel(cfg, seed=seed)
            xs = rng.standard_normal((trials, n))
            times = np.empty(trials)
            for i, x in enumerate(xs):
                t0 = time.perf_counter()
                model.rhs(x)
                times[i] = time.perf_counter() - t0
            row["rhs_seconds"] = float(np.median(times))
        rows.append(row)
    return rows


# conservation -------------------------------------------------------------------


@dataclass
class Conservation:
    energy_drift: float
    entropy_violation: float
    sdot: np.ndarray


def conservation_report(E, S, traj, rhs=None, grad_S=None) -> Conservation:
    """Energy drift, worst entropy decrement and the Sdot series along ``traj``.

    ``E`` and ``S`` map a batch of states to values.  Sdot uses
    grad S . rhs when ``rhs`` is given (gradient by reverse mode unless
    ``grad_S`` is supplied) and is empty otherwise.
    """
    traj = np.atleast_2d(np.asarray(traj, dtype=np.float64))
    e = np.asarray(E(traj), dtype=np.float64)
    s = np.asarray(S(traj), dtype=np.float64)
    drift = float(np.max(np.abs(e - e[0])))
    violation = float(min(0.0, np.min(np.diff(s)))) if s.size > 1 else 0.0
    if rhs is None:
        sdot = np.zeros(0)
    else:
        gs = grad_S(traj) if grad_S is not None else T.batch_grad(S, traj)[1]
        sdot = np.sum(gs * np.asarray(rhs(traj)), axis=-1)
    return Conservation(drift, violation, sdot)


def model_conservation(model: MetriplecticModel, traj) -> Conservation:
    """Conservation report of a learned model against its own energy and entropy."""
    traj = np.atleast_2d(np.asarray(traj, dtype=np.float64))
    f = model.fields(traj)
    return conservation_report(lambda x: f.E, lambda x: f.S, traj, model.rhs, lambda x: f.gS)


def substitute_hidden(pred, truth, observable) -> np.ndarray:
    """Prediction with unobserved columns replaced by ground truth."""
    out = np.array(pred, dtype=np.float64)
    hidden = ~np.asarray(observable, dtype=bool)
    out[..., hidden] = np.asarray(truth)[..., hidden]
    return out


def exact_energy_drift(spec, pred, truth, observable) -> float:
    """max_t |E(x~(t)) - E(x~(0))| under the true energy, hidden columns taken from truth."""
    e = spec.E(substitute_hidden(pred, truth, observable))
    return float(np.max(np.abs(e - e[0])))


# error growth -------------------------------------------------------------------


def l2_time_error(times, a, b) -> float:
    d2 = np.sum((np.asarray(a) - np.asarray(b)) ** 2, axis=-1)
    return float(np.sqrt(np.trapezoid(d2, times)))


def error_growth_probe(model, eps_list, horizon: float, x0, n_seeds: int = 10, n_points: int = 501,
                       solver: SolverConfig | None = None, seed: int = 0) -> list[dict]:
    """L2-in-time state error between a model and Gaussian perturbations of its parameters.

    For every seed the noise direction is drawn once and scaled by each
    epsilon, so ratios between scales isolate the dependence on epsilon.
    """
    eps_list = [float(e) for e in eps_list]
    if any(e < 0 for e in eps_list) or eps_list != sorted(eps_list):
        raise ValueError("eps_list must be nonnegative and ascending")
    solver = solver or SolverConfig()
    times = np.linspace(0.0, horizon, n_points)
    ref = dopri5_solve(lambda t, x: model.rhs(x), x0, times, solver).states
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_seeds, model.theta.size))
    rows = []
    for eps in eps_list:
        errs, failed = [], 0
        for d in dirs:
            noisy = clone_with(model, model.theta + eps * d)
            try:
                pred = dopri5_solve(lambda t, x: noisy.rhs(x), x0, times, solver).states
            except ROLLOUT_ERRORS:
                failed += 1
                errs.append(float("nan"))
                continue
            errs.append(l2_time_error(times, ref, pred))
        good = [e for e in errs if np.isfinite(e)]
        rows.append({"eps": eps, "error": float(np.mean(good)) if good else float("nan"),
                     "errors": errs, "failed": failed})
    return rows


# evaluation report --------------------------------------------------------------


@dataclass
class EvalReport:
    segment: str
    mse: float
    mae: float
    coord_mse: list
    energy_drift: float | None
    energy_drift_rel: float | None
    exact_energy_drift: float | None
    entropy_violation: float | None
    min_sdot: float | None
    degeneracy_max: dict = field(default_factory=dict)
    rollout_seconds: dict = field(default_factory=dict)
    convention: str = LOSS_CONVENTION

    def __post_init__(self):
        for k, v in asdict(self).items():
            if isinstance(v, float) and not np.isfinite(v):
                raise ValueError(f"report entry {k} is not finite")
        if self.mse < 0 or self.mae < 0:
            raise ValueError("errors must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


def _segment_rows(dataset, which: str):
    """[(traj index, time indices)] covered by a segment."""
    if dataset.split["kind"] == "temporal":
        if which == "all":
            return [(0, np.arange(dataset.lengths[0]))]
        return [(0, dataset.segment(which))]
    trajs = range(dataset.n_traj) if which == "all" else dataset.segment(which)
    return [(int(k), np.arange(dataset.lengths[k])) for k in trajs]


def predict(model, dataset, which: str = "test", solver: SolverConfig | None = None):
    """Rollouts from each trajectory's first snapshot; returns [(k, idx, pred, truth, seconds)]."""
    solver = solver or SolverConfig()
    out = []
    for k, idx in _segment_rows(dataset, which):
        if idx.size == 0:
            continue
        last = int(idx[-1])
        t0 = time.perf_counter()
        pred = solve(lambda t, x: model.rhs(x), dataset.states[k, 0],
                     dataset.times[:last + 1], solver).states
        out.append((k, idx, pred, dataset.states[k, :last + 1], time.perf_counter() - t0))
    if not out:
        raise ValueError(f"segment {which!r} is empty")
    return out


def evaluate(model, dataset, which: str = "test", spec=None, solver: SolverConfig | None = None,
             n_audit: int = 20, seed: int = 0) -> tuple[EvalReport, list]:
    """Roll out ``model`` over a dataset segment and collect the diagnostics."""
    mask = dataset.observable
    runs = predict(model, dataset, which, solver)
    P = np.concatenate([p[idx] for _, idx, p, _, _ in runs])
    X = np.concatenate([x[idx] for _, idx, _, x, _ in runs])
    d = (P - X)[:, mask]
    coord_mse = [float(v) for v in np.mean(d * d, axis=0)]

    drift = drift_rel = violation = min_sdot = exact = None
    degeneracy = {}
    if getattr(model, "kind", None) == "nms":
        reps = [model_conservation(model, p) for _, _, p, _, _ in runs]
        drift = max(r.energy_drift for r in reps)
        e0 = max(abs(float(model.energy(p[0]))) for _, _, p, _, _ in runs)
        drift_rel = drift / max(e0, 1e-300)
        violation = min(r.entropy_violation for r in reps)
        min_sdot = min(float(r.sdot.min()) for r in reps)
        rng = np.random.default_rng(seed)
        states = P[rng.choice(len(P), size=min(n_audit, len(P)), replace=False)]
        for x in states:
            for key, v in degeneracy_residuals(model, x).items():
                if key == "min_eig_M_rel":
                    degeneracy[key] = min(degeneracy.get(key, 0.0), v)
                else:
                    degeneracy[key] = max(degeneracy.get(key, 0.0), v)
    if spec is not None:
        exact = max(exact_energy_drift(spec, p, x, mask) for _, _, p, x, _ in runs)
    secs = [r[4] for r in runs]
    report = EvalReport(
        segment=which, mse=mse(P, X, mask), mae=mae(P, X, mask), coord_mse=coord_mse,
        energy_drift=drift, energy_drift_rel=drift_rel, exact_energy_drift=exact,
        entropy_violation=violation, min_sdot=min_sdot, degeneracy_max=degeneracy,
        rollout_seconds={"median": float(np.median(secs)), "total": float(np.sum(secs))},
    )
    return report, runs
