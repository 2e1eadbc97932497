"""Explicit Runge-Kutta integrators that also run on tape variables.

``f(t, x)`` may return arrays or tape Vars.  Step-size control always looks
at detached values, so the recorded graph contains only the accepted steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tape as T


class ODEError(RuntimeError):
    """Integration failed (non-finite stage or step-size underflow)."""


class StiffnessError(ODEError):
    """The adaptive solver exceeded its step budget."""


@dataclass
class SolverConfig:
    method: str = "dopri5"
    dt: float = 0.001
    rtol: float = 1e-7
    atol: float = 1e-9
    max_steps: int = 1_000_000
    first_step: float | None = None

    def __post_init__(self):
        if self.method not in ("rk4", "dopri5"):
            raise ValueError(f"unknown method {self.method!r}")
        if not (self.rtol > 0 and self.atol > 0 and self.dt > 0):
            raise ValueError("rtol, atol and dt must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.shape[0] != self.times.shape[0]:
            raise ValueError("one state row per time is required")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")


@dataclass
class RecordedTrajectory:
    """Integrator output whose states are (possibly) tape variables."""

    times: np.ndarray
    states: list
    stats: dict = field(default_factory=dict)

    def stacked(self):
        return T.stack(self.states, axis=0)

    def detach(self) -> Trajectory:
        return Trajectory(self.times, np.stack([T.value(s) for s in self.states]), self.stats)


def _finite(stage: int, k) -> None:
    if not np.all(np.isfinite(T.value(k))):
        raise ODEError(f"non-finite right-hand side at stage {stage}")


def _combine(x, h: float, coeffs, ks):
    """x + h * sum_i coeffs[i] * ks[i] with one stack/matmul on the tape."""
    pairs = [(c, k) for c, k in zip(coeffs, ks) if c != 0.0]
    if not pairs:
        return x
    if not any(isinstance(k, T.Var) for _, k in pairs):
        acc = np.zeros_like(T.value(pairs[0][1]))
        for c, k in pairs:
            acc = acc + c * k
        return T.add(x, h * acc)
    cs = np.array([h * c for c, _ in pairs])
    stacked = T.stack([k for _, k in pairs], axis=-1)
    return T.add(x, T.matmul(stacked, cs))


def rk4_step(f: Callable, t: float, x, dt: float):
    k1 = f(t, x)
    _finite(1, k1)
    k2 = f(t + dt / 2, _combine(x, dt, [0.5], [k1]))
    _finite(2, k2)
    k3 = f(t + dt / 2, _combine(x, dt, [0.5], [k2]))
    _finite(3, k3)
    k4 = f(t + dt, _combine(x, dt, [1.0], [k3]))
    _finite(4, k4)
    return _combine(x, dt, [1 / 6, 1 / 3, 1 / 3, 1 / 6], [k1, k2, k3, k4])


def rk4_solve(f: Callable, x0, dt: float, steps: int, t0: float = 0.0) -> Trajectory:
    x = np.asarray(x0, dtype=np.float64)
    out = [x]
    for i in range(steps):
        x = rk4_step(f, t0 + i * dt, x, dt)
        out.append(x)
    return Trajectory(t0 + dt * np.arange(steps + 1), np.stack(out))


# Dormand-Prince 5(4) ------------------------------------------------------------

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# fifth-order minus embedded fourth-order weights
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])
# continuous extension: y(t + s h) = y + h * sum_i k_i * (P[i] @ [s, s^2, s^3, s^4])
_P = np.array([
    [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0
_BETA = 0.04
_EXPO = 0.2 - 0.75 * _BETA


def _rms(v: np.ndarray) -> float:
    return float(np.sqrt(np.mean(v * v)))


def _initial_step(f, t0, x0, k0, cfg: SolverConfig) -> float:
    x0 = T.value(x0)
    f0 = T.value(k0)
    scale = cfg.atol + cfg.rtol * np.abs(x0)
    d0, d1 = _rms(x0 / scale), _rms(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    f1 = T.value(f(t0 + h0, x0 + h0 * f0))
    d2 = _rms((f1 - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1)


def _integrate(f: Callable, x0, t_eval, cfg: SolverConfig) -> RecordedTrajectory:
    t_eval = np.asarray(t_eval, dtype=np.float64).ravel()
    if t_eval.size == 0:
        raise ValueError("t_eval must be nonempty")
    if np.any(np.diff(t_eval) < 0):
        raise ValueError("t_eval must be sorted")
    t = float(t_eval[0])
    t_end = float(t_eval[-1])
    x = x0
    out = [x0]
    idx = 1
    while idx < t_eval.size and t_eval[idx] <= t:
        out.append(x)
        idx += 1
    stats = {"steps": 0, "rejected": 0, "nfev": 0}
    if idx == t_eval.size:
        return RecordedTrajectory(t_eval, out, stats)

    k1 = f(t, x)
    stats["nfev"] += 1
    _finite(1, k1)
    h = cfg.first_step or _initial_step(f, t, x, k1, cfg)
    h = min(h, t_end - t)
    facold = 1e-4
    rejected_last = False
    attempts = 0
    while idx < t_eval.size:
        if h <= 1e-14 * max(abs(t), 1e-300):
            raise ODEError(f"step size underflow at t={t:.6g} (h={h:.3e})")
        attempts += 1
        if attempts > cfg.max_steps:
            raise StiffnessError(f"exceeded max_steps={cfg.max_steps} at t={t:.6g}")
        ks = [k1]
        for i in range(1, 7):
            xi = _combine(x, h, _A[i], ks)
            ki = f(t + _C[i] * h, xi)
            stats["nfev"] += 1
            _finite(i + 1, ki)
            ks.append(ki)
        x_new = xi  # the last stage is evaluated at the fifth-order solution
        kv = [T.value(k) for k in ks]
        err_vec = h * sum(e * k for e, k in zip(_E, kv) if e != 0.0)
        xo, xn = T.value(x), T.value(x_new)
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(xo), np.abs(xn))
        err = _rms(err_vec / scale)

        if err <= 1.0:
            stats["steps"] += 1
            t_new = t + h
            if t_end - t_new <= 1e-12 * max(1.0, abs(t_end)):
                t_new = t_end
            while idx < t_eval.size and t_eval[idx] <= t_new:
                te = t_eval[idx]
                if te == t_new:
                    out.append(x_new)
                else:
                    s = (te - t) / h
                    powers = np.array([s, s * s, s ** 3, s ** 4])
                    out.append(_combine(x, h, _P @ powers, ks))
                idx += 1
            if err == 0.0:
                factor = MAX_FACTOR
            else:
                factor = SAFETY * err ** (-_EXPO) * facold ** _BETA
                factor = min(MAX_FACTOR, max(MIN_FACTOR, factor))
            if rejected_last:
                factor = min(factor, 1.0)
            facold = max(err, 1e-4)
            rejected_last = False
            t, x, k1 = t_new, x_new, ks[-1]
        else:
            stats["rejected"] += 1
            factor = max(MIN_FACTOR, SAFETY * err ** (-_EXPO))
            rejected_last = True
        h = min(h * factor, t_end - t) if t < t_end else h
    return RecordedTrajectory(t_eval, out, stats)


def dopri5_solve(f: Callable, x0, t_eval, cfg: SolverConfig | None = None) -> Trajectory:
    """Adaptive Dormand-Prince solve, states reported at ``t_eval``."""
    cfg = cfg or SolverConfig()
    x0 = np.asarray(x0, dtype=np.float64)
    rec = _integrate(f, x0, t_eval, cfg)
    return rec.detach()


def integrate_recorded(f: Callable, x0, t_eval, cfg: SolverConfig | None = None) -> RecordedTrajectory:
    """Same numerics as :func:`dopri5_solve`, keeping the tape graph of accepted steps."""
    return _integrate(f, x0, t_eval, cfg or SolverConfig())


def solve(f: Callable, x0, t_eval, cfg: SolverConfig) -> Trajectory:
    """Dispatch on ``cfg.method``; rk4 steps at ``cfg.dt`` and samples ``t_eval`` exactly."""
    if cfg.method == "dopri5":
        return dopri5_solve(f, x0, t_eval, cfg)
    t_eval = np.asarray(t_eval, dtype=np.float64)
    x = np.asarray(x0, dtype=np.float64)
    out = [x]
    t = t_eval[0]
    for te in t_eval[1:]:
        nsub = max(1, int(round((te - t) / cfg.dt)))
        h = (te - t) / nsub
        for _ in range(nsub):
            x = rk4_step(f, t, x, h)
            t += h
        t = te
        out.append(x)
    return Trajectory(t_eval, np.stack(out))
