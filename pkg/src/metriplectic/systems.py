"""Closed-form metriplectic benchmark systems and dataset generation.

Every system is specified by its energy and entropy (written with tape
primitives) plus the matrix fields L(x), M(x).  Gradients always come from
the tape, so ``rhs = L grad E + M grad S`` is consistent by construction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tape as T
from .odeint import rk4_step

log = logging.getLogger(__name__)


class DomainError(ValueError):
    """State outside the physical domain of a system."""


@dataclass
class SystemSpec:
    name: str
    n: int
    energy: Callable
    entropy: Callable
    L_fn: Callable          # (x, gE, gS) -> (..., n, n)
    M_fn: Callable          # (x, gE, gS) -> (..., n, n)
    observable: np.ndarray
    constants: dict
    default_ic: np.ndarray
    valid: Callable = field(default=lambda x: np.ones(np.shape(x)[:-1], dtype=bool))
    sampler: Callable | None = None

    def _batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n:
            raise ValueError(f"{self.name}: state has length {x.shape[-1]}, expected {self.n}")
        return x

    def check_domain(self, x) -> None:
        ok = self.valid(self._batch(x))
        if not np.all(ok):
            raise DomainError(f"{self.name}: state outside the physical domain")

    def grad_E(self, x) -> np.ndarray:
        x = self._batch(x)
        return T.batch_grad(self.energy, x.reshape(-1, self.n))[1].reshape(x.shape)

    def grad_S(self, x) -> np.ndarray:
        x = self._batch(x)
        return T.batch_grad(self.entropy, x.reshape(-1, self.n))[1].reshape(x.shape)

    def E(self, x) -> np.ndarray:
        return np.asarray(self.energy(self._batch(x)))

    def S(self, x) -> np.ndarray:
        return np.asarray(self.entropy(self._batch(x)))

    def exact_L(self, x) -> np.ndarray:
        x = self._batch(x)
        return self.L_fn(x, self.grad_E(x), self.grad_S(x))

    def exact_M(self, x) -> np.ndarray:
        x = self._batch(x)
        return self.M_fn(x, self.grad_E(x), self.grad_S(x))

    def rhs(self, x) -> np.ndarray:
        x = self._batch(x)
        self.check_domain(x)
        gE, gS = self.grad_E(x), self.grad_S(x)
        L, M = self.L_fn(x, gE, gS), self.M_fn(x, gE, gS)
        return np.einsum("...ij,...j->...i", L, gE) + np.einsum("...ij,...j->...i", M, gS)

    def __call__(self, t, x):
        return self.rhs(x)

    def sample_states(self, rng: np.random.Generator, count: int) -> np.ndarray:
        if self.sampler is None:
            raise NotImplementedError(self.name)
        return self.sampler(rng, count)


def _canonical(n_pairs: int, n: int, batch_shape) -> np.ndarray:
    L = np.zeros((n, n))
    L[:n_pairs, n_pairs:2 * n_pairs] = np.eye(n_pairs)
    L[n_pairs:2 * n_pairs, :n_pairs] = -np.eye(n_pairs)
    return np.broadcast_to(L, tuple(batch_shape) + (n, n)).copy()


def _col(x, i):
    return T.getitem(x, (Ellipsis, i))


def _cols(x, sl: slice):
    return T.getitem(x, (Ellipsis, sl))


# two gas containers -------------------------------------------------------------

TGC_LITERAL_ENTROPY = 103.2874


def tgc_spec(nkb: float = 1.0, alpha: float = 0.5, c_hat: float = 102.25,
             half_length: float = 1.0, m: float = 2.0 / 3.0,
             literal_ic: bool = False) -> SystemSpec:
    """Wall between two ideal gases; state (q, p, S1, S2)."""
    two_l = 2.0 * half_length

    def internal(x):
        q = _col(x, 0)
        v1, v2 = q, T.sub(two_l, q)
        # E_i = (exp(S_i / NkB) / (c V_i))^(2/3)
        e1 = T.exp(T.mul(2.0 / 3.0, T.sub(T.div(_col(x, 2), nkb), T.log(T.mul(c_hat, v1)))))
        e2 = T.exp(T.mul(2.0 / 3.0, T.sub(T.div(_col(x, 3), nkb), T.log(T.mul(c_hat, v2)))))
        return e1, e2

    def energy(x):
        e1, e2 = internal(x)
        p = _col(x, 1)
        return T.add(T.div(T.mul(p, p), 2.0 * m), T.add(e1, e2))

    def entropy(x):
        return T.add(_col(x, 2), _col(x, 3))

    def L_fn(x, gE, gS):
        return _canonical(1, 4, x.shape[:-1])

    def M_fn(x, gE, gS):
        c = alpha * nkb ** 2
        t1, t2 = gE[..., 2], gE[..., 3]
        M = np.zeros(x.shape[:-1] + (4, 4))
        M[..., 2, 2] = c / t1 ** 2
        M[..., 3, 3] = c / t2 ** 2
        M[..., 2, 3] = M[..., 3, 2] = -c / (t1 * t2)
        return M

    def valid(x):
        return (x[..., 0] > 0) & (x[..., 0] < two_l)

    def sampler(rng, count):
        q = rng.uniform(0.2 * two_l, 0.8 * two_l, count)
        p = rng.uniform(-2, 2, count)
        s1 = nkb * np.log(c_hat * q) + rng.uniform(-1, 1, count)
        s2 = nkb * np.log(c_hat * (two_l - q)) + rng.uniform(-1, 1, count)
        return np.stack([q, p, s1, s2], axis=-1)

    if literal_ic:
        ic = np.array([1.0, 2.0, TGC_LITERAL_ENTROPY, TGC_LITERAL_ENTROPY])
    else:
        # entropies chosen so E_1 = E_2 = 1 at q = L
        s = nkb * math.log(c_hat * half_length)
        ic = np.array([half_length, 2.0, s, s])
    return SystemSpec(
        name="tgc", n=4, energy=energy, entropy=entropy, L_fn=L_fn, M_fn=M_fn,
        observable=np.array([True, True, False, False]),
        constants=dict(nkb=nkb, alpha=alpha, c_hat=c_hat, half_length=half_length, m=m),
        default_ic=ic, valid=valid, sampler=sampler,
    )


# thermoelastic double pendulum ----------------------------------------------------

TDP_IC_BOX = np.array([
    [0.1, 1.1], [-0.1, 0.1],      # q1
    [2.1, 2.3], [-0.1, 0.1],      # q2
    [-1.9, 2.1], [0.9, 1.1],      # p1
    [-0.1, 0.1], [0.9, 1.1],      # p2
    [0.1, 0.3], [0.1, 0.3],       # S1, S2 (the last listed range is reused for S2)
])


def tdp_spec(kappa: float = 1.0, m1: float = 1.0, m2: float = 1.0) -> SystemSpec:
    """Two thermoelastic springs; state (q1, q2, p1, p2, S1, S2), q_i, p_i in R^2."""

    def lambdas(x):
        q1 = _cols(x, slice(0, 2))
        q2 = _cols(x, slice(2, 4))
        return T.norm(q1), T.norm(T.sub(q2, q1))

    def spring(lam, s):
        ll = T.log(lam)
        return T.add(T.add(T.mul(0.5, T.mul(ll, ll)), ll), T.sub(T.exp(T.sub(s, ll)), 1.0))

    def energy(x):
        l1, l2 = lambdas(x)
        p1 = _cols(x, slice(4, 6))
        p2 = _cols(x, slice(6, 8))
        kin = T.add(T.div(T.dot(p1, p1), 2.0 * m1), T.div(T.dot(p2, p2), 2.0 * m2))
        return T.add(kin, T.add(spring(l1, _col(x, 8)), spring(l2, _col(x, 9))))

    def entropy(x):
        return T.add(_col(x, 8), _col(x, 9))

    def L_fn(x, gE, gS):
        return _canonical(4, 10, x.shape[:-1])

    def M_fn(x, gE, gS):
        t1, t2 = gE[..., 8], gE[..., 9]
        M = np.zeros(x.shape[:-1] + (10, 10))
        M[..., 8, 8] = kappa * t2 / t1
        M[..., 9, 9] = kappa * t1 / t2
        M[..., 8, 9] = M[..., 9, 8] = -kappa
        return M

    def valid(x):
        l1 = np.linalg.norm(x[..., 0:2], axis=-1)
        l2 = np.linalg.norm(x[..., 2:4] - x[..., 0:2], axis=-1)
        return (l1 > 1e-10) & (l2 > 1e-10)

    def sampler(rng, count):
        return sample_box(rng, TDP_IC_BOX, count)

    return SystemSpec(
        name="tdp", n=10, energy=energy, entropy=entropy, L_fn=L_fn, M_fn=M_fn,
        observable=np.array([True] * 8 + [False] * 2),
        constants=dict(kappa=kappa, m1=m1, m2=m2),
        default_ic=TDP_IC_BOX.mean(axis=1), valid=valid, sampler=sampler,
    )


def sample_box(rng: np.random.Generator, box: np.ndarray, count: int) -> np.ndarray:
    return rng.uniform(box[:, 0], box[:, 1], size=(count, box.shape[0]))


# damped nonlinear oscillator and thermoelastic rod ---------------------------------


def _dissipative_M(x, gE, d: int, scale: float) -> np.ndarray:
    """scale * [[0,0,0],[0,I,-u],[0,-u^T,|u|^2]] with u = dE/dp / dE/dS.

    This is the only PSD M with M grad E = 0 whose action on grad S damps p
    and feeds the lost energy into S.
    """
    n = 2 * d + 1
    u = gE[..., d:2 * d] / gE[..., 2 * d:2 * d + 1]
    M = np.zeros(x.shape[:-1] + (n, n))
    M[..., d:2 * d, d:2 * d] = np.eye(d)
    M[..., d:2 * d, 2 * d] = -u
    M[..., 2 * d, d:2 * d] = -u
    M[..., 2 * d, 2 * d] = np.sum(u * u, axis=-1)
    return scale * M


def dno_spec(d: int = 1, m: float = 1.0, k: float = 1.0, gamma: float = 0.1,
             temperature: float = 1.0) -> SystemSpec:
    """Damped pendulum coupled to a heat bath; state (q, p, S) with q, p in R^d."""
    if d not in (1, 2):
        raise ValueError("d must be 1 or 2")
    if temperature <= 0 or m <= 0 or k <= 0:
        raise ValueError("m, k and the bath temperature must be positive")
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    n = 2 * d + 1

    def energy(x):
        q = _cols(x, slice(0, d))
        p = _cols(x, slice(d, 2 * d))
        kin = T.div(T.dot(p, p), 2.0 * m)
        pot = T.mul(-k, T.vsum(T.cos(q), axis=-1))
        return T.add(T.add(kin, pot), T.mul(temperature, _col(x, 2 * d)))

    def entropy(x):
        return _col(x, 2 * d)

    def L_fn(x, gE, gS):
        return _canonical(d, n, x.shape[:-1])

    def M_fn(x, gE, gS):
        return _dissipative_M(x, gE, d, gamma * m * temperature)

    def sampler(rng, count):
        return np.concatenate([rng.uniform(-3, 3, (count, d)), rng.uniform(-2, 2, (count, d)),
                               rng.uniform(-1, 1, (count, 1))], axis=-1)

    ic = np.concatenate([np.full(d, 2.0), np.zeros(d), [0.0]])
    return SystemSpec(
        name=f"dno{d}", n=n, energy=energy, entropy=entropy, L_fn=L_fn, M_fn=M_fn,
        observable=np.array([True] * (2 * d) + [False]),
        constants=dict(d=d, m=m, k=k, gamma=gamma, temperature=temperature),
        default_ic=ic, sampler=sampler,
    )


def rod_spec(N: int = 50, m: float = 1.0, gamma: float = 0.1, k: float = 1.0) -> SystemSpec:
    """Discretized damped thermoelastic rod; state (q, p, S) with q, p in R^N."""
    if N < 2:
        raise ValueError("N must be >= 2")
    n = 2 * N + 1

    def energy(x):
        q = _cols(x, slice(0, N))
        p = _cols(x, slice(N, 2 * N))
        dq = T.sub(_cols(q, slice(1, N)), _cols(q, slice(0, N - 1)))
        pot = T.mul(0.5 * k, T.dot(dq, dq))
        return T.add(T.add(T.div(T.dot(p, p), 2.0 * m), pot), _col(x, 2 * N))

    def entropy(x):
        return _col(x, 2 * N)

    def L_fn(x, gE, gS):
        return _canonical(N, n, x.shape[:-1])

    def M_fn(x, gE, gS):
        return _dissipative_M(x, gE, N, gamma)

    def sampler(rng, count):
        return rng.uniform(-1, 1, (count, n))

    s = np.linspace(0.0, 1.0, N)
    ic = np.concatenate([0.1 * np.sin(np.pi * s), np.zeros(N), [0.0]])
    return SystemSpec(
        name="rod", n=n, energy=energy, entropy=entropy, L_fn=L_fn, M_fn=M_fn,
        observable=np.array([True] * (2 * N) + [False]),
        constants=dict(N=N, m=m, gamma=gamma, k=k),
        default_ic=ic, sampler=sampler,
    )


def _same(d, expected):
    if d != expected:
        raise ValueError(f"system fixes d={expected}, got d={d}")
    return d


SYSTEMS = {
    "tgc": tgc_spec,
    "tdp": tdp_spec,
    "dno1": lambda d=1, **kw: dno_spec(d=_same(d, 1), **kw),
    "dno2": lambda d=2, **kw: dno_spec(d=_same(d, 2), **kw),
    "rod": rod_spec,
}


def get_system(name: str, **constants) -> SystemSpec:
    try:
        factory = SYSTEMS[name]
    except KeyError:
        raise ValueError(f"unknown system {name!r}; choose from {sorted(SYSTEMS)}") from None
    return factory(**constants)


# datasets ---------------------------------------------------------------------


@dataclass
class Dataset:
    """Snapshots of one or more trajectories sampled on a shared time grid.

    ``states`` has shape (n_traj, n_t, n); rows past ``lengths[i]`` are
    padding left by truncation and are never used.  ``split`` is either
    ``{"kind": "temporal", "t_train", "t_val", "t_test"}`` or
    ``{"kind": "trajectory", "train": [...], "val": [...], "test": [...]}``.
    """

    system: str
    times: np.ndarray
    states: np.ndarray
    observable: np.ndarray
    split: dict
    lengths: np.ndarray | None = None
    constants: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim == 2:
            self.states = self.states[None]
        self.observable = np.asarray(self.observable, dtype=bool)
        if self.lengths is None:
            self.lengths = np.full(self.states.shape[0], self.times.size, dtype=int)
        self.lengths = np.asarray(self.lengths, dtype=int)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("dataset times must be strictly increasing")
        if self.states.shape[1] != self.times.size:
            raise ValueError("states and times disagree in length")
        if self.split.get("kind") == "temporal" and self.times.size > 1:
            tr, va, te = self.split["t_train"], self.split["t_val"], self.split["t_test"]
            if not 0 < tr < va < te:
                raise ValueError("temporal split needs 0 < t_train < t_val < t_test")

    @property
    def n(self) -> int:
        return self.states.shape[-1]

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 0.0

    @property
    def n_traj(self) -> int:
        return self.states.shape[0]

    def snapshot_matrix(self, traj: int = 0) -> np.ndarray:
        """n x n_s matrix of one trajectory's snapshots."""
        return self.states[traj, :self.lengths[traj]].T

    def segment(self, which: str) -> np.ndarray:
        """Time indices (temporal split) or trajectory indices (trajectory split)."""
        if self.split["kind"] == "temporal":
            t = self.times
            tr, va, te = self.split["t_train"], self.split["t_val"], self.split["t_test"]
            tol = 1e-9 * max(1.0, te)
            if which == "train":
                sel = t <= tr + tol
            elif which == "val":
                sel = (t > tr + tol) & (t <= va + tol)
            elif which == "test":
                sel = (t > va + tol) & (t <= te + tol)
            else:
                raise KeyError(which)
            return np.flatnonzero(sel & (np.arange(t.size) < self.lengths[0]))
        return np.asarray(self.split[which], dtype=int)


def temporal_split(t_train: float, t_val: float, t_test: float) -> dict:
    return {"kind": "temporal", "t_train": float(t_train), "t_val": float(t_val),
            "t_test": float(t_test)}


def trajectory_split(n_traj: int, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> dict:
    perm = np.random.default_rng(seed).permutation(n_traj)
    n_train = int(round(fractions[0] * n_traj))
    n_val = int(round(fractions[1] * n_traj))
    return {"kind": "trajectory", "train": sorted(perm[:n_train].tolist()),
            "val": sorted(perm[n_train:n_train + n_val].tolist()),
            "test": sorted(perm[n_train + n_val:].tolist())}


def generate_dataset(spec: SystemSpec, ics, dt: float, steps: int, split: dict | None = None,
                     stride: int = 1, seed: int = 0) -> Dataset:
    """RK4 trajectories from each initial condition, stored every ``stride`` steps.

    A trajectory that leaves the physical domain is truncated at its last
    valid snapshot (with a warning); the others continue.
    """
    ics = np.atleast_2d(np.asarray(ics, dtype=np.float64))
    spec.check_domain(ics)
    n_traj = ics.shape[0]
    n_saved = steps // stride + 1
    states = np.zeros((n_traj, n_saved, spec.n))
    states[:, 0] = ics
    lengths = np.full(n_traj, n_saved, dtype=int)
    active = np.arange(n_traj)
    x = ics.copy()
    for step in range(1, steps + 1):
        if active.size == 0:
            break
        try:
            x_new = rk4_step(spec, (step - 1) * dt, x, dt)
            ok = spec.valid(x_new) & np.all(np.isfinite(x_new), axis=-1)
        except (DomainError, T.TapeError, FloatingPointError):
            x_new, ok = _rk4_rowwise(spec, x, dt, step)
        if not np.all(ok):
            saved = (step - 1) // stride + 1
            for i in active[~ok]:
                lengths[i] = saved
                log.warning("%s: trajectory %d left the domain at step %d; truncated to %d snapshots",
                            spec.name, i, step, saved)
            active, x_new = active[ok], x_new[ok]
        x = x_new
        if step % stride == 0 and active.size:
            states[active, step // stride] = x
    times = dt * stride * np.arange(n_saved)
    if split is None:
        if n_traj > 1:
            split = trajectory_split(n_traj, seed=seed)
        else:
            split = temporal_split(*(times[-1] * np.array([0.2, 0.3, 1.0])))
    return Dataset(spec.name, times, states, spec.observable.copy(), split, lengths,
                   dict(spec.constants))


def _rk4_rowwise(spec, x, dt, step):
    out = np.array(x)
    ok = np.zeros(x.shape[0], dtype=bool)
    for i in range(x.shape[0]):
        try:
            xi = rk4_step(spec, (step - 1) * dt, x[i], dt)
            ok[i] = bool(spec.valid(xi)) and bool(np.all(np.isfinite(xi)))
            out[i] = xi
        except (DomainError, T.TapeError, FloatingPointError):
            ok[i] = False
    return out, ok
