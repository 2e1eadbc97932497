"""Tanh MLPs and the packing maps that shape their outputs into matrices.

MLP weights live in one flat float64 vector so that a whole model can be
differentiated as a single tape variable.  Layer ``i`` occupies
``W_i`` (row-major, shape ``(out, in)``) followed by ``b_i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from math import comb

import numpy as np

from . import tape as T


@dataclass
class MlpParams:
    widths: tuple[int, ...]
    flat: np.ndarray

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        expected = mlp_param_count(self.widths)
        if self.flat.shape != (expected,):
            raise ValueError(f"MLP {self.widths} needs {expected} parameters, got {self.flat.shape}")

    @property
    def size(self) -> int:
        return self.flat.size

    def layers(self):
        """(W, b) pairs as numpy views into ``flat``."""
        return list(_split_layers(self.flat, self.widths))


def mlp_param_count(widths) -> int:
    return sum((a + 1) * b for a, b in zip(widths[:-1], widths[1:]))


def _check_widths(widths) -> tuple[int, ...]:
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2:
        raise ValueError("an MLP needs at least input and output widths")
    if any(w <= 0 for w in widths):
        raise ValueError(f"all widths must be positive, got {widths}")
    return widths


def glorot_uniform(rng: np.random.Generator, widths) -> np.ndarray:
    widths = _check_widths(widths)
    chunks = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-limit, limit, size=fan_out * fan_in))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


def mlp_init(widths, seed: int) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    widths = _check_widths(widths)
    rng = np.random.default_rng(seed)
    return MlpParams(widths, glorot_uniform(rng, widths))


def _split_layers(flat, widths):
    offset = 0
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        W = flat[offset:offset + fan_in * fan_out]
        offset += fan_in * fan_out
        b = flat[offset:offset + fan_out]
        offset += fan_out
        yield T.reshape(W, (fan_out, fan_in)), b


_LAYER_CACHE: dict = {}
_LAYER_CACHE_SIZE = 32


def _layers(flat, widths):
    """(W, W^T, b) per layer, cached by the identity of ``flat``.

    Rollouts call the same network many times with one parameter object;
    slicing it once keeps the tape from recording the same views repeatedly.
    Cached entries hold a reference to ``flat``, so identities cannot be
    recycled while cached, and array entries are views that follow in-place
    edits.
    """
    key = (id(flat), widths)
    hit = _LAYER_CACHE.get(key)
    if hit is not None and hit[0] is flat:
        return hit[1]
    layers = [(W, T.transpose(W), b) for W, b in _split_layers(flat, widths)]
    if len(_LAYER_CACHE) >= _LAYER_CACHE_SIZE:
        _LAYER_CACHE.pop(next(iter(_LAYER_CACHE)))
    _LAYER_CACHE[key] = (flat, layers)
    return layers


def mlp_apply(flat, widths, x):
    """Forward pass on a flat parameter vector (array or tape Var).

    ``x`` has shape (..., widths[0]); hidden layers use tanh, output is linear.
    """
    widths = tuple(widths)
    if T.value(x).shape[-1] != widths[0]:
        raise ValueError(f"input width {T.value(x).shape[-1]} != {widths[0]}")
    layers = _layers(flat, widths)
    h = x
    for i, (_, Wt, b) in enumerate(layers):
        h = T.add(T.matmul(h, Wt), b)
        if i < len(layers) - 1:
            h = T.tanh(h)
    return h


def mlp_forward(params: MlpParams, x):
    return mlp_apply(params.flat, params.widths, x)


def mlp_value_and_input_grad(flat, widths, x):
    """Scalar-output MLP value (...,) and its input gradient (..., n).

    The gradient is written out with recorded primitives (backpropagation
    through the layers by hand), so it stays differentiable with respect to
    the parameters on the tape.
    """
    if widths[-1] != 1:
        raise ValueError("input gradient is only defined for scalar-output MLPs")
    widths = tuple(widths)
    if T.value(x).shape[-1] != widths[0]:
        raise ValueError(f"input width {T.value(x).shape[-1]} != {widths[0]}")
    layers = _layers(flat, widths)
    h = x
    hidden = []
    for _, Wt, b in layers[:-1]:
        h = T.tanh(T.add(T.matmul(h, Wt), b))
        hidden.append(h)
    W_out, Wt_out, b_out = layers[-1]
    out = T.add(T.matmul(h, Wt_out), b_out)
    # dout/dh_last is the single output row, broadcast over the batch
    g = T.getitem(W_out, 0)
    for (W, _, _), h in zip(reversed(layers[:-1]), reversed(hidden)):
        g = T.mul(g, T.sub(1.0, T.mul(h, h)))
        g = T.matmul(g, W)
    if T.value(g).ndim < T.value(x).ndim:
        g = T.add(g, np.zeros(T.value(x).shape))
    return T.getitem(out, (Ellipsis, 0)), g


# packing maps ---------------------------------------------------------------


@lru_cache(maxsize=None)
def strict_lower_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = [], []
    for i in range(n):
        for j in range(i):
            rows.append(i)
            cols.append(j)
    return np.array(rows, dtype=int), np.array(cols, dtype=int)


@lru_cache(maxsize=None)
def lower_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = [], []
    for i in range(n):
        for j in range(i + 1):
            rows.append(i)
            cols.append(j)
    return np.array(rows, dtype=int), np.array(cols, dtype=int)


@lru_cache(maxsize=None)
def _selection(kind: str, n: int) -> np.ndarray:
    rows, cols = strict_lower_indices(n) if kind == "strict" else lower_indices(n)
    P = np.zeros((rows.size, n * n))
    P[np.arange(rows.size), rows * n + cols] = 1.0
    P.setflags(write=False)
    return P


def _pack(kind: str, v, n: int, size: int):
    if T.value(v).shape[-1] != size:
        raise ValueError(f"expected a trailing length of {size}, got {T.value(v).shape[-1]}")
    flat = T.matmul(v, _selection(kind, n))
    return T.reshape(flat, T.value(v).shape[:-1] + (n, n))


def pack_strict_lower(v, n: int):
    """Row-major fill of the strictly lower triangle of an n x n matrix."""
    return _pack("strict", v, n, comb(n, 2))


def pack_lower(v, r: int):
    """Row-major fill of the lower triangle (diagonal included) of an r x r matrix."""
    return _pack("lower", v, r, comb(r + 1, 2))


def pack_rect(v, n: int, r: int):
    """Row-major reshape of a length n*r vector into an n x r matrix."""
    if T.value(v).shape[-1] != n * r:
        raise ValueError(f"expected a trailing length of {n * r}, got {T.value(v).shape[-1]}")
    return T.reshape(v, T.value(v).shape[:-1] + (n, r))


def unpack_strict_lower(M: np.ndarray) -> np.ndarray:
    rows, cols = strict_lower_indices(M.shape[-1])
    return M[..., rows, cols]


def unpack_lower(M: np.ndarray) -> np.ndarray:
    rows, cols = lower_indices(M.shape[-1])
    return M[..., rows, cols]


def unpack_rect(M: np.ndarray) -> np.ndarray:
    return M.reshape(M.shape[:-2] + (-1,))


# model configuration ------------------------------------------------------------


NETWORKS = ("A", "B", "K", "E", "S")


@dataclass
class ModelConfig:
    """Dimensions and hidden widths of a metriplectic model.

    ``hidden`` maps each network name to its hidden-layer widths.
    """

    n: int
    r: int = 1
    r_prime: int | None = None
    hidden: dict[str, tuple[int, ...]] = field(
        default_factory=lambda: {name: (5,) for name in NETWORKS})
    cholesky_mode: bool = True
    hamiltonian_mode: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be positive")
        if not 1 <= self.r <= self.n:
            raise ValueError(f"rank r must satisfy 1 <= r <= n, got r={self.r}, n={self.n}")
        if self.r_prime is None:
            self.r_prime = self.r
        if self.r_prime < self.r:
            raise ValueError("r_prime must be >= r")
        if self.n < 2:
            raise ValueError("a metriplectic model needs n >= 2 (skew A needs C(n,2) >= 1)")
        self.hidden = {k: tuple(int(w) for w in v) for k, v in self.hidden.items()}
        missing = set(NETWORKS) - set(self.hidden)
        if missing:
            raise ValueError(f"hidden widths missing for networks {sorted(missing)}")

    def output_dim(self, name: str) -> int:
        if name == "A":
            return comb(self.n, 2)
        if name == "B":
            return self.n * self.r
        if name == "K":
            return comb(self.r + 1, 2) if self.cholesky_mode else self.r * self.r_prime
        if name in ("E", "S"):
            return 1
        raise KeyError(name)

    def widths(self, name: str) -> tuple[int, ...]:
        return (self.n, *self.hidden[name], self.output_dim(name))

    def learnable_functions(self) -> int:
        return sum(self.output_dim(name) for name in NETWORKS)

    def offsets(self) -> dict[str, slice]:
        out, start = {}, 0
        for name in NETWORKS:
            size = mlp_param_count(self.widths(name))
            out[name] = slice(start, start + size)
            start += size
        return out

    @property
    def num_params(self) -> int:
        return sum(mlp_param_count(self.widths(name)) for name in NETWORKS)

    def to_dict(self) -> dict:
        return {
            "n": self.n, "r": self.r, "r_prime": self.r_prime,
            "hidden": {k: list(self.hidden[k]) for k in NETWORKS},
            "cholesky_mode": self.cholesky_mode, "hamiltonian_mode": self.hamiltonian_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["hidden"] = {k: tuple(v) for k, v in d["hidden"].items()}
        return cls(**d)
