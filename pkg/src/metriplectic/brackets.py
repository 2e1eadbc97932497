"""Metriplectic operators built from network outputs.

The reversible operator is ``L = P_S A P_S`` and the irreversible one is
``M = P_E B D B^T P_E`` where ``P_f`` projects onto the complement of
``grad f``.  Production code uses the cheaper exterior form (a single rank-2
correction of ``A`` and a column projection of ``B``); the projector form is
kept as :func:`matricized_L` / :func:`matricized_M` for cross-checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as T
from .nets import (
    ModelConfig,
    glorot_uniform,
    mlp_apply,
    mlp_value_and_input_grad,
    pack_lower,
    pack_rect,
    pack_strict_lower,
)

DEGENERACY_EPS = 1e-12


class NondegeneracyError(ValueError):
    """A gradient that must not vanish (energy or entropy) is numerically zero."""


def _check_nondegenerate(g: np.ndarray, eps: float, what: str) -> None:
    norms = np.linalg.norm(g, axis=-1)
    if np.any(norms <= eps):
        raise NondegeneracyError(f"gradient of {what} vanishes (norm {norms.min():.3e} <= {eps:.1e})")


def projector_complement(g, eps: float = DEGENERACY_EPS) -> np.ndarray:
    """I - g g^T / |g|^2."""
    g = np.asarray(g, dtype=np.float64)
    _check_nondegenerate(g, eps, "f")
    n = g.shape[-1]
    outer = g[..., :, None] * g[..., None, :]
    return np.eye(n) - outer / np.sum(g * g, axis=-1)[..., None, None]


def skew_from_tri(a_tri, n: int):
    low = pack_strict_lower(a_tri, n)
    return T.sub(low, T.transpose(low))


def _matvec(A, v):
    return T.getitem(T.matmul(A, T.expand_dims(v, -1)), (Ellipsis, 0))


def _outer(u, v):
    return T.mul(T.expand_dims(u, -1), T.expand_dims(v, -2))


def assemble_L(A, gS, eps: float = DEGENERACY_EPS):
    """A - (A gS gS^T + gS gS^T A) / |gS|^2 for skew A."""
    _check_nondegenerate(T.value(gS), eps, "S")
    w = _matvec(A, gS)
    nrm2 = T.expand_dims(T.expand_dims(T.dot(gS, gS), -1), -1)
    corr = T.sub(_outer(w, gS), _outer(gS, w))
    return T.sub(A, T.div(corr, nrm2))


def project_columns(B, gE, eps: float = DEGENERACY_EPS):
    """Columns of B with their gE component removed."""
    _check_nondegenerate(T.value(gE), eps, "E")
    coeff = T.div(T.matmul(T.expand_dims(gE, -2), B),
                  T.expand_dims(T.expand_dims(T.dot(gE, gE), -1), -1))
    return T.sub(B, T.mul(T.expand_dims(gE, -1), coeff))


def assemble_M(B, D, gE, eps: float = DEGENERACY_EPS):
    """V D V^T with V = P_E B."""
    V = project_columns(B, gE, eps)
    return T.matmul(T.matmul(V, D), T.transpose(V))


def matricized_L(A: np.ndarray, gS: np.ndarray) -> np.ndarray:
    P = projector_complement(gS)
    return P @ A @ P


def matricized_M(B: np.ndarray, D: np.ndarray, gE: np.ndarray) -> np.ndarray:
    P = projector_complement(gE)
    return P @ B @ D @ np.swapaxes(B, -1, -2) @ P


@dataclass
class Fields:
    """Everything a model evaluates at a state (arrays or tape Vars)."""

    A: object
    B: object
    K: object
    D: object
    E: object
    S: object
    gE: object
    gS: object


class MetriplecticModel:
    """Learnable metriplectic system: five MLPs on one flat parameter vector."""

    kind = "nms"

    def __init__(self, config: ModelConfig, theta: np.ndarray | None = None, seed: int = 0):
        self.config = config
        self._offsets = config.offsets()
        if theta is None:
            rng = np.random.default_rng(seed)
            theta = np.concatenate([glorot_uniform(rng, config.widths(k)) for k in self._offsets])
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (config.num_params,):
            raise ValueError(f"parameter vector has length {theta.size}, expected {config.num_params}")
        self.theta = theta
        self._net_cache = None

    @property
    def n(self) -> int:
        return self.config.n

    @property
    def num_params(self) -> int:
        return self.config.num_params

    def network(self, name: str, theta=None):
        theta = self.theta if theta is None else theta
        # slices are cached per parameter object so repeated rhs calls share them
        cache = self._net_cache
        if cache is None or cache[0] is not theta:
            cache = self._net_cache = (theta, {})
        flat = cache[1].get(name)
        if flat is None:
            flat = cache[1][name] = T.getitem(theta, self._offsets[name])
        return flat, self.config.widths(name)

    def fields(self, x, theta=None) -> Fields:
        cfg = self.config
        n, r = cfg.n, cfg.r
        a_flat, a_w = self.network("A", theta)
        A = skew_from_tri(mlp_apply(a_flat, a_w, x), n)
        b_flat, b_w = self.network("B", theta)
        B = pack_rect(mlp_apply(b_flat, b_w, x), n, r)
        k_flat, k_w = self.network("K", theta)
        k_raw = mlp_apply(k_flat, k_w, x)
        K = pack_lower(k_raw, r) if cfg.cholesky_mode else pack_rect(k_raw, r, cfg.r_prime)
        D = T.matmul(K, T.transpose(K))
        E, gE = mlp_value_and_input_grad(*self.network("E", theta), x)
        S, gS = mlp_value_and_input_grad(*self.network("S", theta), x)
        return Fields(A, B, K, D, E, S, gE, gS)

    def energy(self, x, theta=None):
        return mlp_value_and_input_grad(*self.network("E", theta), x)[0]

    def entropy(self, x, theta=None):
        return mlp_value_and_input_grad(*self.network("S", theta), x)[0]

    def operators(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Assembled L(x), M(x) as arrays (no tape)."""
        f = self.fields(np.asarray(x, dtype=np.float64))
        eps = _degeneracy_eps(x)
        L = assemble_L(f.A, f.gS, eps)
        M = assemble_M(f.B, f.D, f.gE, eps)
        if self.config.hamiltonian_mode:
            M = np.zeros_like(M)
        return L, M

    def rhs(self, x, theta=None):
        return model_rhs(self, x, theta)

    def __call__(self, t, x, theta=None):
        return model_rhs(self, x, theta)


def _degeneracy_eps(x) -> float:
    xv = T.value(x)
    return DEGENERACY_EPS * max(1.0, float(np.max(np.linalg.norm(xv, axis=-1))))


def model_rhs(model: MetriplecticModel, x, theta=None):
    """x' = L grad E + M grad S, evaluated matrix-free in exterior form.

    Works on a single state (n,) or a batch (B, n); records on the tape when
    ``theta`` or ``x`` is a tape Var.
    """
    xv = T.value(x)
    if xv.shape[-1] != model.n:
        raise ValueError(f"state has length {xv.shape[-1]}, model expects {model.n}")
    f = model.fields(x, theta)
    eps = _degeneracy_eps(x)
    _check_nondegenerate(T.value(f.gS), eps, "S")
    _check_nondegenerate(T.value(f.gE), eps, "E")

    gS, gE = f.gS, f.gE
    # L gE = A gE - (w (gS.gE) - gS (w.gE)) / |gS|^2 with w = A gS
    w = _matvec(f.A, gS)
    s2 = T.expand_dims(T.dot(gS, gS), -1)
    LgE = T.sub(_matvec(f.A, gE),
                T.div(T.sub(T.mul(w, T.expand_dims(T.dot(gS, gE), -1)),
                            T.mul(gS, T.expand_dims(T.dot(w, gE), -1))), s2))
    if model.config.hamiltonian_mode:
        out = LgE
    else:
        V = project_columns(f.B, gE, eps)
        c = _matvec(T.transpose(V), gS)
        MgS = _matvec(V, _matvec(f.D, c))
        out = T.add(LgE, MgS)
    ov = T.value(out)
    bad = ~np.isfinite(ov)
    if np.any(bad):
        idx = int(np.argwhere(bad)[0][-1])
        raise FloatingPointError(f"non-finite model velocity in component {idx}")
    return out


def entropy_production(model: MetriplecticModel, x) -> np.ndarray:
    """grad S^T M grad S, the learned instantaneous entropy production."""
    f = model.fields(np.asarray(x, dtype=np.float64))
    if model.config.hamiltonian_mode:
        return np.zeros(np.shape(f.S))
    V = project_columns(f.B, f.gE, _degeneracy_eps(x))
    c = np.einsum("...nr,...n->...r", V, f.gS)
    return np.einsum("...r,...rs,...s->...", c, f.D, c)


def jacobi_residual(model: MetriplecticModel, x, h: float = 1e-5) -> float:
    """Largest cyclic Jacobi-identity residual of L at x (central differences)."""
    x = np.asarray(x, dtype=np.float64)
    n = model.n
    if n > 12:
        raise ValueError("jacobi_residual is O(n^4); limited to n <= 12")
    if not 1e-6 <= h <= 1e-3:
        raise ValueError("finite-difference step must lie in [1e-6, 1e-3]")
    L = model.operators(x)[0]
    dL = np.empty((n, n, n))
    for l in range(n):
        e = np.zeros(n)
        e[l] = h
        dL[l] = (model.operators(x + e)[0] - model.operators(x - e)[0]) / (2 * h)
    # J_ijk = L_il dL[l]_jk + L_jl dL[l]_ki + L_kl dL[l]_ij
    J = (np.einsum("il,ljk->ijk", L, dL)
         + np.einsum("jl,lki->ijk", L, dL)
         + np.einsum("kl,lij->ijk", L, dL))
    return float(np.max(np.abs(J)))


def degeneracy_residuals(model: MetriplecticModel, x) -> dict[str, float]:
    """Structural audit quantities at a single state."""
    x = np.asarray(x, dtype=np.float64)
    f = model.fields(x)
    L, M = model.operators(x)
    A = np.asarray(f.A)
    gE, gS = np.asarray(f.gE), np.asarray(f.gS)
    Mn = np.linalg.norm(M, 2)
    return {
        "skew_L": float(np.max(np.abs(L + L.T))),
        "sym_M": float(np.max(np.abs(M - M.T))),
        "L_gradS_rel": float(np.linalg.norm(L @ gS) / (np.linalg.norm(A, 2) * np.linalg.norm(gS))),
        "M_gradE_rel": float(np.linalg.norm(M @ gE) / (max(Mn, 1e-300) * np.linalg.norm(gE))),
        "min_eig_M_rel": float(np.linalg.eigvalsh(0.5 * (M + M.T)).min() / max(Mn, 1e-300)),
    }

