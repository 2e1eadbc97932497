import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import central_diff, rel_err
from metriplectic import tape as T
from metriplectic.brackets import (
    MetriplecticModel,
    NondegeneracyError,
    assemble_L,
    assemble_M,
    degeneracy_residuals,
    entropy_production,
    jacobi_residual,
    matricized_L,
    matricized_M,
    model_rhs,
    projector_complement,
    skew_from_tri,
)
from metriplectic.nets import ModelConfig


@st.composite
def model_and_state(draw, max_n=6):
    n = draw(st.integers(2, max_n))
    r = draw(st.integers(1, n))
    seed = draw(st.integers(0, 2**16))
    rng = np.random.default_rng(seed)
    model = MetriplecticModel(ModelConfig(n=n, r=r), seed=seed)
    model.theta = model.theta + 0.3 * rng.standard_normal(model.theta.size)
    return model, rng.standard_normal(n)


def test_projector_properties():
    g = np.array([1.0, -2.0, 0.5])
    P = projector_complement(g)
    assert np.allclose(P @ g, 0, atol=1e-15)
    assert np.allclose(P @ P, P) and np.allclose(P, P.T)
    with pytest.raises(NondegeneracyError):
        projector_complement(np.zeros(3))


def test_skew_from_tri_is_bijective():
    v = np.arange(1.0, 7.0)
    A = skew_from_tri(v, 4)
    assert np.allclose(A, -A.T)
    assert np.array_equal(A[np.tril_indices(4, -1)], v)


@given(model_and_state())
def test_operators_have_metriplectic_structure(ms):
    model, x = ms
    res = degeneracy_residuals(model, x)
    assert res["skew_L"] <= 1e-12
    assert res["sym_M"] <= 1e-12
    assert res["L_gradS_rel"] <= 1e-10
    assert res["M_gradE_rel"] <= 1e-10
    assert res["min_eig_M_rel"] >= -1e-10


@given(model_and_state())
def test_exterior_form_equals_projector_form(ms):
    model, x = ms
    f = model.fields(x)
    L, M = model.operators(x)
    assert np.allclose(L, matricized_L(f.A, f.gS), atol=1e-12, rtol=0)
    assert np.allclose(M, matricized_M(f.B, f.D, f.gE), atol=1e-12, rtol=0)


@given(model_and_state())
def test_rhs_equals_assembled_operators(ms):
    model, x = ms
    f = model.fields(x)
    L, M = model.operators(x)
    ref = L @ f.gE + M @ f.gS
    assert np.allclose(model.rhs(x), ref, atol=1e-12 * max(1, np.abs(ref).max()))


@given(model_and_state())
def test_energy_conserved_and_entropy_produced_instantaneously(ms):
    model, x = ms
    f = model.fields(x)
    v = model.rhs(x)
    scale = np.linalg.norm(f.gE) * np.linalg.norm(v) + 1e-300
    assert abs(f.gE @ v) <= 1e-10 * scale
    sdot = f.gS @ v
    assert np.isclose(sdot, entropy_production(model, x), rtol=1e-9, atol=1e-14)
    assert sdot >= -1e-12 * (np.linalg.norm(f.gS) * np.linalg.norm(v) + 1e-300)


def test_batched_rhs_matches_rowwise():
    model = MetriplecticModel(ModelConfig(n=4, r=2), seed=3)
    X = np.random.default_rng(0).standard_normal((7, 4))
    V = model.rhs(X)
    for i in range(7):
        assert np.allclose(V[i], model.rhs(X[i]), atol=1e-14)


def test_gradients_of_fields_match_finite_differences():
    model = MetriplecticModel(ModelConfig(n=3, r=2), seed=4)
    x = np.array([0.3, -0.2, 0.9])
    f = model.fields(x)
    assert rel_err(f.gE, central_diff(lambda z: float(model.energy(z)), x)) < 1e-7
    assert rel_err(f.gS, central_diff(lambda z: float(model.entropy(z)), x)) < 1e-7


def test_rhs_parameter_gradient_matches_finite_differences():
    model = MetriplecticModel(ModelConfig(n=3, r=2), seed=5)
    x, w = np.array([0.4, 0.1, -0.7]), np.array([1.0, -2.0, 0.5])
    loss = lambda th: T.dot(model_rhs(model, x, th), w)
    g = T.param_grad(loss, model.theta)
    fd = central_diff(lambda th: float(loss(th)), model.theta)
    assert rel_err(g, fd) < 1e-6


def test_rectangular_K_mode():
    model = MetriplecticModel(ModelConfig(n=4, r=2, r_prime=3, cholesky_mode=False), seed=6)
    x = np.random.default_rng(1).standard_normal(4)
    assert model.fields(x).K.shape == (2, 3)
    res = degeneracy_residuals(model, x)
    assert res["M_gradE_rel"] <= 1e-10 and res["min_eig_M_rel"] >= -1e-10


def test_hamiltonian_mode_drops_dissipation():
    cfg = ModelConfig(n=4, r=2, hamiltonian_mode=True)
    model = MetriplecticModel(cfg, seed=7)
    x = np.random.default_rng(2).standard_normal(4)
    L, M = model.operators(x)
    f = model.fields(x)
    assert np.all(M == 0)
    assert np.allclose(model.rhs(x), L @ f.gE, atol=1e-13)
    assert entropy_production(model, x) == 0


def test_vanishing_gradient_raises():
    with pytest.raises(NondegeneracyError, match="S"):
        assemble_L(np.zeros((3, 3)), np.zeros(3))
    with pytest.raises(NondegeneracyError, match="E"):
        assemble_M(np.eye(3), np.eye(3), np.zeros(3))
    model = MetriplecticModel(ModelConfig(n=3), seed=0)
    model.theta[model.config.offsets()["E"]] = 0.0  # E constant, grad E = 0
    with pytest.raises(NondegeneracyError):
        model.rhs(np.ones(3))


def test_wrong_state_length_rejected():
    model = MetriplecticModel(ModelConfig(n=3), seed=0)
    with pytest.raises(ValueError):
        model.rhs(np.ones(4))
    with pytest.raises(ValueError):
        MetriplecticModel(ModelConfig(n=3), theta=np.ones(5))


def test_jacobi_residual_vanishes_for_constant_L():
    # a constant A with grad S along a fixed direction gives a constant L
    model = MetriplecticModel(ModelConfig(n=3), seed=1)
    offs = model.config.offsets()
    for name in ("A", "S"):
        th = model.theta[offs[name]]
        th[:] = 0.0
    cfg = model.config
    a_last_bias = slice(offs["A"].stop - cfg.output_dim("A"), offs["A"].stop)
    model.theta[a_last_bias] = [1.0, 0.5, -0.3]
    # S(x) = x_2: first-layer weights zero, hidden tanh(0)=0, so set output bias path instead
    w_in = cfg.widths("S")
    hidden = w_in[1]
    W1 = np.zeros((hidden, 3))
    W1[0, 2] = 1e-3
    W2 = np.zeros((1, hidden))
    W2[0, 0] = 1e3
    s = offs["S"].start
    model.theta[s:s + 3 * hidden] = W1.ravel()
    model.theta[s + 3 * hidden + hidden:s + 3 * hidden + hidden + hidden] = W2.ravel()
    assert jacobi_residual(model, np.array([0.1, 0.2, 0.3]), h=1e-4) < 1e-6
    with pytest.raises(ValueError):
        jacobi_residual(model, np.zeros(3), h=1.0)
