import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metriplectic.brackets import MetriplecticModel, degeneracy_residuals
from metriplectic.nets import ModelConfig, mlp_apply, mlp_init
from metriplectic.odeint import SolverConfig
from metriplectic.systems import Dataset, generate_dataset, get_system, temporal_split
from metriplectic.training import (
    Checkpoint,
    NodeModel,
    OptimizerState,
    TrainConfig,
    TrainingError,
    adamax_step,
    batch_loss_and_grad,
    init_unobserved_linear,
    node_baseline_rhs,
    rollout,
    train,
    trajectory_loss,
)


@pytest.fixture(scope="module")
def dno_small():
    spec = get_system("dno1")
    ds = generate_dataset(spec, spec.default_ic, 0.01, 300, stride=5,
                          split=temporal_split(2.0, 2.5, 3.0))
    return init_unobserved_linear(ds)


def decay_dataset():
    t = np.linspace(0, 3, 31)
    return Dataset("decay", t, np.exp(-t)[:, None], [True], temporal_split(2.0, 2.5, 3.0))


# Adamax -------------------------------------------------------------------------


def test_adamax_zero_gradient_leaves_params():
    state = OptimizerState.zeros(3)
    p = np.array([1.0, -2.0, 3.0])
    state, q = adamax_step(state, p, np.zeros(3), 0.01)
    assert np.array_equal(p, q) and state.t == 1


def test_adamax_constant_gradient_steps_approach_lr():
    g = np.array([3.0, -0.5, 1e-3])
    state, p = OptimizerState.zeros(3), np.zeros(3)
    for _ in range(200):
        state, new = adamax_step(state, p, g, 0.01)
        step, p = new - p, new
    # u saturates at |g| and the bias-corrected m tends to g
    assert np.allclose(step, -0.01 * np.sign(g), rtol=1e-5)
    assert np.array_equal(state.u, np.abs(g))


def test_adamax_first_step_closed_form():
    state, p = adamax_step(OptimizerState.zeros(2), np.zeros(2), np.array([2.0, -4.0]), 0.1)
    # m = 0.1 g, u = |g|, correction 1 / (1 - 0.9)
    assert np.allclose(p, -0.1 * np.sign([2.0, -4.0]) * np.array([2.0, 4.0]) / (np.array([2.0, 4.0]) + 1e-8))


@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4), st.integers(1, 6))
def test_adamax_infinity_accumulator_nonnegative_nondecreasing_in_max(vals, steps):
    state = OptimizerState.zeros(4)
    p = np.zeros(4)
    g = np.array(vals)
    for _ in range(steps):
        prev = state.u.copy()
        state, p = adamax_step(state, p, g, 0.01)
        assert np.all(state.u >= 0)
        assert np.all(state.u >= np.minimum(prev, np.abs(g)))


def test_adamax_skips_non_finite_gradients():
    state = OptimizerState.zeros(2)
    p = np.ones(2)
    with pytest.warns(RuntimeWarning):
        state, q = adamax_step(state, p, np.array([np.nan, 1.0]), 0.01)
    assert np.array_equal(p, q) and state.skipped == 1 and state.t == 0


def test_adamax_shape_mismatch():
    with pytest.raises(ValueError):
        adamax_step(OptimizerState.zeros(2), np.ones(3), np.ones(3), 0.01)


# unobserved fill ----------------------------------------------------------------


def test_straight_line_fill(dno_small):
    ds = dno_small
    s = ds.states[0, :, 2]
    T_train = ds.split["t_train"]
    assert s[0] == 0.0
    k = int(np.argmin(np.abs(ds.times - T_train)))
    assert np.isclose(s[k], 1.0)
    half = int(np.argmin(np.abs(ds.times - T_train / 2)))
    assert np.isclose(s[half], 0.5)
    assert np.all(np.diff(s) > 0)


def test_fill_leaves_observed_columns_and_empty_mask_is_noop():
    spec = get_system("dno1")
    raw = generate_dataset(spec, spec.default_ic, 0.01, 20, split=temporal_split(0.1, 0.15, 0.2))
    filled = init_unobserved_linear(raw)
    assert np.array_equal(filled.states[..., :2], raw.states[..., :2])
    full = init_unobserved_linear(raw, observable=[True, True, True])
    assert np.array_equal(full.states, raw.states)


# NODE baseline ------------------------------------------------------------------


def test_node_rhs_is_plain_mlp():
    node = NodeModel(3, (4,), seed=1)
    x = np.random.default_rng(0).standard_normal(3)
    assert np.array_equal(node_baseline_rhs(node, x), mlp_apply(node.theta, node.widths, x))
    zero = NodeModel(3, (4,), theta=np.zeros(node.num_params))
    assert np.all(zero.rhs(x) == 0)
    p = mlp_init((3, 4, 3), 1)
    assert np.allclose(node.rhs(x), mlp_apply(p.flat, p.widths, x))


@pytest.mark.slow
def test_node_learns_linear_decay():
    ds = decay_dataset()
    cfg = TrainConfig(mode="origin", steps=2000, batch_size=1, rollout_length=20, val_every=100)
    ck = train(NodeModel(1, (16, 16), seed=0), ds, cfg)
    train_idx = ds.segment("train")
    pred = rollout(ck.model(), ds.states[0, 0], ds.times[:train_idx[-1] + 1])
    assert trajectory_loss(pred, ds.states[0, train_idx], [True]) < 1e-4


# training loop ------------------------------------------------------------------


def small_cfg(**kw):
    base = dict(steps=6, batch_size=3, rollout_length=2, max_offset=4, val_every=3, seed=11)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_steps_returns_initial_model(dno_small):
    model = MetriplecticModel(ModelConfig(n=3, r=2), seed=0)
    ck = train(model, dno_small, small_cfg(steps=0))
    assert np.array_equal(ck.theta, model.theta)
    assert np.isfinite(ck.best_val) and ck.step == 0


def test_training_is_deterministic(dno_small):
    runs = []
    for _ in range(2):
        model = MetriplecticModel(ModelConfig(n=3, r=2), seed=0)
        ck = train(model, dno_small, small_cfg())
        runs.append(ck)
    assert np.array_equal(runs[0].theta, runs[1].theta)
    curves = [np.array([h["loss"] for h in ck.history]) for ck in runs]
    assert np.array_equal(curves[0], curves[1], equal_nan=True)


def test_structure_holds_at_every_step(dno_small):
    seen = []

    def audit(step, model):
        x = dno_small.states[0, 5 * step]
        res = degeneracy_residuals(model, x)
        seen.append(step)
        assert res["L_gradS_rel"] <= 1e-10 and res["M_gradE_rel"] <= 1e-10
        assert res["min_eig_M_rel"] >= -1e-10

    model = MetriplecticModel(ModelConfig(n=3, r=2), seed=1)
    ck = train(model, dno_small, small_cfg(steps=5), callback=audit)
    assert seen == [1, 2, 3, 4, 5]
    assert all(np.isfinite(h["loss"]) for h in ck.history[1:])


def test_origin_mode_and_loss_decreases(dno_small):
    model = MetriplecticModel(ModelConfig(n=3, r=2), seed=2)
    ck = train(model, dno_small, small_cfg(mode="origin", steps=30, batch_size=1, rollout_length=10,
                                           val_every=10, loss="mae"))
    losses = [h["loss"] for h in ck.history[1:]]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="sideways")
    with pytest.raises(ValueError):
        TrainConfig(rollout_length=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(rollout_length=5, max_offset=3)


def test_dimension_mismatch(dno_small):
    with pytest.raises(ValueError):
        train(NodeModel(2, (3,)), dno_small, small_cfg())


class _Flaky:
    """Model whose rhs fails for states with a large first coordinate."""

    kind = "node"

    def __init__(self, threshold):
        self.inner = NodeModel(3, (3,), seed=0)
        self.theta = self.inner.theta
        self.n = 3
        self.threshold = threshold

    def rhs(self, x, theta=None):
        from metriplectic import tape as T
        if np.any(np.abs(T.value(x)[..., 0]) > self.threshold):
            raise FloatingPointError("synthetic failure")
        return self.inner.rhs(x, theta)


def test_failed_batch_elements_are_skipped(dno_small):
    model = _Flaky(threshold=1.9)
    x0 = np.stack([dno_small.states[0, 0], dno_small.states[0, 30]])   # q=2 fails, later q passes
    offsets = [np.array([1, 2]), np.array([1, 2])]
    targets = [dno_small.states[0, [1, 2]], dno_small.states[0, [31, 32]]]
    with pytest.warns(RuntimeWarning, match="element 0"):
        loss, grad, failed, _ = batch_loss_and_grad(model, x0, offsets, targets, dno_small.dt,
                                                    dno_small.observable, small_cfg())
    assert failed == 1 and np.isfinite(loss) and np.any(grad != 0)
    with pytest.raises(TrainingError), pytest.warns(RuntimeWarning):
        batch_loss_and_grad(_Flaky(threshold=0.0), x0, offsets, targets, dno_small.dt,
                            dno_small.observable, small_cfg())


# checkpoints --------------------------------------------------------------------


def test_checkpoint_roundtrip_is_byte_identical(dno_small):
    model = MetriplecticModel(ModelConfig(n=3, r=2), seed=3)
    ck = train(model, dno_small, small_cfg(steps=3))
    text = ck.to_json()
    again = Checkpoint.from_json(text)
    assert again.to_json() == text
    assert np.array_equal(again.theta, ck.theta)
    doc = json.loads(text)
    assert set(doc["parameters"]) == {"A", "B", "K", "E", "S"}
    assert doc["provenance"]["seed"] == 11 and len(doc["provenance"]["config_hash"]) == 16
    x = dno_small.states[0, 0]
    assert np.array_equal(again.model().rhs(x), ck.model().rhs(x))


def test_node_checkpoint_roundtrip():
    ck = train(NodeModel(1, (4,), seed=0), decay_dataset(), small_cfg(steps=2))
    assert Checkpoint.from_json(ck.to_json()).to_json() == ck.to_json()


def test_checkpoint_parameter_count_checked(dno_small):
    ck = train(MetriplecticModel(ModelConfig(n=3), seed=0), dno_small, small_cfg(steps=0))
    doc = json.loads(ck.to_json())
    doc["parameters"]["A"] = doc["parameters"]["A"][:-1]
    with pytest.raises(ValueError):
        Checkpoint.from_json(json.dumps(doc))
    doc["schema_version"] = 99
    with pytest.raises(ValueError, match="schema"):
        Checkpoint.from_json(json.dumps(doc))


def test_learned_energy_conserved_along_rollout(dno_small):
    model = MetriplecticModel(ModelConfig(n=3, r=2), seed=4)
    ck = train(model, dno_small, small_cfg(steps=3))
    m = ck.model()
    solver = SolverConfig()
    pred = rollout(m, dno_small.states[0, 0], dno_small.times, solver)
    e = m.energy(pred)
    assert np.max(np.abs(e - e[0])) <= 100 * (solver.rtol * abs(e[0]) + solver.atol)


def test_fill_weight_adds_filled_coordinates_to_the_mean(dno_small):
    model = MetriplecticModel(ModelConfig(n=3, r=1), seed=5)
    x0 = dno_small.states[0, [0, 10]]
    offsets = [np.array([1, 3]), np.array([2, 3])]
    targets = [dno_small.states[0, [1, 3]], dno_small.states[0, [12, 13]]]
    solver = SolverConfig()
    sq = []
    for b, start in enumerate((0, 10)):
        pred = rollout(model, x0[b], dno_small.times[:4], solver)
        sq.append((pred[offsets[b]] - targets[b]) ** 2)
    sq = np.concatenate(sq)
    args = (model, x0, offsets, targets, dno_small.dt, dno_small.observable)
    obs_only = batch_loss_and_grad(*args, small_cfg())[0]
    full = batch_loss_and_grad(*args, small_cfg(fill_weight=1.0))[0]
    assert np.isclose(obs_only, sq[:, :2].mean(), rtol=1e-6)
    assert np.isclose(full, sq.mean(), rtol=1e-6)
    with pytest.raises(ValueError):
        TrainConfig(fill_weight=-1.0)


def test_select_last_keeps_final_parameters(dno_small):
    seen = {}
    model = MetriplecticModel(ModelConfig(n=3, r=1), seed=6)
    ck = train(model, dno_small, small_cfg(steps=4, select="last"),
               callback=lambda step, m: seen.__setitem__(step, m.theta.copy()))
    assert np.array_equal(ck.theta, seen[4]) and ck.step == 4
    assert ck.best_val == ck.history[-1]["val"]
    with pytest.raises(ValueError):
        TrainConfig(select="median")
