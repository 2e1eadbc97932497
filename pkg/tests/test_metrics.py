import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from metriplectic.brackets import MetriplecticModel
from metriplectic.metrics import (
    ARCHITECTURES,
    EvalReport,
    conservation_report,
    error_growth_probe,
    evaluate,
    exact_energy_drift,
    l2_time_error,
    loglog_slope,
    mae,
    model_conservation,
    mse,
    param_count,
    scaling_table,
)
from metriplectic.nets import ModelConfig
from metriplectic.odeint import SolverConfig, dopri5_solve
from metriplectic.systems import generate_dataset, get_system, temporal_split

traj = arrays(np.float64, (6, 3), elements=st.floats(-10, 10))


def test_identical_and_constant_offset():
    a = np.random.default_rng(0).standard_normal((5, 3))
    assert mse(a, a) == 0 and mae(a, a) == 0
    assert np.isclose(mse(a + 0.3, a), 0.09) and np.isclose(mae(a - 0.3, a), 0.3)


def test_against_loop_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((7, 4)), rng.standard_normal((7, 4))
    mask = np.array([True, False, True, True])
    sq = ab = 0.0
    count = 0
    for i in range(7):
        for j in range(4):
            if mask[j]:
                sq += (a[i, j] - b[i, j]) ** 2
                ab += abs(a[i, j] - b[i, j])
                count += 1
    assert abs(mse(a, b, mask) - sq / count) < 1e-12
    assert abs(mae(a, b, mask) - ab / count) < 1e-12


@given(traj, traj)
def test_errors_symmetric_and_nonnegative(a, b):
    assert mse(a, b) == mse(b, a) >= 0
    assert mae(a, b) == mae(b, a) >= 0
    # squares of tiny differences underflow, so the iff is checked on mae
    assert (mae(a, b) == 0) == np.array_equal(a, b)
    if np.array_equal(a, b):
        assert mse(a, b) == 0


def test_grid_mismatch():
    with pytest.raises(ValueError):
        mse(np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        mae(np.zeros((3, 2)), np.zeros((3, 2)), mask=[True])


def test_param_counts_from_formulas():
    assert [param_count(a, 4, 2) for a in ARCHITECTURES] == [19, 21, 30]
    with pytest.raises(ValueError):
        param_count("nms", 3, 4)
    with pytest.raises(ValueError):
        param_count("spnn", 3, 1)


def test_nms_count_matches_model_outputs():
    for n, r in [(3, 1), (4, 2), (6, 6)]:
        assert param_count("nms", n, r) == ModelConfig(n=n, r=r).learnable_functions()


def test_nms_has_the_fewest_functions():
    for n in range(6, 40):
        for r in range(2, n // 2 + 1):
            assert param_count("nms", n, r) < min(param_count("gfinn", n, r), param_count("gnode", n, r))


def test_gfinn_gnode_order_depends_on_rank():
    # gfinn ~ r n^2 against gnode ~ n^3 / 6 + r n^2 / 2: gfinn is smaller only for r < n / 3
    assert param_count("gfinn", 6, 2) == 66 > param_count("gnode", 6, 2) == 55
    for n in range(6, 80):
        for r in range(1, n + 1):
            if 3 * r <= n - 3:
                assert param_count("gfinn", n, r) < param_count("gnode", n, r)
            elif 3 * r >= n:
                assert param_count("gfinn", n, r) > param_count("gnode", n, r)


def test_scaling_table_rows():
    rows = scaling_table([3, 5], r=1, trials=5)
    assert [r["n"] for r in rows] == [3, 5]
    assert all(r["rhs_seconds"] > 0 for r in rows)
    with pytest.raises(ValueError):
        scaling_table([5, 3], trials=0)


def test_conservation_of_constant_trajectory():
    spec = get_system("dno1")
    x = np.tile(np.array([0.0, 0.0, 0.3]), (5, 1))
    rep = conservation_report(spec.energy, spec.entropy, x, rhs=spec.rhs)
    assert rep.energy_drift == 0 and rep.entropy_violation == 0
    assert np.all(rep.sdot == 0)


def test_exact_tgc_trajectory_conserves_energy():
    spec = get_system("tgc")
    cfg = SolverConfig()
    tr = dopri5_solve(spec, spec.default_ic, np.linspace(0, 10, 101), cfg)
    rep = conservation_report(spec.energy, spec.entropy, tr.states, rhs=spec.rhs)
    e0 = abs(spec.E(spec.default_ic))
    assert rep.energy_drift <= 100 * (cfg.rtol * e0 + cfg.atol)
    assert rep.entropy_violation >= -1e-8
    assert np.all(rep.sdot >= -1e-12)


def test_learned_model_conservation():
    model = MetriplecticModel(ModelConfig(n=3, r=2), seed=0)
    cfg = SolverConfig()
    x0 = np.array([1.0, 0.5, 0.1])
    tr = dopri5_solve(lambda t, x: model.rhs(x), x0, np.linspace(0, 5, 51), cfg)
    rep = model_conservation(model, tr.states)
    assert rep.energy_drift <= 100 * (cfg.rtol * abs(model.energy(x0)) + cfg.atol)
    assert np.all(rep.sdot >= -1e-10 * max(1.0, np.abs(rep.sdot).max()))


def test_exact_energy_drift_substitutes_hidden_columns():
    spec = get_system("dno1")
    ds = generate_dataset(spec, spec.default_ic, 0.01, 100, split=temporal_split(0.4, 0.6, 1.0))
    truth = ds.states[0]
    wrong_s = truth.copy()
    wrong_s[:, 2] = 5.0
    assert exact_energy_drift(spec, wrong_s, truth, ds.observable) < 1e-10
    assert exact_energy_drift(spec, truth, truth, np.ones(3, bool)) < 1e-10


def test_l2_time_error_closed_form():
    t = np.linspace(0, 2, 2001)
    a = np.zeros((t.size, 1))
    b = t[:, None]
    assert np.isclose(l2_time_error(t, a, b), np.sqrt(8 / 3), rtol=1e-6)


def test_error_probe_zero_noise_and_growth():
    model = MetriplecticModel(ModelConfig(n=3, r=2), seed=1)
    rows = error_growth_probe(model, [0.0, 1e-4, 1e-2], 1.0, np.array([1.0, 0.5, 0.1]),
                              n_seeds=3, n_points=51)
    assert rows[0]["error"] == 0
    assert rows[0]["error"] < rows[1]["error"] < rows[2]["error"]
    with pytest.raises(ValueError):
        error_growth_probe(model, [1e-2, 1e-3], 1.0, np.zeros(3))


def test_evaluate_exact_data_against_learned_model():
    spec = get_system("dno1")
    ds = generate_dataset(spec, spec.default_ic, 0.01, 100, split=temporal_split(0.4, 0.6, 1.0))
    model = MetriplecticModel(ModelConfig(n=3, r=2), seed=2)
    report, runs = evaluate(model, ds, "test", spec=spec)
    assert report.mse >= 0 and report.energy_drift_rel < 1e-5
    assert report.degeneracy_max["M_gradE_rel"] < 1e-10
    assert len(report.coord_mse) == 2
    with pytest.raises(ValueError, match="finite"):
        EvalReport("test", float("nan"), 0.0, [], None, None, None, None, None)
