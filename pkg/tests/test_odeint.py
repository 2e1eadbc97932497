import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import central_diff, rel_err
from metriplectic import tape as T
from metriplectic.odeint import (
    ODEError,
    SolverConfig,
    StiffnessError,
    Trajectory,
    dopri5_solve,
    integrate_recorded,
    rk4_solve,
    rk4_step,
    solve,
)

OSC = lambda t, x: np.array([x[1], -x[0]])


def test_rk4_is_fourth_order():
    errs = []
    for dt in (0.1, 0.05, 0.025):
        steps = int(round(1.0 / dt))
        x = rk4_solve(OSC, [1.0, 0.0], dt, steps).states[-1]
        errs.append(np.linalg.norm(x - [np.cos(1.0), -np.sin(1.0)]))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.abs(orders - 4) < 0.2)


def test_dopri5_dense_output_accuracy():
    t = np.linspace(0, 10, 37)
    traj = dopri5_solve(OSC, [1.0, 0.0], t, SolverConfig(rtol=1e-10, atol=1e-12))
    exact = np.stack([np.cos(t), -np.sin(t)], axis=1)
    assert np.max(np.abs(traj.states - exact)) < 1e-8
    assert traj.stats["steps"] > 0


def test_dopri5_tolerance_controls_error():
    t = np.array([0.0, 5.0])
    f = lambda t, x: -x
    loose = dopri5_solve(f, [1.0], t, SolverConfig(rtol=1e-4, atol=1e-6)).states[-1, 0]
    tight = dopri5_solve(f, [1.0], t, SolverConfig(rtol=1e-10, atol=1e-12)).states[-1, 0]
    assert abs(tight - np.exp(-5)) < abs(loose - np.exp(-5))
    assert abs(tight - np.exp(-5)) < 1e-10


@given(st.floats(0.1, 3.0), st.floats(-2.0, 2.0))
def test_linear_decay_closed_form(k, x0):
    t = np.linspace(0, 2, 11)
    traj = dopri5_solve(lambda t, x: -k * x, [x0], t)
    assert np.allclose(traj.states[:, 0], x0 * np.exp(-k * t), rtol=1e-6, atol=1e-9)


def test_eval_points_at_start_copy_initial_state():
    traj = dopri5_solve(OSC, [1.0, 0.0], [0.0])
    assert traj.states.shape == (1, 2)
    rec = integrate_recorded(OSC, np.array([1.0, 0.0]), [0.0, 0.0, 1.0])
    assert np.array_equal(rec.states[1], [1.0, 0.0])


def test_unsorted_eval_times_rejected():
    with pytest.raises(ValueError):
        dopri5_solve(OSC, [1.0, 0.0], [0.0, 2.0, 1.0])
    with pytest.raises(ValueError):
        Trajectory([0.0, 0.0], np.zeros((2, 1)))


def test_step_budget_raises_stiffness_error():
    with pytest.raises(StiffnessError):
        dopri5_solve(OSC, [1.0, 0.0], [0.0, 100.0], SolverConfig(max_steps=5))


def test_non_finite_rhs_raises():
    bad = lambda t, x: x / 0.0 if t > 0.5 else -x
    with np.errstate(all="ignore"), pytest.raises(ODEError, match="stage"):
        dopri5_solve(bad, [1.0], [0.0, 1.0])
    with np.errstate(all="ignore"), pytest.raises(ODEError, match="stage 1"):
        rk4_step(lambda t, x: np.array([np.nan]), 0.0, np.array([1.0]), 0.1)


def test_blowup_underflows_or_exhausts_budget():
    with pytest.raises(ODEError):
        dopri5_solve(lambda t, x: x * x, [1.0], [0.0, 2.0], SolverConfig(max_steps=10_000))


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(method="euler")
    with pytest.raises(ValueError):
        SolverConfig(rtol=0)


def test_solve_dispatch_rk4_hits_eval_times():
    t = np.array([0.0, 0.3, 0.7])
    traj = solve(OSC, [1.0, 0.0], t, SolverConfig(method="rk4", dt=0.01))
    assert np.allclose(traj.states[:, 0], np.cos(t), atol=1e-9)


def test_batched_states_share_steps():
    X0 = np.array([[1.0, 0.0], [0.0, 2.0]])
    f = lambda t, x: np.stack([x[..., 1], -x[..., 0]], axis=-1)
    t = np.linspace(0, 3, 7)
    batch = dopri5_solve(f, X0, t).states
    for i in range(2):
        single = dopri5_solve(OSC, X0[i], t).states
        assert np.allclose(batch[:, i], single, atol=1e-6)


def test_gradient_through_recorded_solve_matches_finite_differences():
    # parameters of a damped oscillator; loss of the state at two output times
    def loss(theta, x0=np.array([1.0, 0.5])):
        f = lambda t, x: T.stack([x[1], -theta[0] * x[0] - theta[1] * x[1]])
        cfg = SolverConfig(first_step=0.2, rtol=1e-3, atol=1e-6)
        rec = integrate_recorded(f, x0, [0.0, 0.35, 1.0], cfg)
        return T.vsum(T.square(rec.stacked())), rec.stats

    theta = np.array([1.3, 0.2])
    tape = T.Tape()
    th = tape.var(theta)
    val, stats = loss(th)
    tape.backward(val)
    # finite differences with the same accepted step sequence: keep the step pattern fixed
    fd = central_diff(lambda p: float(T.value(loss(p)[0])), theta, h=1e-6)
    assert stats["steps"] >= 2
    assert rel_err(th.grad, fd) < 1e-4
