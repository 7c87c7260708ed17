import numpy as np
import pytest

from densitycontrol import (
    Ball,
    ConstantPolicy,
    ControlledSystem,
    FiniteSet,
    GoalRegion,
    NonFiniteState,
    SupplyFunction,
    extended_liouville_integrate,
    integrate,
    reverse_flow,
)


def make_decay_system():
    """xdot = -x regardless of input."""
    return ControlledSystem(
        dim=1,
        drift=lambda x, u, d=None: -np.atleast_2d(x),
        input_set=FiniteSet(((0.0,),)),
        running_cost=lambda x, u=None: np.zeros(np.atleast_2d(x).shape[0]),
        divergence=lambda x, u, d=None: -np.ones(np.atleast_2d(x).shape[0]),
        working_lower=(-4.0,),
        working_upper=(4.0,),
    )


def make_integrator_2d(goal_radius=0.1):
    goal = GoalRegion(
        predicate=lambda x: np.linalg.norm(x, axis=1) <= goal_radius + 1e-9,
        centroid=(0.0, 0.0),
    )
    return ControlledSystem(
        dim=2,
        drift=lambda x, u, d=None: np.broadcast_to(np.asarray(u, float), np.atleast_2d(x).shape),
        input_set=Ball(0.5, 2),
        running_cost=lambda x, u=None: np.ones(np.atleast_2d(x).shape[0]),
        goal=goal,
        working_lower=(-2.0, -2.0),
        working_upper=(2.0, 2.0),
    )


zero_policy = ConstantPolicy([0.0])


def test_integrate_zero_drift_constant():
    sys0 = ControlledSystem(
        dim=1,
        drift=lambda x, u, d=None: np.zeros_like(np.atleast_2d(x)),
        input_set=FiniteSet(((0.0,),)),
        running_cost=lambda x, u=None: np.zeros(np.atleast_2d(x).shape[0]),
    )
    traj = integrate(sys0, zero_policy, [1.3], 1.0, 0.01)
    np.testing.assert_allclose(traj.states, 1.3)
    assert traj.times[-1] == pytest.approx(1.0)


def test_integrate_exponential_decay():
    traj = integrate(make_decay_system(), zero_policy, [1.0], 1.0, 1e-3)
    assert traj.states[-1, 0] == pytest.approx(np.exp(-1.0), abs=1e-6)
    assert len(traj.times) == 1001


def test_integrate_stops_at_goal():
    sys2 = make_integrator_2d()

    def aim_policy(x):
        x = np.atleast_2d(np.asarray(x, float))
        n = np.linalg.norm(x, axis=1, keepdims=True)
        return -0.5 * x / np.where(n > 0, n, 1.0)

    traj = integrate(sys2, aim_policy, [1.0, 0.0], 5.0, 1e-3)
    # straight travel at speed 0.5 covers the 0.9 gap at t = 1.8
    assert traj.times[-1] == pytest.approx(1.8, abs=5e-3)
    assert np.linalg.norm(traj.states[-1]) == pytest.approx(0.1, abs=1e-6)


def test_rk4_order_error_ratio():
    sys1 = make_decay_system()
    errs = []
    for dt in (0.04, 0.02):
        traj = integrate(sys1, zero_policy, [1.0], 1.0, dt)
        errs.append(abs(traj.states[-1, 0] - np.exp(-1.0)))
    ratio = errs[0] / errs[1]
    assert 12.0 <= ratio <= 20.0


def test_integrate_nonfinite_raises():
    blow = ControlledSystem(
        dim=1,
        drift=lambda x, u, d=None: np.atleast_2d(x) ** 2,
        input_set=FiniteSet(((0.0,),)),
        running_cost=lambda x, u=None: np.zeros(np.atleast_2d(x).shape[0]),
    )
    with pytest.raises(NonFiniteState):
        integrate(blow, zero_policy, [5.0], 10.0, 0.1)


def test_reverse_flow_zero_time_identity():
    x = reverse_flow(make_decay_system(), zero_policy, [0.7], 0.0, 1e-3)
    assert x[0] == pytest.approx(0.7)


def test_reverse_flow_inverts_decay():
    x = reverse_flow(make_decay_system(), zero_policy, [np.exp(-1.0)], 1.0, 1e-3)
    assert x[0] == pytest.approx(1.0, abs=1e-6)


def test_forward_then_reverse_returns_start():
    sys1 = make_decay_system()
    traj = integrate(sys1, zero_policy, [0.9], 0.7, 1e-3)
    back = reverse_flow(sys1, zero_policy, traj.states[-1], 0.7, 1e-3)
    assert back[0] == pytest.approx(0.9, abs=1e-6)


def test_flow_consistency_tolerance_scales_with_dt():
    sys1 = make_decay_system()
    for dt in (0.01, 0.002):
        traj = integrate(sys1, zero_policy, [1.1], 0.5, dt)
        back = reverse_flow(sys1, zero_policy, traj.states[-1], 0.5, dt)
        assert abs(back[0] - 1.1) <= 10 * dt


def test_extended_liouville_decay_density_grows():
    supply = SupplyFunction(sink_mode="none")
    traj = extended_liouville_integrate(make_decay_system(), zero_policy, supply, [1.0], 1.0, 1.0, 1e-3)
    assert traj.rho[-1] == pytest.approx(np.e, abs=1e-5)


def test_extended_liouville_divergence_free_constant_density():
    sys_rot = ControlledSystem(
        dim=2,
        drift=lambda x, u, d=None: np.stack([-np.atleast_2d(x)[:, 1], np.atleast_2d(x)[:, 0]], axis=1),
        input_set=FiniteSet(((0.0, 0.0),)),
        running_cost=lambda x, u=None: np.zeros(np.atleast_2d(x).shape[0]),
        divergence=lambda x, u, d=None: np.zeros(np.atleast_2d(x).shape[0]),
        working_lower=(-3.0, -3.0),
        working_upper=(3.0, 3.0),
    )
    supply = SupplyFunction(sink_mode="none")
    traj = extended_liouville_integrate(sys_rot, ConstantPolicy([0.0, 0.0]), supply, [1.0, 0.0], 0.8, 2.0, 1e-3)
    np.testing.assert_allclose(traj.rho, 0.8, atol=1e-9)


def test_extended_liouville_discount_cancels_divergence():
    # f = -x gives div = -1, and phi = -rho exactly cancels the growth
    supply = SupplyFunction(sink_mode="discount", kappa=1.0)
    traj = extended_liouville_integrate(make_decay_system(), zero_policy, supply, [1.0], 0.6, 1.5, 1e-3)
    np.testing.assert_allclose(traj.rho, 0.6, atol=1e-9)


def test_density_along_linear_system_matches_trace_law():
    a_mat = np.array([[-0.3, 0.4], [-0.2, -0.5]])
    sys_lin = ControlledSystem(
        dim=2,
        drift=lambda x, u, d=None: np.atleast_2d(x) @ a_mat.T,
        input_set=FiniteSet(((0.0, 0.0),)),
        running_cost=lambda x, u=None: np.zeros(np.atleast_2d(x).shape[0]),
        divergence=lambda x, u, d=None: np.full(np.atleast_2d(x).shape[0], np.trace(a_mat)),
        working_lower=(-3.0, -3.0),
        working_upper=(3.0, 3.0),
    )
    supply = SupplyFunction(sink_mode="none")
    t_end = 1.2
    traj = extended_liouville_integrate(
        sys_lin, ConstantPolicy([0.0, 0.0]), supply, [0.8, -0.4], 1.0, t_end, 1e-3
    )
    expect = np.exp(-np.trace(a_mat) * t_end)
    assert traj.rho[-1] == pytest.approx(expect, rel=1e-5)


def test_numeric_divergence_fallback_matches_analytic():
    # same system with and without the analytic divergence callback
    supply = SupplyFunction(sink_mode="none")
    sys_analytic = make_decay_system()
    sys_numeric = ControlledSystem(
        dim=1,
        drift=sys_analytic.drift,
        input_set=sys_analytic.input_set,
        running_cost=sys_analytic.running_cost,
        working_lower=(-4.0,),
        working_upper=(4.0,),
    )
    t1 = extended_liouville_integrate(sys_analytic, zero_policy, supply, [1.0], 1.0, 1.0, 1e-3)
    t2 = extended_liouville_integrate(sys_numeric, zero_policy, supply, [1.0], 1.0, 1.0, 1e-3)
    assert t1.rho[-1] == pytest.approx(t2.rho[-1], rel=1e-9)


def test_trajectory_csv_dump(tmp_path):
    traj = integrate(make_decay_system(), zero_policy, [1.0], 0.1, 0.01)
    path = tmp_path / "traj.csv"
    traj.dump_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,x0"
    assert len(lines) == len(traj.times) + 1
