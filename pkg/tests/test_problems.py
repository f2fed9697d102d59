import json
import math

import numpy as np
import pytest

from octoc.problems import (ConfigError, GoddardParams, LQSpec, channel_drift, config_json, kalman_controllable,
                            make_goddard, make_lq, make_zermelo, problem_from_config, problem_to_config,
                            river_drift)


def test_river_drift_values():
    assert river_drift(0.5) == pytest.approx(3.05, abs=1e-15)
    assert river_drift(0.0) == 3.0 and river_drift(1.0) == 3.0


def test_channel_drift_vanishes_on_banks():
    assert channel_drift(2.0) == 0.0 and channel_drift(-2.0) == 0.0
    assert channel_drift(0.0) == 2.0


def test_mintime_dynamics_fixed_speed():
    P = make_zermelo("mintime_point_target")
    f = P.dynamics(0.0, np.array([0.0, 0.5]), np.array([0.5 * math.pi]))
    assert np.allclose(f, [3.05, 1.0])
    assert P.target_point == (20.0, 1.0)


def test_mintime_obstacle_ellipse():
    P = make_zermelo("mintime_point_target", {"obstacle": True})
    assert P.n_state_constraints == 1
    assert float(P.state_constraint(np.array([10.0, 0.4]))[0]) > 0
    assert float(P.state_constraint(np.array([10.0, 0.6]))[0]) < 0


def test_channel_variant_box_and_domain():
    P = make_zermelo("channel_ball_target")
    assert P.control_lo == (0.0, 0.0) and P.control_hi == (1.0, 2 * math.pi)
    assert P.domain_lo == (-5.0, -2.0) and P.domain_hi == (2.0, 2.0)
    f = P.dynamics(0.0, np.array([0.0, 2.0]), np.array([0.0, 0.0]))
    assert np.allclose(f, [0.0, 0.0])


def test_two_obstacle_constraint_values():
    P = make_zermelo("fuel_two_obstacles")
    assert float(P.state_constraint(np.array([-2.0, 0.5]))[0]) == pytest.approx(0.4)
    assert float(P.state_constraint(np.array([-2.5, -1.0]))[0]) == pytest.approx(0.2)
    assert float(P.state_constraint(np.array([0.0, 0.0]))[0]) < 0
    assert float(P.final_constraint(np.array([0.2, 0.0]))[0]) == pytest.approx(0.1)
    assert float(P.running_cost(0.0, np.zeros(2), np.array([0.7, 1.0]))) == pytest.approx(0.7)


def test_unknown_variant():
    with pytest.raises(ConfigError):
        make_zermelo("three_obstacles")
    with pytest.raises(ConfigError):
        make_zermelo("mintime_point_target", {"colour": 1})


def test_goddard_defaults():
    P = GoddardParams()
    assert (P.C_D, P.beta, P.T_max, P.b, P.m_star, P.v_max) == (310.0, 500.0, 3.5, 2.0, 0.6, 0.1)


def test_goddard_drag():
    P = GoddardParams()
    assert P.drag(1.0, 0.0) == 0.0
    assert P.drag(1.0, 0.1) == pytest.approx(3.1, rel=1e-14)
    assert P.drag(1.01, 0.1) == pytest.approx(3.1 * math.exp(-5), abs=1e-6)
    assert P.drag(1.01, 0.1) == pytest.approx(0.0208876, abs=1e-6)


def test_goddard_problem_structure():
    G = make_goddard()
    assert G.state_dim == 3 and G.control_dim == 1 and G.free_time
    assert G.initial_state == (1.0, 0.0, 1.0) and G.nominal_horizon == 0.2
    f = G.dynamics(0.0, np.array([1.0, 0.0, 1.0]), np.array([0.0]))
    assert np.allclose(f, [0.0, -1.0, 0.0])
    f1 = G.dynamics(0.0, np.array([1.0, 0.0, 1.0]), np.array([1.0]))
    assert np.allclose(f1, [0.0, 2.5, -7.0])
    assert float(G.final_cost(np.array([1.2, 0.0, 0.6]))) == -1.2
    assert float(G.state_constraint(np.array([1.0, 0.12, 1.0]))[0]) == pytest.approx(0.02)
    assert float(G.final_constraint(np.array([1.0, 0.0, 0.5]))[0]) == pytest.approx(0.1)


def test_goddard_rejects_nonpositive():
    with pytest.raises(ConfigError):
        GoddardParams(C_D=0.0)
    with pytest.raises(ConfigError):
        make_goddard({"thrust": 1.0})


def scalar_lq(**kw):
    base = dict(A=0.0, B=1.0, Q=1.0, R=1.0, x_hat=1.0, u_hat=0.0, x0=0.0, x1=0.0, T=10.0)
    base.update(kw)
    return make_lq(base)


def test_lq_running_cost():
    lq = scalar_lq()
    P = lq.problem
    assert float(P.running_cost(0.0, np.array([1.0]), np.array([0.0]))) == 0.0
    assert float(P.running_cost(0.0, np.array([0.0]), np.array([0.0]))) == 1.0
    assert P.n_final_constraints == 2
    assert lq.controllable


def test_lq_endpoint_as_paired_inequalities():
    P = scalar_lq(x1=0.5).problem
    g = P.final_constraint(np.array([0.5]))
    assert np.allclose(g, [0.0, 0.0])
    assert np.max(P.final_constraint(np.array([0.6]))) == pytest.approx(0.1)


def test_kalman_rank():
    assert kalman_controllable(np.array([[0.0, 1.0], [0.0, 0.0]]), np.array([[0.0], [1.0]]))
    assert not kalman_controllable(np.eye(2), np.array([[1.0], [1.0]]))


def test_lq_rank_deficiency_only_warns():
    with pytest.warns(UserWarning):
        lq = make_lq(dict(A=np.eye(2), B=[[1.0], [1.0]], Q=np.eye(2), R=1.0, x_hat=[0, 0], u_hat=0.0,
                          x0=[0, 0], x1=[0, 0]))
    assert not lq.controllable


def test_lq_spec_validation():
    with pytest.raises(ConfigError):
        LQSpec(A=0.0, B=1.0, Q=-1.0, R=1.0, x_hat=0.0, u_hat=0.0, x0=0.0, x1=0.0)
    with pytest.raises(ConfigError):
        LQSpec(A=0.0, B=1.0, Q=[[1.0, 2.0], [0.0, 1.0]], R=1.0, x_hat=0.0, u_hat=0.0, x0=0.0, x1=0.0)


@pytest.mark.parametrize("config", [
    {"problem": "zermelo", "variant": "mintime_point_target", "params": {"obstacle": True}},
    {"problem": "zermelo", "variant": "fuel_two_obstacles"},
    {"problem": "goddard", "params": {"v_max": 0.09}},
    {"problem": "lq", "params": {"A": [[0.0]], "B": [[1.0]], "Q": [[1.0]], "R": [[1.0]], "x_hat": [1.0],
                                 "u_hat": [0.0], "x0": [0.0], "x1": [0.0]}},
])
def test_config_round_trip_bit_exact(config):
    P = problem_from_config(config)
    text = config_json(P)
    again = problem_from_config(text)
    assert config_json(again) == text
    assert problem_to_config(again) == json.loads(text)


def test_config_from_file(tmp_path):
    path = tmp_path / "p.json"
    path.write_text(json.dumps({"problem": "goddard"}))
    assert problem_from_config(str(path)).name == "goddard"


@pytest.mark.parametrize("config", [
    {"problem": "zermelo", "extra": 1},
    {"variant": "x"},
    {"problem": "rocket"},
    {"problem": "goddard", "variant": "heavy"},
    {"problem": "zermelo", "params": []},
])
def test_config_rejects_bad_input(config):
    with pytest.raises(ConfigError):
        problem_from_config(config)
