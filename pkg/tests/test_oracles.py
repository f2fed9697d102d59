"""Second routes to the frozen reference values, using only numpy and scipy."""
import math

import numpy as np
import pytest
from scipy.integrate import solve_bvp, solve_ivp


def test_frozen_file_has_every_reference(oracle):
    assert {"goddard_shooting", "zermelo_free", "zermelo_barrier_1e-3", "lq_double_integrator",
            "lq_scalar_midpoint_deviation", "plan_n2_w"} <= set(oracle)


def test_double_integrator_cost_by_collocation(oracle):
    # stationarity of x'Qx + u'Ru with u = p2 / 2: x1' = x2, x2' = p2 / 2, p1' = 2 x1, p2' = 2 x2 - p1
    def rhs(t, y):
        x1, x2, p1, p2, _ = y
        return np.vstack([x2, p2 / 2, 2 * x1, 2 * x2 - p1, x1**2 + x2**2 + (p2 / 2) ** 2])

    def bc(ya, yb):
        return np.array([ya[0] - 1.0, ya[1], yb[0], yb[1], ya[4]])

    t = np.linspace(0.0, 2.0, 41)
    sol = solve_bvp(rhs, bc, t, np.zeros((5, t.size)), tol=1e-10, max_nodes=100000)
    assert sol.success
    assert sol.y[4, -1] == pytest.approx(oracle["lq_double_integrator"]["cost"], abs=1e-8)


@pytest.mark.parametrize("T", [10, 20, 40])
def test_scalar_midpoint_deviation_by_collocation(oracle, T):
    # x' = u, cost (x - 1)^2 + u^2: x'' = x - 1 with x(0) = x(T) = 0
    sol = solve_bvp(lambda t, y: np.vstack([y[1], y[0] - 1.0]), lambda a, b: np.array([a[0], b[0]]),
                    np.linspace(0, T, 2001), np.zeros((2, 2001)), tol=1e-10, max_nodes=1000000)
    assert sol.success
    deviation = abs(sol.sol(T / 2)[0] - 1.0)
    assert deviation == pytest.approx(oracle["lq_scalar_midpoint_deviation"][str(T)], rel=1e-6, abs=1e-12)


def test_plan_instance_value_by_hand(oracle):
    # J = (u0 + u1) / 2 - 0.05 on [0, 1]^2 is smallest at u = 0
    assert oracle["plan_n2_w"] == pytest.approx(-0.05, abs=1e-15)


def zermelo_rhs(t, y):
    y1, y2, p1, p2 = y
    norm = math.hypot(p1, p2)
    drift = 3 + 0.2 * y2 * (1 - y2)
    return [p1 / norm + drift, p2 / norm, 0.0, -p1 * 0.2 * (1 - 2 * y2)]


def test_free_zermelo_extremal_hits_target(oracle):
    ref = oracle["zermelo_free"]
    p1, p2 = ref["p0"]
    end = solve_ivp(zermelo_rhs, (0, ref["tf"]), [0, 0, p1, p2], method="DOP853", rtol=1e-12, atol=1e-12).y[:, -1]
    assert np.allclose(end[:2], [20.0, 1.0], atol=1e-7)
    assert math.hypot(p1, p2) + 3 * p1 - 1 == pytest.approx(0.0, abs=1e-9)


def test_barrier_solution_is_slower_than_free(oracle):
    assert oracle["zermelo_barrier_1e-3"]["tf"] > oracle["zermelo_free"]["tf"]


def test_goddard_reference_is_ordered(oracle):
    ref = oracle["goddard_shooting"]
    t1, t2, t3, tf = ref["times"]
    assert 0 < t1 < t2 < t3 < tf
    assert ref["final_altitude"] > 1.0
