import math

import numpy as np
import pytest

from octoc._jax import jnp
from octoc.problems import LQSpec, river_drift
from octoc.shooting import (DegenerateOrderError, HamiltonianLift, HyperbolicityError, ObstacleCrossingError,
                            extremal, flow, goddard_control_laws, goddard_shooting_spec, hamiltonian_drift,
                            lq_lift, make_control_laws, newton_solve, poisson_bracket, shoot_goddard,
                            shoot_zermelo_penalized, shoot_zermelo_turnpike, turnpike_lq, turnpike_midpoint_shoot,
                            zermelo_hamiltonian, zermelo_turnpike_guess)

SCALAR_LQ = dict(A=[[0.0]], B=[[1.0]], Q=[[1.0]], R=[[1.0]], x_hat=[1.0], u_hat=[0.0], x0=[0.0], x1=[0.0])

# second local solution of the obstacle problem, reached from a guess heading below the obstacle
ZERMELO_GUESS_A = (0.245, 0.09)
ZERMELO_GUESS_B = (0.25, -0.05)


def random_phase_points(n, d, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, d)), rng.standard_normal((n, d))


# ----------------------------------------------------------------------------
# brackets

@pytest.mark.parametrize("backend", ["ad", "fd"])
def test_bracket_of_function_with_itself_vanishes(backend):
    xp = jnp if backend == "ad" else np
    F = lambda x, p: p[0] * xp.sin(x[1]) + x[0] * p[1] ** 2
    br = poisson_bracket(F, F, backend)
    for x, p in zip(*random_phase_points(10, 2)):
        assert abs(float(br(x, p))) <= 1e-6


@pytest.mark.parametrize("backend", ["ad", "fd"])
def test_bracket_hand_example(backend):
    br = poisson_bracket(lambda x, p: p[0] * x[1], lambda x, p: p[1], backend)
    assert float(br(np.array([1.0, 2.0]), np.array([3.0, 4.0]))) == pytest.approx(3.0, abs=1e-6)


@pytest.mark.parametrize("backend", ["ad", "fd"])
def test_bracket_antisymmetry_and_bilinearity(backend):
    xp = jnp if backend == "ad" else np
    F = lambda x, p: p[0] * x[1] ** 2 + xp.cos(x[0]) * p[1]
    G = lambda x, p: p[1] * x[0] + p[0] * p[1]
    K = lambda x, p: x[0] * x[1] * p[0]
    FG, GF = poisson_bracket(F, G, backend), poisson_bracket(G, F, backend)
    sum_bracket = poisson_bracket(F, lambda x, p: 2.0 * G(x, p) + K(x, p), backend)
    FK = poisson_bracket(F, K, backend)
    for x, p in zip(*random_phase_points(20, 2, seed=1)):
        assert float(FG(x, p)) == pytest.approx(-float(GF(x, p)), abs=1e-6)
        assert float(sum_bracket(x, p)) == pytest.approx(2.0 * float(FG(x, p)) + float(FK(x, p)), abs=1e-6)


def test_fd_and_ad_brackets_agree():
    F = lambda x, p: p[0] * x[1] ** 3 + p[1] * x[0]
    G = lambda x, p: p[0] * p[1] + x[0] ** 2
    ad = poisson_bracket(F, G, "ad")
    fd = poisson_bracket(F, G, "fd")
    for x, p in zip(*random_phase_points(10, 2, seed=2)):
        assert float(fd(x, p)) == pytest.approx(float(ad(jnp.asarray(x), jnp.asarray(p))), rel=1e-6, abs=1e-6)


def test_richardson_check_small():
    lift = HamiltonianLift(lambda t, x, p: 0.5 * (p @ p) + jnp.sin(x[0]) * p[1], backend="fd")
    assert lift.richardson_check(0.0, np.array([0.3, -0.2]), np.array([1.0, 0.5])) <= 1e-6


# ----------------------------------------------------------------------------
# control laws

def test_constraint_order_one_on_goddard_domain():
    laws = goddard_control_laws()
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = np.array([1.0 + 0.2 * rng.random(), 0.1 * rng.random(), 0.2 + 0.8 * rng.random()])
        assert float(laws.F1g(jnp.asarray(x))) == pytest.approx(-3.5 / x[2], rel=1e-12)


def test_degenerate_constraint_order_raises():
    laws = make_control_laws(lambda x: jnp.array([1.0, 0.0]), lambda x: jnp.array([1.0, 0.0]),
                             lambda x: x[1])
    with pytest.raises(DegenerateOrderError):
        laws.u_b(np.array([0.0, 0.0]))
    with pytest.raises(DegenerateOrderError):
        laws.u_s(np.array([0.0, 0.0]), np.array([1.0, 1.0]))


def test_double_integrator_laws():
    # x' = (x2, u): H1 = p2, H01 = -p1, H001 = 0 and H101 = 0 (a degenerate singular arc)
    laws = make_control_laws(lambda x: jnp.array([x[1], 0.0]), lambda x: jnp.array([0.0, 1.0]),
                             lambda x: 1.0 - x[1])
    x, p = jnp.array([0.5, 0.2]), jnp.array([0.7, -0.3])
    assert float(laws.H01(x, p)) == pytest.approx(-0.7)
    assert float(laws.F0g(x)) == 0.0 and float(laws.F1g(x)) == -1.0
    assert laws.u_b(np.array([0.5, 0.2])) == 0.0
    assert laws.mu_b(np.array([0.5, 0.2]), np.array([0.7, -0.3])) == pytest.approx(0.7)


def test_goddard_singular_arc_lies_on_switching_surface(goddard_reference):
    laws = goddard_control_laws()
    ext = goddard_reference.extremal
    on_singular = np.flatnonzero(ext.arc_index == 1)
    k = on_singular[on_singular.size // 2]
    x, p = jnp.asarray(ext.states[k]), jnp.asarray(ext.costates[k])
    assert abs(float(laws.H1(x, p))) <= 1e-2
    assert abs(float(laws.H01(x, p))) <= 1e-2


def test_goddard_boundary_control_inside_box(goddard_reference):
    ext = goddard_reference.extremal
    u = ext.controls[ext.arc_index == 2, 0]
    assert np.all((u > 0.0) & (u < 1.0))


def test_goddard_boundary_multiplier_nonnegative(goddard_reference):
    assert np.min(goddard_reference.multiplier) >= -1e-6


# ----------------------------------------------------------------------------
# flows

def test_free_particle_flow():
    lift = HamiltonianLift(lambda t, x, p: 0.5 * (p @ p))
    x1, p1 = flow(lift, 0.0, [1.0, -2.0], [0.5, 0.25], 3.0)
    assert np.allclose(x1, [2.5, -1.25], atol=1e-10) and np.allclose(p1, [0.5, 0.25])


def test_harmonic_oscillator_conserves_radius():
    lift = HamiltonianLift(lambda t, x, p: 0.5 * (p @ p + x @ x))
    traj = extremal(lift, 0.0, [1.0], [0.0], 2 * math.pi)
    radius = np.linalg.norm(traj.states, axis=1)
    assert np.max(np.abs(radius - 1.0)) <= 1e-8
    assert np.allclose(traj.states[-1], [1.0, 0.0], atol=1e-8)


def test_zermelo_flow_keeps_p1_constant():
    lift = HamiltonianLift(zermelo_hamiltonian(0.0, obstacle=False))
    traj = extremal(lift, 0.0, [0.0, 0.0], [0.25, 0.09], 5.0)
    assert np.max(np.abs(traj.states[:, 2] - 0.25)) <= 1e-12
    assert hamiltonian_drift(lift, traj) <= 1e-6 * (1 + abs(lift(0.0, [0.0, 0.0], [0.25, 0.09])))


def test_backward_flow_inverts_forward_flow():
    lift = HamiltonianLift(lambda t, x, p: 0.5 * (p @ p) - jnp.cos(x[0]))
    x1, p1 = flow(lift, 0.0, [0.3], [0.2], 2.0)
    x0, p0 = flow(lift, 2.0, x1, p1, 0.0)
    assert np.allclose([x0[0], p0[0]], [0.3, 0.2], atol=1e-9)


# ----------------------------------------------------------------------------
# Newton

def test_newton_scalar_root():
    res = newton_solve(lambda z: z**2 - 4.0, [3.0])
    assert res.converged and abs(res.z[0] - 2.0) <= 1e-10


def test_newton_affine_in_one_iteration():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    b = np.array([1.0, -1.0])
    # one step is exact up to the rounding in the forward-difference Jacobian
    res = newton_solve(lambda z: A @ z - b, [10.0, -7.0], max_iter=1)
    assert np.allclose(res.z, np.linalg.solve(A, b), atol=1e-6)
    assert res.history[1] <= 1e-8 * res.history[0]


def test_newton_circle_line():
    res = newton_solve(lambda z: np.array([z[0] ** 2 + z[1] ** 2 - 1.0, z[0] - z[1]]), [1.0, 0.0])
    assert np.allclose(res.z, [math.sqrt(0.5)] * 2, atol=1e-8)


def test_newton_statuses():
    assert newton_solve(lambda z: np.array([z[0] + z[1] - 1.0, 2.0 * (z[0] + z[1])]), [0.0, 0.0]).status == \
        "singular_jacobian"
    assert newton_solve(lambda z: np.array([math.atan(z[0]) - 1.0]), [0.0], max_iter=1).status == "max_iter"
    assert newton_solve(lambda z: np.array([z[0] ** 2 + 1.0]), [1.0]).status == "no_decrease"


# ----------------------------------------------------------------------------
# Zermelo shooting

def test_zermelo_initialization_a():
    res = shoot_zermelo_penalized(ZERMELO_GUESS_A, 5.0)
    assert res.newton.converged
    assert res.tf == pytest.approx(4.98, abs=5e-3)


def test_zermelo_initialization_b():
    res = shoot_zermelo_penalized(ZERMELO_GUESS_B, 5.0)
    assert res.newton.converged
    assert res.tf == pytest.approx(4.99, abs=5e-3)


def test_zermelo_barrier_solution_matches_oracle(oracle):
    ref = oracle["zermelo_barrier_1e-3"]
    res = shoot_zermelo_penalized(ZERMELO_GUESS_A, 5.0)
    assert np.allclose(res.p0, ref["p0"], atol=1e-7)
    assert res.tf == pytest.approx(ref["tf"], abs=1e-7)
    assert np.max(np.abs(res.residual)) <= 1e-8


def test_zermelo_unpenalized_limit(oracle):
    res = shoot_zermelo_penalized(ZERMELO_GUESS_A, 5.0, alpha=0.0, obstacle=False)
    assert res.tf == pytest.approx(oracle["zermelo_free"]["tf"], abs=1e-7)


def test_zermelo_unpenalized_limit_reference_value():
    res = shoot_zermelo_penalized(ZERMELO_GUESS_A, 5.0, alpha=0.0, obstacle=False)
    assert res.tf == pytest.approx(4.949, abs=5e-3)


def test_zermelo_guess_through_obstacle_rejected_without_relaxation():
    with pytest.raises(ObstacleCrossingError):
        shoot_zermelo_penalized((0.25, 0.08), 5.0, relaxations=())


def test_zermelo_turnpike_guess():
    p, tf = zermelo_turnpike_guess()
    assert p[0] == pytest.approx(1.0 / (1.0 + river_drift(0.5)))
    assert p[0] == pytest.approx(0.246914, abs=1e-6)
    assert tf == pytest.approx(49.38, abs=0.01)


@pytest.mark.slow
def test_zermelo_turnpike_spends_time_near_fast_lane():
    res = shoot_zermelo_turnpike()
    assert res.newton.converged
    ext = res.extremal
    t = ext.times
    near = np.abs(ext.states[:, 1] - 0.5) <= 0.05
    # time fraction by left-rectangle weights on the nonuniform adaptive mesh
    fraction = np.sum(np.diff(t)[near[:-1]]) / (t[-1] - t[0])
    assert fraction >= 0.8


# ----------------------------------------------------------------------------
# Goddard shooting

def test_goddard_residual_is_square():
    spec = goddard_shooting_spec()
    z = np.concatenate([[3.9, 0.15, 0.05], [0.024, 0.06, 0.1, 0.2]])
    spec.check_square(z)


def test_goddard_against_oracle(goddard_reference, oracle):
    ref = oracle["goddard_shooting"]
    assert goddard_reference.newton.converged
    assert np.allclose(goddard_reference.p0, ref["p0"], rtol=1e-6)
    assert np.allclose(np.append(goddard_reference.switch_times, goddard_reference.tf), ref["times"], rtol=1e-6)
    assert goddard_reference.final_altitude == pytest.approx(ref["final_altitude"], rel=1e-8)


def test_goddard_residual_at_solution(goddard_reference):
    assert np.max(np.abs(goddard_reference.residual)) <= 1e-8


def test_goddard_hamiltonian_conserved_on_each_arc(goddard_reference):
    ext = goddard_reference.extremal
    spec = goddard_shooting_spec()
    for k, arc in enumerate(spec.arcs):
        idx = ext.arc_index == k
        vals = np.array([arc.lift(0.0, x, p) for x, p in zip(ext.states[idx], ext.costates[idx])])
        assert np.max(np.abs(vals)) <= 1e-6


def test_goddard_from_published_hjb_row():
    res = shoot_goddard([3.945, 1.476e-1, 5.174e-2], 2.912e-2, 4.980e-2, 8.735e-2, 1.747e-1)
    assert res.newton.converged
    assert np.allclose(res.p0, [3.945, 1.504e-1, 5.371e-2], rtol=1e-2)


def test_goddard_rejects_unordered_guess():
    from octoc.shooting import ArcOrderError

    with pytest.raises(ArcOrderError):
        shoot_goddard([3.9, 0.15, 0.05], 0.05, 0.03, 0.1, 0.2)


# ----------------------------------------------------------------------------
# LQ turnpike

def test_scalar_turnpike_static_solution():
    tp = turnpike_lq(LQSpec(**SCALAR_LQ))
    assert np.allclose([tp.x_bar[0], tp.u_bar[0], tp.p_bar[0]], [1.0, 0.0, 0.0], atol=1e-12)
    assert np.allclose(tp.M, [[0.0, 1.0], [1.0, 0.0]])
    assert sorted(tp.eigenvalues.real) == pytest.approx([-1.0, 1.0])
    assert tp.nu == pytest.approx(1.0)


def test_zero_tracking_targets_give_zero_static_solution():
    tp = turnpike_lq(LQSpec(**{**SCALAR_LQ, "x_hat": [0.0]}))
    assert np.all(tp.x_bar == 0) and np.all(tp.u_bar == 0) and np.all(tp.p_bar == 0)


def test_stationarity_of_static_solution():
    spec = LQSpec(A=[[0.2, 1.0], [-0.5, 0.1]], B=[[0.0], [1.0]], Q=np.diag([2.0, 1.0]), R=[[0.5]],
                  x_hat=[1.0, -1.0], u_hat=[0.3], x0=[0.0, 0.0], x1=[0.0, 0.0])
    tp = turnpike_lq(spec)
    lhs = tp.M @ np.concatenate([tp.x_bar, tp.p_bar]) + np.concatenate([spec.B @ spec.u_hat, -spec.Q @ spec.x_hat])
    assert np.max(np.abs(lhs)) <= 1e-10


@pytest.mark.parametrize("seed", range(10))
def test_random_controllable_instances_are_hyperbolic(seed):
    rng = np.random.default_rng(seed)
    d, r = 3, 2
    A, B = rng.standard_normal((d, d)), rng.standard_normal((d, r))
    G, S = rng.standard_normal((d, d)), rng.standard_normal((r, r))
    spec = LQSpec(A=A, B=B, Q=G @ G.T + 0.1 * np.eye(d), R=S @ S.T + 0.1 * np.eye(r), x_hat=np.ones(d),
                  u_hat=np.zeros(r), x0=np.zeros(d), x1=np.zeros(d))
    assert turnpike_lq(spec).nu > 0


def test_imaginary_axis_eigenvalue_raises():
    # with B = 0 the spectrum of M is that of A and -A^T: a rotation puts it on the imaginary axis
    spec = LQSpec(A=[[0.0, 1.0], [-1.0, 0.0]], B=[[0.0], [0.0]], Q=np.eye(2), R=[[1.0]], x_hat=[0.0, 0.0],
                  u_hat=[0.0], x0=[0.0, 0.0], x1=[0.0, 0.0])
    with pytest.raises(HyperbolicityError):
        turnpike_lq(spec)


def test_midpoint_shoot_near_static_state(oracle):
    res = turnpike_midpoint_shoot(LQSpec(**SCALAR_LQ, T=20.0), 20.0)
    expected = oracle["lq_scalar_midpoint_deviation"]["20"]
    assert abs(res.midpoint_state[0] - 1.0) <= 1e-3
    assert abs(1.0 - res.midpoint_state[0]) == pytest.approx(expected, rel=1e-4)


def test_midpoint_deviation_decreases(oracle):
    devs = [abs(turnpike_midpoint_shoot(LQSpec(**SCALAR_LQ, T=T), T).midpoint_state[0] - 1.0) for T in (10, 20, 40)]
    assert devs[0] > devs[1] > devs[2]
    for T, dev in zip((10, 20, 40), devs):
        assert dev == pytest.approx(oracle["lq_scalar_midpoint_deviation"][str(T)], rel=1e-3, abs=1e-9)


def test_midpoint_shoot_short_horizon_still_converges():
    res = turnpike_midpoint_shoot(LQSpec(**SCALAR_LQ, T=1.0), 1.0)
    assert res.newton.residual_norm <= 1e-8
    assert abs(res.midpoint_state[0] - 1.0) > 0.5


def test_lq_lift_conserves_hamiltonian():
    spec = LQSpec(**SCALAR_LQ, T=5.0)
    lift = lq_lift(spec)
    traj = extremal(lift, 0.0, [0.0], [0.7], 5.0)
    assert hamiltonian_drift(lift, traj) <= 1e-6 * (1 + abs(lift(0.0, [0.0], [0.7])))
