"""Indirect (maximum principle) methods: Hamiltonian lifts, brackets, extremal flows and shooting.

Derivatives of phase functions default to automatic differentiation through
jax (``backend="ad"``). Central finite differences (``backend="fd"``) remain
available for callables jax cannot trace and serve as an independent check.
Phase functions take ``(x, p)``; Hamiltonian lifts take ``(t, x, p)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from ._jax import jax, jnp
from .core import DivergedError, StepSizeError, Trajectory, integrate_adaptive
from .problems import (GoddardParams, LQSpec, OBSTACLE_CENTER, OBSTACLE_SEMI_AXES, make_goddard,
                       river_drift)


class ResidualFailure(RuntimeError):
    """A shooting residual could not be evaluated at the requested unknowns."""


class ArcOrderError(ResidualFailure):
    """Switching times are not strictly increasing."""


class ObstacleCrossingError(ResidualFailure):
    """An extremal entered the obstacle, where the log barrier is undefined."""


class DegenerateOrderError(ArithmeticError):
    """A denominator of a singular or boundary feedback law vanished."""


class HyperbolicityError(ArithmeticError):
    """The LQ Hamiltonian matrix has an eigenvalue on the imaginary axis."""


_FAILURES = (ResidualFailure, DivergedError, StepSizeError, FloatingPointError, ZeroDivisionError)


# ----------------------------------------------------------------------------
# Finite differences

def fd_step(value: float, h_fd: float = 1e-6) -> float:
    return h_fd * (1.0 + abs(value))


def fd_gradient(fun: Callable, z, h_fd: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of a vector."""
    z = np.asarray(z, dtype=float)
    g = np.empty_like(z)
    for i in range(z.size):
        h = fd_step(z[i], h_fd)
        e = np.zeros_like(z)
        e[i] = h
        g[i] = (float(fun(z + e)) - float(fun(z - e))) / (2 * h)
    return g


def _split(fun2: Callable, d: int) -> Callable:
    return lambda z: fun2(z[:d], z[d:])


def phase_gradient(F: Callable, x, p, backend: str = "ad", h_fd: float = 1e-6):
    """Return ``(dF/dx, dF/dp)`` of a phase function ``F(x, p)``."""
    if backend == "ad":
        gx, gp = jax.grad(F, argnums=(0, 1))(x, p)
        return gx, gp
    if backend == "fd":
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        g = fd_gradient(_split(F, x.size), np.concatenate([x, p]), h_fd)
        return g[: x.size], g[x.size:]
    raise ValueError(f"unknown derivative backend {backend!r}")


# ----------------------------------------------------------------------------
# Hamiltonian lifts and flows

@dataclass
class HamiltonianLift:
    """Scalar Hamiltonian ``H(t, x, p)`` with its gradients.

    ``label`` records which control law is embedded (e.g. ``"bang u=1"``,
    ``"singular"``, ``"boundary"``).
    """

    H: Callable
    backend: str = "ad"
    h_fd: float = 1e-6
    label: str = ""
    _value: Callable = field(init=False, repr=False)
    _grads: Callable = field(init=False, repr=False)
    _field: Callable = field(init=False, repr=False)

    def __post_init__(self):
        if self.backend == "ad":
            H = self.H
            self._value = jax.jit(H)
            self._grads = jax.jit(jax.grad(H, argnums=(1, 2)))

            def vector_field(t, z):
                d = z.shape[0] // 2
                gx, gp = jax.grad(H, argnums=(1, 2))(t, z[:d], z[d:])
                return jnp.concatenate([gp, -gx])

            self._field = jax.jit(vector_field)
        elif self.backend != "fd":
            raise ValueError(f"unknown derivative backend {self.backend!r}")

    def __call__(self, t, x, p) -> float:
        if self.backend == "ad":
            return float(self._value(float(t), jnp.asarray(x, dtype=float), jnp.asarray(p, dtype=float)))
        return float(self.H(t, np.asarray(x, dtype=float), np.asarray(p, dtype=float)))

    def gradient(self, t, x, p, h_fd: Optional[float] = None):
        """Return ``(dH/dx, dH/dp)`` as numpy arrays."""
        if self.backend == "ad" and h_fd is None:
            gx, gp = self._grads(float(t), jnp.asarray(x, dtype=float), jnp.asarray(p, dtype=float))
            return np.asarray(gx), np.asarray(gp)
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        g = fd_gradient(lambda z: self.H(t, z[: x.size], z[x.size:]), np.concatenate([x, p]),
                        h_fd or self.h_fd)
        return g[: x.size], g[x.size:]

    def vector_field(self, t, z) -> np.ndarray:
        """Hamiltonian vector field ``(dH/dp, -dH/dx)`` on the stacked vector ``z = (x, p)``."""
        if self.backend == "ad":
            return np.asarray(self._field(float(t), jnp.asarray(z, dtype=float)))
        z = np.asarray(z, dtype=float)
        d = z.size // 2
        gx, gp = self.gradient(t, z[:d], z[d:])
        return np.concatenate([gp, -gx])

    def richardson_check(self, t, x, p) -> float:
        """Max discrepancy between central-difference gradients at steps ``h`` and ``h/2``.

        Relative to the gradient scale; small values mean the step is in the
        truncation-dominated regime.
        """
        gx1, gp1 = self.gradient(t, x, p, h_fd=self.h_fd)
        gx2, gp2 = self.gradient(t, x, p, h_fd=self.h_fd / 2)
        g1 = np.concatenate([gx1, gp1])
        g2 = np.concatenate([gx2, gp2])
        return float(np.max(np.abs(g1 - g2)) / (1.0 + np.max(np.abs(g2))))


def poisson_bracket(F: Callable, G: Callable, backend: str = "ad", h_fd: float = 1e-6) -> Callable:
    """Bracket ``{F, G}(x, p) = dF/dx . dG/dp - dF/dp . dG/dx`` of two phase functions.

    With ``backend="ad"`` the result is itself jax-traceable and can be nested.
    """
    if backend == "ad":
        def bracket(x, p):
            Fx, Fp = jax.grad(F, argnums=(0, 1))(x, p)
            Gx, Gp = jax.grad(G, argnums=(0, 1))(x, p)
            return jnp.dot(Fx, Gp) - jnp.dot(Fp, Gx)

        return bracket

    def bracket_fd(x, p):
        Fx, Fp = phase_gradient(F, x, p, "fd", h_fd)
        Gx, Gp = phase_gradient(G, x, p, "fd", h_fd)
        return float(Fx @ Gp - Fp @ Gx)

    return bracket_fd


def lie_derivative(vector_field: Callable, g: Callable, backend: str = "ad", h_fd: float = 1e-6) -> Callable:
    """``(F . g)(x) = grad g(x) . F(x)``."""
    if backend == "ad":
        return lambda x: jnp.dot(jax.grad(g)(x), vector_field(x))
    return lambda x: float(fd_gradient(g, x, h_fd) @ np.asarray(vector_field(x), dtype=float))


@dataclass
class ControlLaws:
    """Feedback laws of a single-input affine system ``x' = F0 + u F1`` with one order-one constraint.

    Bracket names follow the usual index notation, e.g. ``H01`` is the bracket
    of ``H0`` with ``H1`` oriented so that ``d/dt H1 = H01`` along extremals.
    """

    H0: Callable
    H1: Callable
    H01: Callable
    H001: Callable
    H101: Callable
    F0g: Callable
    F1g: Callable
    g: Callable
    u_s_raw: Callable
    u_b_raw: Callable
    mu_b_raw: Callable
    backend: str = "ad"

    def _eval(self, fn, *args) -> float:
        return float(fn(*[jnp.asarray(a, dtype=float) if self.backend == "ad" else np.asarray(a, dtype=float)
                          for a in args]))

    def u_s(self, x, p) -> float:
        den = self._eval(self.H101, x, p)
        if abs(den) < 1e-12:
            raise DegenerateOrderError("H101 vanishes: singular control is not of order one")
        return -self._eval(self.H001, x, p) / den

    def u_b(self, x) -> float:
        den = self._eval(self.F1g, x)
        if abs(den) < 1e-12:
            raise DegenerateOrderError("F1.g vanishes: constraint is not of order one")
        return -self._eval(self.F0g, x) / den

    def mu_b(self, x, p) -> float:
        den = self._eval(self.F1g, x)
        if abs(den) < 1e-12:
            raise DegenerateOrderError("F1.g vanishes: constraint is not of order one")
        return self._eval(self.H01, x, p) / den


def make_control_laws(F0: Callable, F1: Callable, g: Callable, backend: str = "ad",
                      h_fd: float = 1e-6) -> ControlLaws:
    """Singular control ``-H001/H101``, boundary control ``-(F0.g)/(F1.g)`` and multiplier ``H01/(F1.g)``.

    ``F0``, ``F1`` map a state to a vector field value and ``g`` is the scalar
    constraint (feasible side ``g >= 0`` on the boundary arc convention).
    """
    if backend == "ad":
        H0 = lambda x, p: jnp.dot(p, F0(x))
        H1 = lambda x, p: jnp.dot(p, F1(x))
    else:
        H0 = lambda x, p: float(np.dot(p, F0(x)))
        H1 = lambda x, p: float(np.dot(p, F1(x)))
    # d/dt H1 = {H1, H0} with the bracket orientation of poisson_bracket
    H01 = poisson_bracket(H1, H0, backend, h_fd)
    H001 = poisson_bracket(H01, H0, backend, h_fd)
    H101 = poisson_bracket(H01, H1, backend, h_fd)
    F0g = lie_derivative(F0, g, backend, h_fd)
    F1g = lie_derivative(F1, g, backend, h_fd)
    return ControlLaws(
        H0=H0, H1=H1, H01=H01, H001=H001, H101=H101, F0g=F0g, F1g=F1g, g=g,
        u_s_raw=lambda x, p: -H001(x, p) / H101(x, p),
        u_b_raw=lambda x: -F0g(x) / F1g(x),
        mu_b_raw=lambda x, p: H01(x, p) / F1g(x),
        backend=backend,
    )


def extremal(lift: HamiltonianLift, t0: float, x0, p0, t1: float, tol: float = 1e-12) -> Trajectory:
    """Integrate ``x' = dH/dp, p' = -dH/dx``; states of the result are stacked ``(x, p)``."""
    z0 = np.concatenate([np.atleast_1d(np.asarray(x0, dtype=float)), np.atleast_1d(np.asarray(p0, dtype=float))])
    return integrate_adaptive(lift.vector_field, t0, z0, t1, rtol=tol, atol=tol)


def flow(lift: HamiltonianLift, t0: float, x0, p0, t1: float, tol: float = 1e-12):
    """Endpoint ``(x(t1), p(t1))`` of the Hamiltonian flow started at ``(x0, p0)``."""
    traj = extremal(lift, t0, x0, p0, t1, tol)
    z = traj.states[-1] if t1 >= t0 else traj.states[0]
    d = z.size // 2
    return z[:d].copy(), z[d:].copy()


# ----------------------------------------------------------------------------
# Newton

@dataclass
class NewtonResult:
    z: np.ndarray
    status: str
    iterations: int
    residual_norm: float
    history: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def _safe_eval(G, z):
    try:
        r = np.asarray(G(z), dtype=float)
    except _FAILURES:
        return None
    return r if np.all(np.isfinite(r)) else None


def newton_solve(G: Callable, z0, tol: float = 1e-10, max_iter: int = 50,
                 jac_step: float = 1e-7, max_halvings: int = 20) -> NewtonResult:
    """Damped Newton with a forward-difference Jacobian and step halving on ``|G|``.

    Residual evaluations that raise a shooting failure are treated as rejected
    trial points. Statuses: ``converged``, ``singular_jacobian``,
    ``no_decrease``, ``max_iter``.
    """
    z = np.atleast_1d(np.asarray(z0, dtype=float)).copy()
    r = np.asarray(G(z), dtype=float)
    if not np.all(np.isfinite(r)):
        raise ResidualFailure("residual is not finite at the initial guess")
    if r.size != z.size:
        raise ValueError("shooting system must be square")
    history = [float(np.max(np.abs(r)))]
    for it in range(max_iter):
        if history[-1] <= tol:
            return NewtonResult(z, "converged", it, history[-1], history)
        J = np.empty((r.size, z.size))
        for j in range(z.size):
            h = jac_step * (1.0 + abs(z[j]))
            e = np.zeros_like(z)
            e[j] = h
            rp = _safe_eval(G, z + e)
            if rp is None:
                rp = _safe_eval(G, z - e)
                h = -h
            if rp is None:
                return NewtonResult(z, "singular_jacobian", it, history[-1], history)
            J[:, j] = (rp - r) / h
        cond = np.linalg.cond(J)
        if not np.isfinite(cond) or cond > 1e14:
            return NewtonResult(z, "singular_jacobian", it, history[-1], history)
        dz = np.linalg.solve(J, -r)
        lam = 1.0
        norm = np.linalg.norm(r)
        for _ in range(max_halvings + 1):
            trial = z + lam * dz
            rt = _safe_eval(G, trial)
            if rt is not None and np.linalg.norm(rt) < norm:
                z, r = trial, rt
                break
            lam *= 0.5
        else:
            return NewtonResult(z, "no_decrease", it, history[-1], history)
        history.append(float(np.max(np.abs(r))))
    status = "converged" if history[-1] <= tol else "max_iter"
    return NewtonResult(z, status, max_iter, history[-1], history)


# ----------------------------------------------------------------------------
# Generic arc-structured shooting

@dataclass
class Arc:
    lift: HamiltonianLift
    name: str
    control: Callable  # control(x, p) -> value on this arc


@dataclass
class ShootingSpec:
    """Ordered arcs, unknown layout and residual map of a multi-arc shooting problem."""

    arcs: list
    unknowns: list
    residual: Callable
    integrate: Callable

    def __post_init__(self):
        if len(self.unknowns) == 0:
            raise ValueError("shooting problem needs unknowns")

    def check_square(self, z) -> None:
        r = np.asarray(self.residual(z))
        if r.size != len(self.unknowns):
            raise ValueError("residual dimension differs from unknown dimension")


@dataclass
class Extremal:
    """State, costate and control samples of an extremal on a time mesh."""

    times: np.ndarray
    states: np.ndarray
    costates: np.ndarray
    controls: np.ndarray
    arc_index: Optional[np.ndarray] = None

    def trajectory(self) -> Trajectory:
        return Trajectory(self.times, self.states, self.controls[:-1])


def _concat_arcs(pieces, controls):
    times, states, costates, ctrl, idx = [], [], [], [], []
    for k, (traj, law) in enumerate(zip(pieces, controls)):
        z = traj.states
        d = z.shape[1] // 2
        sl = slice(0, None) if k == 0 else slice(1, None)
        times.append(traj.times[sl])
        states.append(z[sl, :d])
        costates.append(z[sl, d:])
        ctrl.append(np.array([law(zz[:d], zz[d:]) for zz in z[sl]]).reshape(-1, 1))
        idx.append(np.full(len(traj.times[sl]), k))
    return Extremal(np.concatenate(times), np.vstack(states), np.vstack(costates), np.vstack(ctrl),
                    np.concatenate(idx))


# ----------------------------------------------------------------------------
# Zermelo with obstacle penalised by a log barrier

def relaxed_log(e, eps: float = 0.0):
    """``log(e)`` for ``e >= eps``, continued below ``eps`` by its second-order Taylor polynomial."""
    if eps <= 0:
        return jnp.log(e)
    d = e - eps
    return jnp.where(e >= eps, jnp.log(jnp.maximum(e, eps)), math.log(eps) + d / eps - d * d / (2 * eps * eps))


def zermelo_hamiltonian(alpha: float = 1e-3, obstacle: bool = True, v_max: float = 1.0,
                        relaxation: float = 0.0) -> Callable:
    """Maximised Hamiltonian ``V|p| + p1 h(y2) + alpha log(e(y)) - 1`` (normal case).

    ``relaxation > 0`` replaces the log barrier by its C2 extension below that
    level so extremals crossing the obstacle stay integrable.
    """
    (c1, c2), (a1, a2) = OBSTACLE_CENTER, OBSTACLE_SEMI_AXES

    def H(t, y, p):
        value = v_max * jnp.sqrt(p[0] ** 2 + p[1] ** 2) + p[0] * river_drift(y[1]) - 1.0
        if obstacle and alpha > 0:
            excess = (y[0] - c1) ** 2 / a1**2 + (y[1] - c2) ** 2 / a2**2 - 1.0
            value = value + alpha * relaxed_log(excess, relaxation)
        return value

    return H


def _ellipse_excess_np(y):
    (c1, c2), (a1, a2) = OBSTACLE_CENTER, OBSTACLE_SEMI_AXES
    return (y[..., 0] - c1) ** 2 / a1**2 + (y[..., 1] - c2) ** 2 / a2**2 - 1.0


@dataclass
class ZermeloShootingResult:
    p0: np.ndarray
    tf: float
    extremal: Extremal
    newton: NewtonResult
    residual: np.ndarray

    @property
    def trajectory(self) -> Trajectory:
        return self.extremal.trajectory()


def _zermelo_residual(alpha, obstacle, y0, target, v_max, flow_tol, relaxation):
    lift = HamiltonianLift(zermelo_hamiltonian(alpha, obstacle, v_max, relaxation), label="regular")
    barrier = obstacle and alpha > 0

    def integrate(z):
        if z[2] <= 0:
            raise ResidualFailure("final time must be positive")
        if barrier and _ellipse_excess_np(y0) <= 0:
            raise ObstacleCrossingError("initial point inside the obstacle")
        try:
            traj = extremal(lift, 0.0, y0, z[:2], z[2], flow_tol)
        except (DivergedError, StepSizeError) as exc:
            raise ObstacleCrossingError(f"extremal could not be integrated: {exc}") from exc
        if barrier and relaxation == 0 and np.min(_ellipse_excess_np(traj.states[:, :2])) <= 0:
            raise ObstacleCrossingError("extremal enters the obstacle")
        return traj

    def residual(z):
        traj = integrate(z)
        return np.concatenate([traj.states[-1, :2] - target, [lift(0.0, y0, z[:2])]])

    return integrate, residual


def shoot_zermelo_penalized(p0_guess, tf_guess: float, alpha: float = 1e-3, obstacle: bool = True,
                            y0=(0.0, 0.0), target=(20.0, 1.0), v_max: float = 1.0,
                            tol: float = 1e-10, max_iter: int = 50, flow_tol: float = 1e-12,
                            relaxations=(1e-1, 1e-2, 1e-3)) -> ZermeloShootingResult:
    """Free-final-time shooting for the river crossing with an elliptic obstacle.

    Unknowns ``(p0, tf)``; residual ``(y(tf) - y_f, H(0))``. When the guess's
    extremal enters the obstacle, the barrier is first relaxed (C2 extension of
    the log below each level in ``relaxations``) and the relaxed solutions are
    continued down to the exact barrier. ``relaxations=()`` disables this and
    an unusable guess raises :class:`ObstacleCrossingError`.
    """
    y0 = np.asarray(y0, dtype=float)
    target = np.asarray(target, dtype=float)
    z = np.array([p0_guess[0], p0_guess[1], tf_guess], dtype=float)
    args = (alpha, obstacle, y0, target, v_max)
    stages = [0.0]
    if obstacle and alpha > 0 and relaxations:
        try:
            _zermelo_residual(*args, flow_tol, 0.0)[1](z)
        except ResidualFailure:
            stages = [float(e) for e in relaxations] + [0.0]
    history, iterations = [], 0
    for eps in stages:
        integrate, residual = _zermelo_residual(*args, flow_tol, eps)
        newton = newton_solve(residual, z, tol=tol, max_iter=max_iter)
        iterations += newton.iterations
        history.extend(newton.history)
        z = newton.z
        if not newton.converged:
            break
    newton = replace(newton, iterations=iterations, history=history)
    traj = integrate(newton.z)
    heading = lambda y, p: math.atan2(p[1], p[0]) % (2 * math.pi)
    ext = _concat_arcs([traj], [heading])
    return ZermeloShootingResult(newton.z[:2].copy(), float(newton.z[2]), ext, newton, residual(newton.z))


def zermelo_turnpike_guess(target=(200.0, 1.0), y0=(0.0, 0.0), v_max: float = 1.0):
    """Costate and final-time guesses from the fast-lane heuristic ``y2 = 1/2``."""
    speed = v_max + river_drift(0.5)
    return np.array([1.0 / speed, 0.0]), (target[0] - y0[0]) / speed


@dataclass
class ZermeloTurnpikeResult:
    y_mid: np.ndarray
    p_mid: np.ndarray
    tf: float
    extremal: Extremal
    newton: NewtonResult


def shoot_zermelo_turnpike(p_guess=None, tf_guess: Optional[float] = None, y_mid_guess=None,
                           target=(200.0, 1.0), y0=(0.0, 0.0), v_max: float = 1.0,
                           tol: float = 1e-10, max_iter: int = 50) -> ZermeloTurnpikeResult:
    """Midpoint shooting toward a distant target, unknowns ``(y(tf/2), p(tf/2), tf)``."""
    H = zermelo_hamiltonian(0.0, False, v_max)
    lift = HamiltonianLift(H, label="regular")
    target = np.asarray(target, dtype=float)
    y0 = np.asarray(y0, dtype=float)
    p_default, tf_default = zermelo_turnpike_guess(tuple(target), tuple(y0), v_max)
    p_guess = p_default if p_guess is None else np.asarray(p_guess, dtype=float)
    tf_guess = tf_default if tf_guess is None else float(tf_guess)
    if y_mid_guess is None:
        y_mid_guess = np.array([0.5 * (y0[0] + target[0]), 0.5])

    def halves(z):
        y1, p1, tf = z[:2], z[2:4], z[4]
        if tf <= 0:
            raise ResidualFailure("final time must be positive")
        back = extremal(lift, tf / 2, y1, p1, 0.0)
        fwd = extremal(lift, tf / 2, y1, p1, tf)
        return back, fwd

    def residual(z):
        back, fwd = halves(z)
        return np.concatenate([back.states[0, :2] - y0, (fwd.states[-1, :2] - target) / target,
                               [lift(0.0, z[:2], z[2:4])]])

    z0 = np.concatenate([y_mid_guess, p_guess, [tf_guess]])
    newton = newton_solve(residual, z0, tol=tol, max_iter=max_iter)
    back, fwd = halves(newton.z)
    times = np.concatenate([back.times, fwd.times[1:]])
    zz = np.vstack([back.states, fwd.states[1:]])
    ctrl = np.arctan2(zz[:, 3], zz[:, 2]).reshape(-1, 1) % (2 * math.pi)
    ext = Extremal(times, zz[:, :2], zz[:, 2:], ctrl)
    return ZermeloTurnpikeResult(newton.z[:2], newton.z[2:4], float(newton.z[4]), ext, newton)


# ----------------------------------------------------------------------------
# Goddard four-arc shooting

def goddard_control_laws(params: Optional[GoddardParams] = None, backend: str = "ad") -> ControlLaws:
    problem = make_goddard(params)
    P = problem.metadata["params"]
    return make_control_laws(problem.drift_field, problem.control_field, lambda x: P.v_max - x[1], backend)


GODDARD_UNKNOWNS = ["p_r0", "p_v0", "p_m0", "t1", "t2", "t3", "tf"]


def goddard_shooting_spec(params: Optional[GoddardParams] = None, flow_tol: float = 1e-12) -> ShootingSpec:
    """Bang (u=1), singular, boundary (v = v_max), bang (u=0) extremal with 7 matching rows."""
    P = params or GoddardParams()
    laws = goddard_control_laws(P)
    H0, H1, us, ub, mub = laws.H0, laws.H1, laws.u_s_raw, laws.u_b_raw, laws.mu_b_raw
    g = laws.g
    lifts = [
        HamiltonianLift(lambda t, x, p: H0(x, p) + H1(x, p), label="bang u=1"),
        HamiltonianLift(lambda t, x, p: H0(x, p) + us(x, p) * H1(x, p), label="singular"),
        HamiltonianLift(lambda t, x, p: H0(x, p) + ub(x) * H1(x, p) + mub(x, p) * g(x), label="boundary"),
        HamiltonianLift(lambda t, x, p: H0(x, p), label="bang u=0"),
    ]
    h1 = jax.jit(H1)
    h01 = jax.jit(laws.H01)
    h0 = jax.jit(H0)
    controls = [lambda x, p: 1.0, lambda x, p: float(laws.u_s(x, p)), lambda x, p: float(laws.u_b(x)),
                lambda x, p: 0.0]
    arcs = [Arc(l, l.label, c) for l, c in zip(lifts, controls)]
    x0 = np.array([1.0, 0.0, 1.0])

    def integrate(z):
        p0, times = z[:3], np.concatenate([[0.0], z[3:]])
        if np.any(np.diff(times) <= 0):
            raise ArcOrderError("switching times must satisfy 0 < t1 < t2 < t3 < tf")
        pieces = []
        x, p = x0, p0
        for k, lift in enumerate(lifts):
            traj = extremal(lift, times[k], x, p, times[k + 1], flow_tol)
            pieces.append(traj)
            x, p = traj.states[-1, :3], traj.states[-1, 3:]
        return pieces

    def residual(z):
        pieces = integrate(z)
        x1, p1 = pieces[0].states[-1, :3], pieces[0].states[-1, 3:]
        x2 = pieces[1].states[-1, :3]
        xf, pf = pieces[3].states[-1, :3], pieces[3].states[-1, 3:]
        return np.array([
            pf[0] - 1.0, pf[1], xf[2] - P.m_star,
            float(h1(x1, p1)), float(h01(x1, p1)),
            float(g(x2)),
            float(h0(xf, pf)),
        ])

    spec = ShootingSpec(arcs, list(GODDARD_UNKNOWNS), residual, integrate)
    spec.laws = laws
    return spec


@dataclass
class GoddardShootingResult:
    p0: np.ndarray
    switch_times: np.ndarray  # (t1, t2, t3)
    tf: float
    extremal: Extremal
    newton: NewtonResult
    residual: np.ndarray
    multiplier: np.ndarray  # boundary-arc multiplier at the boundary-arc nodes

    @property
    def unknowns(self) -> np.ndarray:
        return np.concatenate([self.p0, self.switch_times, [self.tf]])

    @property
    def final_altitude(self) -> float:
        return float(self.extremal.states[-1, 0])


def shoot_goddard(p0_guess, t1: float, t2: float, t3: float, tf: float,
                  params: Optional[GoddardParams] = None, tol: float = 1e-10,
                  max_iter: int = 80) -> GoddardShootingResult:
    if not 0 < t1 < t2 < t3 < tf:
        raise ArcOrderError("guesses must satisfy 0 < t1 < t2 < t3 < tf")
    spec = goddard_shooting_spec(params)
    z0 = np.concatenate([np.asarray(p0_guess, dtype=float), [t1, t2, t3, tf]])
    newton = newton_solve(spec.residual, z0, tol=tol, max_iter=max_iter)
    pieces = spec.integrate(newton.z)
    ext = _concat_arcs(pieces, [a.control for a in spec.arcs])
    mub = jax.jit(spec.laws.mu_b_raw)
    bnd = pieces[2].states
    multiplier = np.array([float(mub(z[:3], z[3:])) for z in bnd])
    return GoddardShootingResult(newton.z[:3].copy(), newton.z[3:6].copy(), float(newton.z[6]), ext,
                                 newton, spec.residual(newton.z), multiplier)


# ----------------------------------------------------------------------------
# Linear-quadratic turnpike

@dataclass
class TurnpikeLQSolution:
    x_bar: np.ndarray
    u_bar: np.ndarray
    p_bar: np.ndarray
    M: np.ndarray
    nu: float
    eigenvalues: np.ndarray


def lq_hamiltonian_matrix(spec: LQSpec) -> np.ndarray:
    A, B, Q, R = spec.A, spec.B, spec.Q, spec.R
    W = B @ np.linalg.solve(R, B.T)
    return np.block([[A, W], [Q, -A.T]])


def turnpike_lq(spec: LQSpec) -> TurnpikeLQSolution:
    """Static optimum of the LQ problem and spectral gap of its Hamiltonian matrix."""
    M = lq_hamiltonian_matrix(spec)
    d = spec.state_dim
    rhs = -np.concatenate([spec.B @ spec.u_hat, -spec.Q @ spec.x_hat])
    sol = np.linalg.solve(M, rhs)
    x_bar, p_bar = sol[:d], sol[d:]
    u_bar = spec.u_hat + np.linalg.solve(spec.R, spec.B.T @ p_bar)
    eig = np.linalg.eigvals(M)
    nu = float(np.min(np.abs(eig.real)))
    # imaginary pairs of Hamiltonian matrices are typically defective, and rounding
    # then moves their real parts by about sqrt(eps) * |M|
    if nu <= max(1e-10, 1e-7 * np.linalg.norm(M, 2)):
        raise HyperbolicityError("Hamiltonian matrix has an eigenvalue on the imaginary axis")
    return TurnpikeLQSolution(x_bar, u_bar, p_bar, M, nu, eig)


def lq_lift(spec: LQSpec) -> HamiltonianLift:
    """Maximised LQ Hamiltonian with ``p0 = -1/2``: ``u = u_hat + R^{-1} B^T p``."""
    A, B, Q, R = (jnp.asarray(m) for m in (spec.A, spec.B, spec.Q, spec.R))
    W = B @ jnp.linalg.solve(R, B.T)
    xh, uh = jnp.asarray(spec.x_hat), jnp.asarray(spec.u_hat)

    def H(t, x, p):
        dx = x - xh
        return p @ (A @ x + B @ uh) + 0.5 * p @ (W @ p) - 0.5 * dx @ (Q @ dx)

    return HamiltonianLift(H, label="lq")


@dataclass
class LQExtremal:
    extremal: Extremal
    newton: NewtonResult
    midpoint_state: np.ndarray
    midpoint_costate: np.ndarray


def turnpike_midpoint_shoot(spec: LQSpec, T: float, tol: float = 1e-8, max_iter: int = 20) -> LQExtremal:
    """Shoot from the middle of ``[0, T]``, initialised at the static optimum."""
    tp = turnpike_lq(spec)
    lift = lq_lift(spec)
    d = spec.state_dim

    def halves(z):
        return extremal(lift, T / 2, z[:d], z[d:], 0.0), extremal(lift, T / 2, z[:d], z[d:], T)

    def residual(z):
        back, fwd = halves(z)
        return np.concatenate([back.states[0, :d] - spec.x0, fwd.states[-1, :d] - spec.x1])

    z0 = np.concatenate([tp.x_bar, tp.p_bar])
    newton = newton_solve(residual, z0, tol=tol, max_iter=max_iter)
    back, fwd = halves(newton.z)
    times = np.concatenate([back.times, fwd.times[1:]])
    zz = np.vstack([back.states, fwd.states[1:]])
    controls = spec.u_hat + zz[:, d:] @ np.linalg.solve(spec.R, spec.B.T).T
    ext = Extremal(times, zz[:, :d], zz[:, d:], controls)
    return LQExtremal(ext, newton, newton.z[:d].copy(), newton.z[d:].copy())


def hamiltonian_drift(lift: HamiltonianLift, traj: Trajectory) -> float:
    """``max_t |H(z(t)) - H(z(0))|`` along an extremal stored as stacked ``(x, p)``."""
    d = traj.states.shape[1] // 2
    vals = np.array([lift(t, z[:d], z[d:]) for t, z in zip(traj.times, traj.states)])
    return float(np.max(np.abs(vals - vals[0])))
