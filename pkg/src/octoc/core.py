"""Problem model, trajectories and ODE integration shared by every solver."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np


class DivergedError(RuntimeError):
    """Raised when an integrator produces a non-finite state."""

    def __init__(self, message: str, last_valid_index: int):
        super().__init__(message)
        self.last_valid_index = last_valid_index


class StepSizeError(RuntimeError):
    """Raised when adaptive step control underflows (stiffness or singularity)."""


def array_module(*arrays):
    """Return ``jax.numpy`` if any argument is a jax array or tracer, else ``numpy``.

    Problem callables are written against this so the same code serves the
    vectorised grid solvers (numpy) and the autodiff-based solvers (jax).
    """
    for a in arrays:
        if type(a).__module__.startswith("jax"):
            import jax.numpy as jnp

            return jnp
    return np


@dataclass(frozen=True)
class LipschitzBundle:
    L_fx: float = 0.0
    L_fu: float = 0.0
    L_lx: float = 0.0
    L_lu: float = 0.0
    L_phi: float = 0.0
    L_g: float = 0.0
    L_gf: float = 0.0
    c_f: float = 0.0
    c_l: float = 0.0
    c_phi: float = 0.0
    c_g: float = 0.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not (math.isfinite(value) and value >= 0.0):
                raise ValueError(f"Lipschitz constant {name} must be finite and nonnegative, got {value}")


def _no_constraint(x):
    xp = array_module(x)
    return xp.zeros(np.shape(x)[:-1] + (0,))


def _zero_cost(*args):
    x = args[1] if len(args) > 1 else args[0]
    xp = array_module(x)
    return xp.zeros(np.shape(x)[:-1])


@dataclass(frozen=True)
class ControlProblem:
    """Bolza/Mayer optimal control problem with box controls.

    All callables are vectorised over leading axes: ``x`` has shape ``(..., d)``
    and ``u`` shape ``(..., r)``. ``dynamics`` returns ``(..., d)``, costs return
    ``(...)`` and constraint maps return ``(..., m)``.
    """

    state_dim: int
    control_dim: int
    dynamics: Callable
    control_lo: tuple
    control_hi: tuple
    running_cost: Callable = _zero_cost
    final_cost: Callable = _zero_cost
    state_constraint: Callable = _no_constraint
    final_constraint: Callable = _no_constraint
    n_state_constraints: int = 0
    n_final_constraints: int = 0
    horizon: float = 1.0
    free_time: bool = False
    lipschitz: Optional[LipschitzBundle] = None
    name: str = "problem"
    initial_state: Optional[tuple] = None
    target_point: Optional[tuple] = None
    domain_lo: Optional[tuple] = None
    domain_hi: Optional[tuple] = None
    # closed form of max_u(-f(t,x,u).p), used by grid solvers when requested
    support_hamiltonian: Optional[Callable] = None
    # closed form of max_u |f_i(t,x,u)| per axis, shape (..., d)
    speed_bound: Optional[Callable] = None
    # simple state box (lo, hi) imposed by transcription, inf for open sides
    state_bounds: Optional[tuple] = None
    nominal_horizon: Optional[float] = None
    # affine structure f = F0 + u F1 for single-input problems
    drift_field: Optional[Callable] = None
    control_field: Optional[Callable] = None
    config: Optional[dict] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.state_dim < 1 or self.control_dim < 1:
            raise ValueError("state and control dimensions must be positive")
        if len(self.control_lo) != self.control_dim or len(self.control_hi) != self.control_dim:
            raise ValueError("control box must have one interval per control axis")
        for lo, hi in zip(self.control_lo, self.control_hi):
            if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                raise ValueError("control box must be nonempty with finite bounds")

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.control_lo, dtype=float)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.control_hi, dtype=float)

    def clip_control(self, u) -> np.ndarray:
        return np.clip(np.asarray(u, dtype=float), self.lo, self.hi)

    def with_horizon(self, horizon: float) -> "ControlProblem":
        return replace(self, horizon=float(horizon))


@dataclass(frozen=True)
class PiecewiseConstantControl:
    """Right-continuous piecewise-constant control: value ``values[k]`` on ``[mesh[k], mesh[k+1])``."""

    mesh: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        mesh = np.asarray(self.mesh, dtype=float)
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if values.shape[0] != mesh.size - 1 and values.shape[0] == 1 and mesh.size - 1 > 1:
            values = values.T
        object.__setattr__(self, "mesh", mesh)
        object.__setattr__(self, "values", values)
        if values.shape[0] != mesh.size - 1:
            raise ValueError("need one control value per mesh interval")

    def __call__(self, t, x=None, p=None):
        k = int(np.searchsorted(self.mesh, t, side="right") - 1)
        k = min(max(k, 0), len(self.values) - 1)
        return self.values[k]

    def within(self, lo, hi, tol: float = 0.0) -> bool:
        return bool(np.all(self.values >= np.asarray(lo) - tol) and np.all(self.values <= np.asarray(hi) + tol))


@dataclass(frozen=True)
class FeedbackControl:
    """Closed-form feedback ``u(t, x, p)`` clipped into the control box."""

    law: Callable
    lo: np.ndarray
    hi: np.ndarray

    def __call__(self, t, x, p=None):
        return np.clip(np.asarray(self.law(t, x, p), dtype=float), self.lo, self.hi)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    running_cost_integral: float = 0.0
    scheme: str = "rk4"
    derivatives: Optional[np.ndarray] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if self.states.shape[0] != self.times.size:
            self.states = self.states.reshape(self.times.size, -1)
        controls = np.asarray(self.controls, dtype=float)
        if controls.ndim == 1:
            controls = controls.reshape(max(self.times.size - 1, 0), -1)
        self.controls = controls
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")
        if self.controls.shape[0] != self.times.size - 1:
            raise ValueError("need one control sample per trajectory interval")

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    @property
    def final_time(self) -> float:
        return float(self.times[-1])

    def at(self, t: float) -> np.ndarray:
        """State at time ``t``: cubic Hermite when derivatives are stored, linear otherwise."""
        times = self.times
        if times.size == 1:
            return self.states[0].copy()
        k = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, times.size - 2))
        h = times[k + 1] - times[k]
        s = (t - times[k]) / h
        y0, y1 = self.states[k], self.states[k + 1]
        if self.derivatives is None:
            return (1 - s) * y0 + s * y1
        f0, f1 = self.derivatives[k], self.derivatives[k + 1]
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        return h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and not math.isfinite(value)):
        return "null"
    return format(float(value), ".17g")


def write_trajectory_csv(trajectory: Trajectory, path) -> None:
    """Write ``t,x1..xd,u1..ur`` rows; the last node has no control so it gets ``null``."""
    d = trajectory.states.shape[1]
    r = trajectory.controls.shape[1] if trajectory.controls.ndim == 2 else 0
    header = ["t"] + [f"x{i + 1}" for i in range(d)] + [f"u{i + 1}" for i in range(r)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for k, t in enumerate(trajectory.times):
            row = [_fmt(t)] + [_fmt(v) for v in trajectory.states[k]]
            if k < trajectory.controls.shape[0]:
                row += [_fmt(v) for v in trajectory.controls[k]]
            else:
                row += ["null"] * r
            writer.writerow(row)


def read_trajectory_csv(path) -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = sum(1 for h in header if h.startswith("x"))
    r = sum(1 for h in header if h.startswith("u"))
    parse = lambda s: float("nan") if s == "null" else float(s)
    data = np.array([[parse(s) for s in row] for row in body])
    return Trajectory(data[:, 0], data[:, 1 : 1 + d], data[:-1, 1 + d : 1 + d + r])


# ----------------------------------------------------------------------------
# Integration

def _step(vf, t, y, h, scheme):
    if scheme == "euler":
        return y + h * vf(t, y)
    if scheme == "heun":
        k1 = vf(t, y)
        return y + 0.5 * h * (k1 + vf(t + h, y + h * k1))
    if scheme == "rk4":
        k1 = vf(t, y)
        k2 = vf(t + 0.5 * h, y + 0.5 * h * k1)
        k3 = vf(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = vf(t + h, y + h * k3)
        return y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    raise ValueError(f"unknown scheme {scheme!r}")


def integrate_fixed(vf: Callable, t0: float, x0, t1: float, steps: int, scheme: str = "rk4") -> Trajectory:
    """Integrate ``x' = vf(t, x)`` with ``steps`` uniform steps of an explicit scheme."""
    if not t1 > t0:
        raise ValueError("need t1 > t0")
    if steps < 1:
        raise ValueError("need at least one step")
    h = (t1 - t0) / steps
    y = np.atleast_1d(np.asarray(x0, dtype=float))
    states = np.empty((steps + 1, y.size))
    states[0] = y
    times = t0 + h * np.arange(steps + 1)
    times[-1] = t1
    for k in range(steps):
        y = _step(vf, times[k], y, h, scheme)
        if not np.all(np.isfinite(y)):
            raise DivergedError(f"non-finite state at step {k + 1}", k)
        states[k + 1] = y
    return Trajectory(times, states, np.zeros((steps, 0)), scheme=scheme)


# Dormand-Prince 5(4) tableau
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_E = _DP_B - np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])


def integrate_adaptive(
    vf: Callable,
    t0: float,
    x0,
    t1: float,
    rtol: float = 1e-10,
    atol: float = 1e-12,
    first_step: Optional[float] = None,
    max_steps: int = 1_000_000,
) -> Trajectory:
    """Dormand-Prince 5(4) with PI-free standard step control and Hermite dense output.

    Integrates backward when ``t1 < t0``; the returned trajectory is then stored
    in increasing time order.
    """
    if rtol <= 0 or atol <= 0:
        raise ValueError("tolerances must be positive")
    y = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    if t1 == t0:
        return Trajectory(np.array([t0]), y[None, :], np.zeros((0, 0)), scheme="dopri5",
                          derivatives=vf(t0, y)[None, :])
    direction = 1.0 if t1 > t0 else -1.0
    span = abs(t1 - t0)
    t = t0
    f = np.asarray(vf(t, y), dtype=float)
    ts, ys, fs = [t], [y.copy()], [f.copy()]
    if first_step is None:
        scale = atol + rtol * np.abs(y)
        d0 = np.linalg.norm(y / scale) / math.sqrt(y.size)
        d1 = np.linalg.norm(f / scale) / math.sqrt(y.size)
        h = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
        h = min(h, span)
    else:
        h = min(abs(first_step), span)
    hmin = 1e-14 * span
    k = np.empty((7, y.size))
    steps = 0
    while direction * (t1 - t) > 0:
        if steps >= max_steps:
            raise StepSizeError("maximum number of adaptive steps exceeded")
        h = min(h, abs(t1 - t))
        if h < hmin:
            raise StepSizeError(f"step size underflow at t={t:.17g}")
        hs = direction * h
        k[0] = f
        for i in range(1, 7):
            yi = y + hs * (np.asarray(_DP_A[i]) @ k[:i])
            k[i] = vf(t + _DP_C[i] * hs, yi)
        y_new = y + hs * (_DP_B @ k)
        err_vec = hs * (_DP_E @ k)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        if not np.all(np.isfinite(y_new)):
            err = np.inf
        else:
            err = float(np.sqrt(np.mean((err_vec / scale) ** 2)))
        if err <= 1.0:
            t = t + hs if abs(t1 - (t + hs)) > 1e-15 * span else t1
            y = y_new
            f = k[6].copy()
            ts.append(t)
            ys.append(y.copy())
            fs.append(f.copy())
            steps += 1
            factor = 5.0 if err == 0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
            h *= factor
        else:
            if not np.isfinite(err):
                if h <= hmin * 10:
                    raise DivergedError(f"non-finite state near t={t:.17g}", len(ts) - 1)
                h *= 0.1
            else:
                h *= max(0.2, 0.9 * err ** -0.2)
    times = np.asarray(ts)
    states = np.asarray(ys)
    derivs = np.asarray(fs)
    if direction < 0:
        times, states, derivs = times[::-1], states[::-1], derivs[::-1]
    return Trajectory(times, states, np.zeros((times.size - 1, 0)), scheme="dopri5", derivatives=derivs)


def simulate(problem: ControlProblem, control, x0, t0: float, t1: float, steps: int,
             scheme: str = "rk4") -> Trajectory:
    """Integrate the controlled system under a piecewise-constant or feedback control.

    The control is frozen on each step (sampled at the left node), which matches
    the right-continuous convention of :class:`PiecewiseConstantControl`.
    """
    h = (t1 - t0) / steps
    y = np.atleast_1d(np.asarray(x0, dtype=float))
    times = t0 + h * np.arange(steps + 1)
    states = np.empty((steps + 1, y.size))
    controls = np.empty((steps, problem.control_dim))
    states[0] = y
    for k in range(steps):
        u = np.atleast_1d(np.asarray(control(times[k], y), dtype=float))
        controls[k] = u
        vf = lambda t, x, u=u: np.asarray(problem.dynamics(t, x, u), dtype=float)
        y = _step(vf, times[k], y, h, scheme)
        if not np.all(np.isfinite(y)):
            raise DivergedError(f"non-finite state at step {k + 1}", k)
        states[k + 1] = y
    traj = Trajectory(times, states, controls, scheme=scheme)
    traj.running_cost_integral = running_cost_quadrature(problem, traj)
    return traj


def running_cost_quadrature(problem: ControlProblem, trajectory: Trajectory) -> float:
    """Quadrature of the running cost matched to the trajectory's scheme order."""
    t, x, u = trajectory.times, trajectory.states, trajectory.controls
    if t.size < 2:
        return 0.0
    h = np.diff(t)
    left = np.asarray(problem.running_cost(t[:-1], x[:-1], u), dtype=float)
    if trajectory.scheme == "euler":
        return float(np.sum(h * left))
    right = np.asarray(problem.running_cost(t[1:], x[1:], u), dtype=float)
    return float(np.sum(0.5 * h * (left + right)))


def evaluate_cost(problem: ControlProblem, trajectory: Trajectory) -> float:
    """Bolza cost: final cost plus the scheme-matched quadrature of the running cost."""
    final = float(np.asarray(problem.final_cost(trajectory.final_state)))
    return final + running_cost_quadrature(problem, trajectory)


@dataclass(frozen=True)
class AdmissibilityReport:
    feasible: bool
    max_g: float
    max_gf: float

    def to_json(self) -> dict:
        absent = lambda v: None if not math.isfinite(v) else v
        return {"feasible": self.feasible, "max_g": absent(self.max_g), "max_gf": absent(self.max_gf)}


def check_admissible(problem: ControlProblem, trajectory: Trajectory, tol: float = 0.0) -> AdmissibilityReport:
    if tol < 0:
        raise ValueError("tolerance must be nonnegative")
    max_g = -math.inf
    max_gf = -math.inf
    if problem.n_state_constraints > 0:
        max_g = float(np.max(np.asarray(problem.state_constraint(trajectory.states))))
    if problem.n_final_constraints > 0:
        max_gf = float(np.max(np.asarray(problem.final_constraint(trajectory.final_state))))
    return AdmissibilityReport(max_g <= tol and max_gf <= tol, max_g, max_gf)


def gronwall_holds(trajectory: Trajectory, c_f: float, slack: float = 1.05) -> bool:
    """Check ``1+|x(s)| <= (1+|x(t0)|) exp(c_f (s-t0))`` along the trajectory."""
    norms = np.linalg.norm(trajectory.states, axis=1)
    bound = (1 + norms[0]) * np.exp(c_f * (trajectory.times - trajectory.times[0]))
    return bool(np.all(1 + norms <= slack * bound))


def control_grid(lo: Sequence[float], hi: Sequence[float], counts: Sequence[int] | int,
                 periodic: Sequence[bool] | None = None) -> np.ndarray:
    """Tensor grid of control samples, shape ``(n_samples, r)``.

    Periodic axes (angles) drop the duplicated endpoint.
    """
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    if np.isscalar(counts):
        counts = [int(counts)] * lo.size
    periodic = periodic or [False] * lo.size
    axes = []
    for a, b, n, per in zip(lo, hi, counts, periodic):
        if a == b or n == 1:
            axes.append(np.array([0.5 * (a + b)]))
        elif per:
            axes.append(np.linspace(a, b, n, endpoint=False))
        else:
            axes.append(np.linspace(a, b, n))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)
