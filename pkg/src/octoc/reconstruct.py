"""Feedback reconstruction from value tables and costate estimation from value gradients."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import ControlProblem, Trajectory
from .direct import classify_arcs
from .hjb import SENTINEL, AuxiliaryProblem, Grid, GridValueTable, sample_controls, value_from_w


@dataclass
class ReconstructionResult:
    trajectory: Trajectory
    realized_cost: float
    realized_value: Optional[float] = None  # minmax payoff for the auxiliary problem
    ties: list = field(default_factory=list)
    candidate_values: list = field(default_factory=list)
    truncated: bool = False
    exit_step: Optional[int] = None
    reached: Optional[bool] = None
    infeasible: bool = False
    z_path: Optional[np.ndarray] = None
    warnings: list = field(default_factory=list)

    @property
    def final_time(self) -> float:
        return self.trajectory.final_time

    def diagnostics(self) -> dict:
        return {
            "ties": [int(t) for t in self.ties], "truncated": self.truncated, "exit_step": self.exit_step,
            "reached": self.reached, "infeasible": self.infeasible, "realized_cost": self.realized_cost,
            "realized_value": self.realized_value, "final_time": self.final_time, "warnings": list(self.warnings),
        }


def one_step(problem: ControlProblem, t: float, y, controls, h: float, scheme: str = "heun") -> np.ndarray:
    """``y + h f_h(t, y, u)`` for every control row; Heun or explicit Euler."""
    y = np.asarray(y, dtype=float)
    Y = np.broadcast_to(y, (len(controls), y.size))
    f0 = np.asarray(problem.dynamics(t, Y, controls), dtype=float)
    if scheme == "euler":
        return Y + h * f0
    if scheme != "heun":
        raise ValueError(f"unknown reconstruction scheme {scheme!r}")
    f1 = np.asarray(problem.dynamics(t + h, Y + h * f0, controls), dtype=float)
    return Y + 0.5 * h * (f0 + f1)


def _argmin(values: np.ndarray, tol: float = 1e-12):
    """Smallest index among minimisers, and the number of tied candidates."""
    best = float(np.min(values))
    tied = np.flatnonzero(values <= best + tol * (1 + abs(best)))
    return int(tied[0]), int(tied.size)


def _check_mesh(table: GridValueTable, h: float, notes: list) -> None:
    times = np.sort(np.asarray(table.times))
    if times.size > 1:
        dt = float(np.min(np.diff(times)))
        if math.sqrt(dt) > h / 4:
            notes.append(f"table time step {dt:.3g} is coarse for h={h:.3g} (sqrt(dt) > h/4)")


def reconstruct_bolza(table: GridValueTable, problem: ControlProblem, x0, h: float, scheme: str = "heun",
                      horizon: Optional[float] = None, n_controls=64) -> ReconstructionResult:
    """Greedy feedback ``u_k = argmin_u [V(s_{k+1}, y_k + h f_h) + h l(s_k, y_k, u)]``."""
    T = float(problem.horizon if horizon is None else horizon)
    n_h = int(round(T / h))
    if n_h < 1 or abs(n_h * h - T) > 1e-9 * max(1.0, T):
        raise ValueError("horizon must be an integer multiple of h")
    controls = sample_controls(problem, n_controls)
    grid = table.grid
    notes = []
    _check_mesh(table, h, notes)
    y = np.asarray(x0, dtype=float)
    states, chosen, ties, cands = [y.copy()], [], [], []
    running = 0.0
    truncated, exit_step = False, None
    for k in range(n_h):
        s = k * h
        nxt = one_step(problem, s, y, controls, h, scheme)
        ell = np.asarray(problem.running_cost(s, np.broadcast_to(y, (len(controls), y.size)), controls), dtype=float)
        ell = np.broadcast_to(ell, (len(controls),))
        vals = table.value(s + h, nxt) + h * ell
        j, n_tied = _argmin(vals)
        ties.append(n_tied)
        cands.append(float(vals[j]))
        chosen.append(controls[j])
        running += h * float(ell[j])
        y = nxt[j]
        states.append(y.copy())
        if not np.all(np.isfinite(y)):
            raise FloatingPointError(f"non-finite state at reconstruction step {k + 1}")
        if not grid.contains(y, 1e-12):
            truncated, exit_step = True, k + 1
            break
    times = h * np.arange(len(states))
    traj = Trajectory(times, np.array(states), np.array(chosen), running_cost_integral=running, scheme="euler")
    cost = float(problem.final_cost(traj.final_state)) + running
    return ReconstructionResult(traj, cost, None, ties, cands, truncated, exit_step, warnings=notes)


def reconstruct_mintime(time_table: GridValueTable, problem: ControlProblem, x0, h: float,
                        scheme: str = "heun", max_steps: int = 100000, n_controls=64) -> ReconstructionResult:
    """Greedy descent on a minimum-time table until the target ``g_f <= 0`` is entered."""
    controls = sample_controls(problem, n_controls)
    grid = time_table.grid
    y = np.asarray(x0, dtype=float)
    notes = []
    if float(time_table.value(0.0, y)) >= SENTINEL:
        notes.append("start lies outside the reached set of the minimum-time table")
    states, chosen, ties, cands = [y.copy()], [], [], []
    reached, truncated, exit_step = False, False, None
    gf = lambda x: float(np.max(np.asarray(problem.final_constraint(x))))
    for k in range(max_steps):
        if gf(y) <= 0:
            reached = True
            break
        nxt = one_step(problem, k * h, y, controls, h, scheme)
        vals = time_table.value(0.0, nxt)
        j, n_tied = _argmin(vals)
        ties.append(n_tied)
        cands.append(float(vals[j]))
        chosen.append(controls[j])
        y = nxt[j]
        states.append(y.copy())
        if not grid.contains(y, 1e-12):
            truncated, exit_step = True, k + 1
            break
    if not chosen:
        chosen_arr = np.zeros((0, problem.control_dim))
    else:
        chosen_arr = np.array(chosen)
    times = h * np.arange(len(states))
    traj = Trajectory(times, np.array(states), chosen_arr, running_cost_integral=times[-1], scheme="euler")
    return ReconstructionResult(traj, float(times[-1]), None, ties, cands, truncated, exit_step, reached=reached,
                                warnings=notes)


def reconstruct_minmax(w_table: GridValueTable, aux: AuxiliaryProblem, x0, h: float, z0: Optional[float] = None,
                       scheme: str = "heun", horizon: Optional[float] = None, free_time: Optional[bool] = None,
                       n_controls=21, stop_tol: float = 1e-9) -> ReconstructionResult:
    """Greedy feedback on the augmented table ``W(t, x, z)``.

    ``z0`` is in original cost units and defaults to the value recovered from
    the table at ``x0``. For free-time problems the run stops as soon as the
    stopping payoff is no worse than the best continuation.
    """
    base = aux.base
    free_time = base.free_time if free_time is None else free_time
    T = float(base.horizon if horizon is None else horizon)
    n_h = int(round(T / h))
    x0 = np.asarray(x0, dtype=float)
    infeasible = False
    notes = []
    _check_mesh(w_table, h, notes)
    if z0 is None:
        z0 = value_from_w(w_table, x0, 0.0, aux.offset)
        if z0 is None:
            infeasible = True
            z0 = aux.z_bounds[1] - aux.offset
    z = float(z0) + aux.offset
    controls = sample_controls(base, n_controls)
    d = base.state_dim
    xgrid = Grid(w_table.grid.lo[:d], w_table.grid.hi[:d], w_table.grid.counts[:d])
    psi = lambda x: float(aux.obstacle(0.0, np.atleast_2d(x))[0])
    payoff = lambda x, zz: float(aux.terminal(np.append(x, zz)[None, :])[0])
    y = x0.copy()
    states, zs, chosen, ties, cands = [y.copy()], [z], [], [], []
    running = 0.0
    truncated, exit_step = False, None
    max_psi = psi(y)
    for k in range(n_h):
        s = k * h
        nxt = one_step(base, s, y, controls, h, scheme)
        Y = np.broadcast_to(y, (len(controls), d))
        ell = np.broadcast_to(np.asarray(base.running_cost(s, Y, controls), dtype=float), (len(controls),))
        z_next = z - h * ell
        vals = w_table.value(s + h, np.column_stack([nxt, z_next]))
        vals = np.maximum(vals, max_psi if aux.constrained else -np.inf)
        j, n_tied = _argmin(vals)
        if free_time and payoff(y, z) <= vals[j] + stop_tol:
            break
        ties.append(n_tied)
        cands.append(float(vals[j]))
        chosen.append(controls[j])
        running += h * float(ell[j])
        y, z = nxt[j], float(z_next[j])
        states.append(y.copy())
        zs.append(z)
        max_psi = max(max_psi, psi(y))
        if not xgrid.contains(y, 1e-12):
            truncated, exit_step = True, k + 1
            break
    times = h * np.arange(len(states))
    controls_arr = np.array(chosen) if chosen else np.zeros((0, base.control_dim))
    if len(states) == 1:
        traj = Trajectory(np.array([0.0, h]), np.array([y, y]), np.zeros((1, base.control_dim)))
        warnings.warn("reconstruction stopped at the initial state")
    else:
        traj = Trajectory(times, np.array(states), controls_arr, running_cost_integral=running, scheme="euler")
    realized = max(max_psi, payoff(y, z)) if aux.constrained else payoff(y, z)
    cost = float(base.final_cost(y)) + running
    if realized > 0:
        infeasible = True
    return ReconstructionResult(traj, cost, realized, ties, cands, truncated, exit_step,
                                infeasible=infeasible, z_path=np.array(zs), warnings=notes)


# ----------------------------------------------------------------------------
# Costate estimation

@dataclass
class CostateEstimate:
    """``p = -grad V`` with per-axis flags marking one-sided differences."""

    p: np.ndarray
    gradient: np.ndarray
    one_sided: np.ndarray

    @property
    def boundary_warning(self) -> bool:
        return bool(np.any(self.one_sided))


class AuxiliaryValue:
    """Value function ``x -> min{z | W(t, x, z) <= 0}`` exposed like a table."""

    def __init__(self, w_table: GridValueTable, offset: float = 0.0):
        self.table = w_table
        self.offset = offset
        g = w_table.grid
        self.grid = Grid(g.lo[:-1], g.hi[:-1], g.counts[:-1])

    def value(self, t: float, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        pts = x.reshape(-1, self.grid.ndim)
        out = np.array([np.nan if (v := value_from_w(self.table, p, t, self.offset)) is None else v for p in pts])
        return out.reshape(x.shape[:-1])


def estimate_costate(value, t: float, x, step=None) -> CostateEstimate:
    """Central differences of the interpolated value; one-sided near the grid boundary.

    ``value`` is a :class:`GridValueTable`, an :class:`AuxiliaryValue`, or any
    object exposing ``grid`` and ``value(t, x)``.
    """
    grid = value.grid
    x = np.asarray(x, dtype=float)
    steps = grid.dx if step is None else np.broadcast_to(np.asarray(step, dtype=float), (grid.ndim,))
    lo, hi = np.asarray(grid.lo), np.asarray(grid.hi)
    grad = np.empty(grid.ndim)
    flags = np.zeros(grid.ndim, dtype=bool)
    v0 = float(value.value(t, x))
    for i in range(grid.ndim):
        e = np.zeros(grid.ndim)
        e[i] = steps[i]
        up_ok = x[i] + steps[i] <= hi[i] + 1e-12
        down_ok = x[i] - steps[i] >= lo[i] - 1e-12
        if up_ok and down_ok:
            grad[i] = (float(value.value(t, x + e)) - float(value.value(t, x - e))) / (2 * steps[i])
        elif up_ok:
            grad[i] = (float(value.value(t, x + e)) - v0) / steps[i]
            flags[i] = True
        else:
            grad[i] = (v0 - float(value.value(t, x - e))) / steps[i]
            flags[i] = True
    if np.any(flags):
        warnings.warn("costate estimate uses one-sided differences near the grid boundary")
    if np.any(np.abs(grad) >= SENTINEL / max(np.min(steps), 1e-300) / 10):
        warnings.warn("costate stencil touches unreached nodes")
    return CostateEstimate(-grad, grad, flags)


@dataclass
class AuxiliaryCostate:
    """Costate read from ``W``: raw ``-D_x W`` and its renormalisation by ``|d W / d z|``."""

    raw: np.ndarray
    dz: float
    renormalized: np.ndarray
    one_sided: np.ndarray


def costate_from_w(w_table: GridValueTable, t: float, x, z: float) -> AuxiliaryCostate:
    """On the zero level set ``W(t, x, V(t, x)) = 0`` the implicit-function relation gives
    ``-D V = D_x W / |d_z W|`` when ``W`` decreases in ``z``."""
    est = estimate_costate(w_table, t, np.append(np.asarray(x, dtype=float), z))
    raw = est.p[:-1]
    dz = est.gradient[-1]
    scale = abs(dz) if abs(dz) > 1e-14 else 1.0
    return AuxiliaryCostate(raw, float(dz), raw / scale, est.one_sided)


def switch_times(problem: ControlProblem, result: ReconstructionResult, boundary_tol: float,
                 bang_tol: float = 1e-2, min_run: int = 3) -> list:
    """Arc boundaries of a reconstructed single-input trajectory, as ``(kind, t_start, t_end)``."""
    arcs = classify_arcs(problem, result.trajectory, bang_tol=bang_tol, boundary_tol=boundary_tol,
                         min_run=min_run)
    return [(a.kind, a.t_start, a.t_end) for a in arcs]


def realized_error_order(hs, errors) -> float:
    """Least-squares slope of ``log(error)`` against ``log(h)``."""
    hs = np.log(np.asarray(hs, dtype=float))
    es = np.log(np.asarray(errors, dtype=float))
    return float(np.polyfit(hs, es, 1)[0])
