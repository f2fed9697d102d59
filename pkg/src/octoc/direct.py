"""Direct transcription of a control problem and an augmented-Lagrangian NLP solver.

The decision vector is ``Z = (x_1..x_N, u_0..u_{N-1}[, dt])``; the initial
state is fixed and not part of ``Z``. Objective and constraint maps are jax
functions so gradients come from automatic differentiation. The inner
bound-constrained minimisation is delegated to scipy's L-BFGS-B.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize

from ._jax import jax, jnp
from .core import ControlProblem, Trajectory

log = logging.getLogger(__name__)

SCHEMES = ("euler", "crank_nicolson")
_SCHEME_ALIASES = {"cn": "crank_nicolson", "crank-nicolson": "crank_nicolson"}


@dataclass
class TranscribedNLP:
    """Finite-dimensional NLP: ``min F(Z)`` s.t. ``c_eq(Z) = 0``, ``c_in(Z) <= 0``, ``lower <= Z <= upper``."""

    objective: Callable
    equalities: Callable
    inequalities: Callable
    lower: np.ndarray
    upper: np.ndarray
    slices: dict
    n_eq: int
    n_in: int
    scale: Optional[np.ndarray] = None
    problem: Optional[ControlProblem] = None
    N: int = 0
    scheme: str = ""
    free_time: bool = False
    x0: Optional[np.ndarray] = None
    fixed_dt: Optional[float] = None

    @property
    def n_vars(self) -> int:
        return self.lower.size

    @property
    def n_defect_blocks(self) -> int:
        return self.N

    def unpack(self, Z):
        """Return ``(X, U, dt)`` with ``X`` including the fixed initial state as row 0."""
        xp = jnp if isinstance(Z, jax.Array) else np
        d, r = self.problem.state_dim, self.problem.control_dim
        X = Z[self.slices["states"]].reshape(self.N, d)
        X = xp.concatenate([xp.asarray(self.x0)[None, :], X], axis=0)
        U = Z[self.slices["controls"]].reshape(self.N, r)
        dt = Z[self.slices["dt"]][0] if self.free_time else self.fixed_dt
        return X, U, dt

    def pack(self, X, U, dt: Optional[float] = None) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[0] == self.N + 1:
            X = X[1:]
        parts = [X.ravel(), np.asarray(U, dtype=float).ravel()]
        if self.free_time:
            parts.append([self.fixed_dt if dt is None else dt])
        return np.concatenate(parts)

    def trajectory(self, Z) -> Trajectory:
        X, U, dt = self.unpack(np.asarray(Z, dtype=float))
        times = dt * np.arange(self.N + 1)
        traj = Trajectory(times, X, U, scheme=self.scheme)
        return traj


def _structural_bounds(fun: Callable, d: int, lo, hi, rng) -> dict:
    """Detect rows of ``fun`` of the form ``+-x_j + c``; return ``{row: (axis, side, value)}``."""
    lo = np.where(np.isfinite(lo), lo, -1.0)
    hi = np.where(np.isfinite(hi), hi, 1.0)
    points = lo + (hi - lo) * rng.random((3, d))
    try:
        jac = jax.jacfwd(lambda x: jnp.atleast_1d(fun(x)))
        Js = [np.asarray(jac(jnp.asarray(p))) for p in points]
        vals = [np.atleast_1d(np.asarray(fun(jnp.asarray(p)))) for p in points]
    except Exception:  # not traceable: keep everything as generic rows
        return {}
    found = {}
    for k in range(Js[0].shape[0]):
        row = Js[0][k]
        if not all(np.allclose(J[k], row, atol=1e-12) for J in Js):
            continue
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size != 1 or abs(abs(row[nz[0]]) - 1.0) > 1e-12:
            continue
        j = int(nz[0])
        consts = [v[k] - row[j] * p[j] for v, p in zip(vals, points)]
        if max(consts) - min(consts) > 1e-10:
            continue
        c = float(np.mean(consts))
        # +x_j + c <= 0  ->  x_j <= -c ;  -x_j + c <= 0  ->  x_j >= c
        found[k] = (j, "hi", -c) if row[j] > 0 else (j, "lo", c)
    return found


def transcribe(problem: ControlProblem, N: int, scheme: str = "crank_nicolson",
               free_time: Optional[bool] = None, x0=None, horizon: Optional[float] = None) -> TranscribedNLP:
    """Build the NLP for a uniform mesh of ``N`` intervals."""
    scheme = _SCHEME_ALIASES.get(scheme, scheme)
    if scheme not in SCHEMES:
        raise ValueError(f"unknown transcription scheme {scheme!r}")
    if N < 2:
        raise ValueError("transcription needs N >= 2")
    free_time = problem.free_time if free_time is None else free_time
    if x0 is None:
        if problem.initial_state is None:
            raise ValueError("problem has no initial state; pass x0")
        x0 = problem.initial_state
    x0 = np.asarray(x0, dtype=float)
    d, r = problem.state_dim, problem.control_dim
    T = float(horizon if horizon is not None else (problem.nominal_horizon or problem.horizon))
    n_x, n_u = d * N, r * N
    slices = {"states": slice(0, n_x), "controls": slice(n_x, n_x + n_u)}
    n = n_x + n_u
    if free_time:
        slices["dt"] = slice(n, n + 1)
        n += 1

    lower = np.full(n, -np.inf)
    upper = np.full(n, np.inf)
    xl = np.full((N, d), -np.inf)
    xh = np.full((N, d), np.inf)
    if problem.state_bounds is not None:
        xl[:] = np.asarray(problem.state_bounds[0], dtype=float)
        xh[:] = np.asarray(problem.state_bounds[1], dtype=float)

    rng = np.random.default_rng(0)
    dom_lo = np.asarray(problem.domain_lo, dtype=float) if problem.domain_lo is not None else -np.ones(d)
    dom_hi = np.asarray(problem.domain_hi, dtype=float) if problem.domain_hi is not None else np.ones(d)

    def apply(rows, nodes):
        for axis, side, value in rows.values():
            if side == "hi":
                xh[nodes, axis] = np.minimum(xh[nodes, axis], value)
            else:
                xl[nodes, axis] = np.maximum(xl[nodes, axis], value)

    g_bounds = _structural_bounds(problem.state_constraint, d, dom_lo, dom_hi, rng) if problem.n_state_constraints else {}
    gf_bounds = _structural_bounds(problem.final_constraint, d, dom_lo, dom_hi, rng) if problem.n_final_constraints else {}
    apply(g_bounds, slice(None))
    apply(gf_bounds, N - 1)
    g_rows = [k for k in range(problem.n_state_constraints) if k not in g_bounds]
    gf_rows = [k for k in range(problem.n_final_constraints) if k not in gf_bounds]

    lower[slices["states"]] = xl.ravel()
    upper[slices["states"]] = xh.ravel()
    lower[slices["controls"]] = np.tile(problem.lo, N)
    upper[slices["controls"]] = np.tile(problem.hi, N)
    if free_time:
        lower[-1] = 0.0

    scale = np.ones(n)
    if free_time:
        scale[-1] = T / N

    nlp = TranscribedNLP(
        objective=None, equalities=None, inequalities=None, lower=lower, upper=upper, slices=slices,
        n_eq=d * N, n_in=len(g_rows) * N + len(gf_rows), scale=scale, problem=problem, N=N,
        scheme=scheme, free_time=free_time, x0=x0, fixed_dt=T / N,
    )
    f, ell, phi = problem.dynamics, problem.running_cost, problem.final_cost
    g_idx = np.asarray(g_rows, dtype=int)
    gf_idx = np.asarray(gf_rows, dtype=int)

    def parts(Z):
        X, U, dt = nlp.unpack(Z)
        t = dt * jnp.arange(N + 1)
        return X, U, dt, t

    def objective(Z):
        X, U, dt, t = parts(Z)
        left = ell(t[:-1], X[:-1], U)
        if scheme == "euler":
            run = dt * jnp.sum(left)
        else:
            run = 0.5 * dt * jnp.sum(left + ell(t[1:], X[1:], U))
        return run + phi(X[-1])

    def equalities(Z):
        X, U, dt, t = parts(Z)
        f0 = f(t[:-1], X[:-1], U)
        if scheme == "euler":
            step = dt * f0
        else:
            step = 0.5 * dt * (f0 + f(t[1:], X[1:], U))
        return (X[1:] - X[:-1] - step).ravel()

    def inequalities(Z):
        X, U, dt, t = parts(Z)
        rows = []
        if g_idx.size:
            rows.append(problem.state_constraint(X[1:])[:, g_idx].ravel())
        if gf_idx.size:
            rows.append(jnp.atleast_1d(problem.final_constraint(X[-1]))[gf_idx])
        return jnp.concatenate(rows) if rows else jnp.zeros(0)

    nlp.objective = objective
    nlp.equalities = equalities
    nlp.inequalities = inequalities
    return nlp


def default_guess(nlp: TranscribedNLP) -> np.ndarray:
    """States interpolated from ``x0`` toward the target point, controls at box midpoints."""
    P = nlp.problem
    target = np.asarray(P.target_point, dtype=float) if P.target_point is not None else nlp.x0
    s = np.linspace(0.0, 1.0, nlp.N + 1)[:, None]
    X = (1 - s) * nlp.x0 + s * target
    U = np.tile(0.5 * (P.lo + P.hi), (nlp.N, 1))
    Z = nlp.pack(X, U, nlp.fixed_dt)
    return np.clip(Z, nlp.lower, nlp.upper)


# ----------------------------------------------------------------------------
# Augmented Lagrangian

@dataclass
class NLPOptions:
    max_outer: int = 40
    max_inner: int = 20000
    tol_feas: float = 1e-8
    tol_opt: float = 1e-5
    rho0: float = 10.0
    rho_max: float = 1e10
    memory: int = 50

    @classmethod
    def from_dict(cls, options: Optional[dict]) -> "NLPOptions":
        if options is None:
            return cls()
        if isinstance(options, cls):
            return options
        unknown = set(options) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown NLP options {sorted(unknown)}")
        return cls(**options)


@dataclass
class NLPResult:
    Z: np.ndarray
    objective: float
    eq_multipliers: np.ndarray
    in_multipliers: np.ndarray
    bound_multipliers_lo: np.ndarray
    bound_multipliers_hi: np.ndarray
    status: str
    iterations: int
    inner_iterations: int
    feasibility: float
    optimality: float
    history: list = field(default_factory=list)


def solve_nlp(nlp: TranscribedNLP, initial_guess=None, options: Optional[dict | NLPOptions] = None) -> NLPResult:
    """PHR augmented Lagrangian with L-BFGS-B inner solves.

    Sign convention: the Lagrangian is ``F + lam . c_eq + mu . c_in`` with
    ``mu >= 0``; bound multipliers are reported as nonnegative magnitudes.
    Statuses: ``converged``, ``maxiter``, ``infeasible_stationary`` and
    ``stalled`` (feasible, but the objective stopped moving before the
    projected gradient met ``tol_opt``).
    """
    opts = NLPOptions.from_dict(options)
    Z = default_guess(nlp) if initial_guess is None else np.asarray(initial_guess, dtype=float).copy()
    if Z.size != nlp.n_vars:
        raise ValueError(f"initial guess has {Z.size} entries, layout needs {nlp.n_vars}")
    F0 = float(nlp.objective(jnp.asarray(Z)))
    if not math.isfinite(F0):
        raise ValueError("objective is not finite at the initial guess")
    sc = np.ones(nlp.n_vars) if nlp.scale is None else nlp.scale
    lo_s, hi_s = nlp.lower / sc, nlp.upper / sc
    bounds = list(zip(np.where(np.isfinite(lo_s), lo_s, None), np.where(np.isfinite(hi_s), hi_s, None)))
    sc_j = jnp.asarray(sc)

    def aug(Zs, lam, mu, rho):
        Zv = Zs * sc_j
        c = nlp.equalities(Zv)
        ci = nlp.inequalities(Zv)
        shifted = jnp.maximum(0.0, mu + rho * ci)
        return nlp.objective(Zv) + lam @ c + 0.5 * rho * c @ c + (shifted @ shifted - mu @ mu) / (2 * rho)

    aug_vg = jax.jit(jax.value_and_grad(aug))
    lag_grad = jax.jit(jax.grad(lambda Zv, lam, mu: nlp.objective(Zv) + lam @ nlp.equalities(Zv)
                                + mu @ nlp.inequalities(Zv)))
    eq_j = jax.jit(nlp.equalities)
    in_j = jax.jit(nlp.inequalities)

    lam = np.zeros(nlp.n_eq)
    mu = np.zeros(nlp.n_in)
    rho = opts.rho0
    prev_feas = math.inf
    status = "maxiter"
    inner_total = 0
    history = []
    feas = opt = math.inf
    outer = 0
    flat = 0
    prev_F = math.inf
    for outer in range(1, opts.max_outer + 1):
        fun = lambda zs: tuple(np.asarray(a, dtype=float) for a in aug_vg(zs, lam, mu, rho))
        res = minimize(fun, Z / sc, jac=True, method="L-BFGS-B", bounds=bounds,
                       options=dict(maxiter=opts.max_inner, maxcor=opts.memory, ftol=1e-16, gtol=1e-10))
        inner_total += int(res.nit)
        Z = res.x * sc
        c = np.asarray(eq_j(Z))
        ci = np.asarray(in_j(Z))
        feas = max(np.max(np.abs(c), initial=0.0), np.max(ci, initial=0.0))
        lam = lam + rho * c
        mu = np.maximum(0.0, mu + rho * ci)
        grad = np.asarray(lag_grad(jnp.asarray(Z), lam, mu)) * sc
        opt = float(np.max(np.abs(Z / sc - np.clip(Z / sc - grad, lo_s, hi_s)), initial=0.0))
        history.append({"outer": outer, "inner": int(res.nit), "feasibility": float(feas),
                        "optimality": opt, "rho": rho})
        log.debug("outer %d: feas %.3e opt %.3e rho %.1e", outer, feas, opt, rho)
        if feas <= opts.tol_feas and opt <= opts.tol_opt:
            status = "converged"
            break
        F = float(res.fun)
        flat = flat + 1 if feas <= opts.tol_feas and abs(F - prev_F) <= 1e-9 * (1 + abs(F)) else 0
        prev_F = F
        if flat >= 2:
            status = "stalled"
            break
        if feas > opts.tol_feas and feas > prev_feas / 4:
            rho *= 10.0
            if rho > opts.rho_max:
                status = "infeasible_stationary"
                break
        prev_feas = feas
    grad = np.asarray(lag_grad(jnp.asarray(Z), lam, mu))
    at_lo = np.isfinite(nlp.lower) & (Z <= nlp.lower + 1e-9)
    at_hi = np.isfinite(nlp.upper) & (Z >= nlp.upper - 1e-9)
    nu_lo = np.where(at_lo, np.maximum(grad, 0.0), 0.0)
    nu_hi = np.where(at_hi, np.maximum(-grad, 0.0), 0.0)
    return NLPResult(Z, float(nlp.objective(jnp.asarray(Z))), lam, mu, nu_lo, nu_hi, status, outer,
                     inner_total, float(feas), float(opt), history)


# ----------------------------------------------------------------------------
# Direct solve and arc classification

@dataclass
class DirectSolution:
    trajectory: Trajectory
    objective: float
    multipliers: np.ndarray  # (N, d), one block per defect
    costates: np.ndarray  # (N, d), p = lambda, sampled at costate_times
    costate_times: np.ndarray
    active: dict
    status: str
    iterations: int
    feasibility: float
    optimality: float
    nlp: TranscribedNLP
    result: NLPResult

    def to_json(self) -> dict:
        tr = self.trajectory
        return {
            "status": self.status, "iterations": self.iterations, "objective": self.objective,
            "feasibility": self.feasibility, "optimality": self.optimality,
            "times": tr.times.tolist(), "states": tr.states.tolist(), "controls": tr.controls.tolist(),
            "multipliers": self.multipliers.tolist(), "costates": self.costates.tolist(),
            "costate_times": self.costate_times.tolist(),
        }


def solve_direct(problem: ControlProblem, N: int = 100, scheme: str = "crank_nicolson",
                 options: Optional[dict | NLPOptions] = None, initial_guess=None,
                 free_time: Optional[bool] = None) -> DirectSolution:
    nlp = transcribe(problem, N, scheme, free_time)
    res = solve_nlp(nlp, initial_guess, options)
    traj = nlp.trajectory(res.Z)
    traj.running_cost_integral = res.objective - float(problem.final_cost(traj.final_state))
    lam = res.eq_multipliers.reshape(N, problem.state_dim)
    active = {
        "control_lo": traj.controls <= problem.lo + 1e-2,
        "control_hi": traj.controls >= problem.hi - 1e-2,
    }
    if problem.n_state_constraints:
        active["state_constraint"] = np.abs(np.asarray(problem.state_constraint(traj.states))) <= 1e-3
    # with defects x_{k+1} - x_k - h f and Lagrangian F + lam.c, lam_k solves the
    # discrete adjoint equation: it approximates p(t_{k+1}) for Euler and, to second
    # order, p at the interval midpoint for Crank-Nicolson
    times = traj.times[1:] if nlp.scheme == "euler" else 0.5 * (traj.times[:-1] + traj.times[1:])
    return DirectSolution(traj, res.objective, lam, lam.copy(), times, active, res.status,
                          res.iterations, res.feasibility, res.optimality, nlp, res)


@dataclass(frozen=True)
class ArcSegment:
    kind: str  # "bang_hi", "bang_lo", "singular", "boundary"
    start: int  # first interval index
    stop: int  # one past the last interval index
    t_start: float
    t_end: float


def classify_arcs(problem: ControlProblem, trajectory: Trajectory, bang_tol: float = 1e-2,
                  boundary_tol: float = 1e-3, min_run: int = 3) -> list:
    """Label each interval bang/singular/boundary and merge runs shorter than ``min_run``.

    Single-input problems only; an interval is on the boundary when the state
    constraint is within ``boundary_tol`` of zero at both of its nodes.
    """
    u = trajectory.controls[:, 0]
    lo, hi = problem.lo[0], problem.hi[0]
    n = u.size
    labels = np.where(u >= hi - bang_tol, "bang_hi", np.where(u <= lo + bang_tol, "bang_lo", "singular"))
    labels = labels.astype(object)
    if problem.n_state_constraints:
        g = np.max(np.abs(np.asarray(problem.state_constraint(trajectory.states))), axis=-1)
        on = (g[:-1] <= boundary_tol) & (g[1:] <= boundary_tol)
        labels[on] = "boundary"
    runs = []
    for k in range(n):
        if runs and runs[-1][0] == labels[k]:
            runs[-1][2] = k + 1
        else:
            runs.append([labels[k], k, k + 1])
    merged = []
    for run in runs:
        if merged and (run[2] - run[1] < min_run or merged[-1][0] == run[0]):
            merged[-1][2] = run[2]
        else:
            merged.append(run)
    if len(merged) > 1 and merged[0][2] - merged[0][1] < min_run:
        merged[1][1] = merged[0][1]
        merged.pop(0)
    t = trajectory.times
    return [ArcSegment(kind, a, b, float(t[a]), float(t[b])) for kind, a, b in merged]


def arc_pattern(arcs) -> tuple:
    return tuple(a.kind for a in arcs)


def shooting_guess_from_direct(solution: DirectSolution) -> tuple:
    """``(p0, switch_times, tf)`` to initialise four-arc shooting from a direct solve."""
    arcs = classify_arcs(solution.nlp.problem, solution.trajectory)
    switches = np.array([a.t_end for a in arcs[:-1]])
    # linear extrapolation of the first two costate samples back to t = 0
    p, tp = solution.costates, solution.costate_times
    p0 = p[0] - tp[0] * (p[1] - p[0]) / (tp[1] - tp[0]) if p.shape[0] > 1 else p[0]
    return p0, switches, float(solution.trajectory.final_time)
