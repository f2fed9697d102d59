"""Grid-based Hamilton-Jacobi-Bellman solvers.

Monotone finite-difference steps (upwind and Lax-Friedrichs), semi-Lagrangian
steps, backward marching from a terminal cost, forward level-set marching for
minimum time, the augmented (x, z) problem for state constraints, and the
OCTB binary table format.

Sign convention: ``H(t, x, p) = max_u (-f(t, x, u) . p - l(t, x, u))`` and one
step maps ``V -> V - dt * H_num(D^-V, D^+V)``. Backward in time this is the
terminal-value problem; forward in pseudo-time it propagates a level set.
Unreachable values are stored as the sentinel ``1e6``.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.ndimage import map_coordinates

from .core import ControlProblem, control_grid

SENTINEL = 1e6
OCTB_MAGIC = b"OCTB"
OCTB_VERSION = 1

_KIND_ALIASES = {"lf": "lax_friedrichs", "up": "upwind", "upwind": "upwind",
                 "lax_friedrichs": "lax_friedrichs", "lax-friedrichs": "lax_friedrichs"}


class CFLError(ValueError):
    """The requested time step exceeds the monotonicity bound of the explicit scheme."""


# ----------------------------------------------------------------------------
# Grid and tables

@dataclass(frozen=True)
class Grid:
    lo: tuple
    hi: tuple
    counts: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        counts = tuple(int(v) for v in np.atleast_1d(self.counts))
        if not (len(lo) == len(hi) == len(counts)) or not lo:
            raise ValueError("grid bounds and counts must have one entry per axis")
        for a, b, n in zip(lo, hi, counts):
            if n < 2:
                raise ValueError("each grid axis needs at least 2 nodes")
            if not a < b:
                raise ValueError("grid axis needs lo < hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def parse(cls, lo, hi, spec: str) -> "Grid":
        """Grid from a ``"500x100"`` style node-count string."""
        return cls(lo, hi, tuple(int(s) for s in spec.lower().split("x")))

    @property
    def ndim(self) -> int:
        return len(self.counts)

    @property
    def shape(self) -> tuple:
        return self.counts

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.counts))

    @property
    def dx(self) -> np.ndarray:
        return (np.asarray(self.hi) - np.asarray(self.lo)) / (np.asarray(self.counts) - 1)

    @property
    def axes(self) -> list:
        return [np.linspace(a, b, n) for a, b, n in zip(self.lo, self.hi, self.counts)]

    def mesh(self) -> list:
        return np.meshgrid(*self.axes, indexing="ij")

    def points(self) -> np.ndarray:
        """All nodes, row-major, shape ``(n_nodes, ndim)``."""
        return np.stack([m.ravel() for m in self.mesh()], axis=-1)

    def contains(self, x, margin: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all((x >= np.asarray(self.lo) - margin) & (x <= np.asarray(self.hi) + margin), axis=-1)

    def interpolate(self, values: np.ndarray, x) -> np.ndarray:
        """Multilinear interpolation; points outside the box take the value of the nearest face."""
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, self.ndim)
        coords = ((flat - np.asarray(self.lo)) / self.dx).T
        out = map_coordinates(np.asarray(values, dtype=float).reshape(self.shape), coords, order=1,
                              mode="nearest")
        return out.reshape(x.shape[:-1])


@dataclass
class GridValueTable:
    grid: Grid
    times: list = field(default_factory=list)
    slices: list = field(default_factory=list)
    policy: str = "all_slices"

    def __post_init__(self):
        if self.policy not in ("all_slices", "last_two"):
            raise ValueError("storage policy must be 'all_slices' or 'last_two'")

    def append(self, t: float, values) -> None:
        values = np.asarray(values, dtype=float).reshape(self.grid.shape)
        if np.any(np.isnan(values)):
            raise FloatingPointError("NaN in value slice")
        self.times.append(float(t))
        self.slices.append(values)
        if self.policy == "last_two" and len(self.slices) > 2:
            del self.times[0], self.slices[0]

    @property
    def latest(self) -> np.ndarray:
        return self.slices[-1]

    def slice_at(self, t: float) -> np.ndarray:
        """Slice at ``t``, linearly interpolated between the two bracketing stored times."""
        times = np.asarray(self.times)
        order = np.argsort(times)
        ts = times[order]
        if t <= ts[0]:
            return self.slices[order[0]]
        if t >= ts[-1]:
            return self.slices[order[-1]]
        k = int(np.searchsorted(ts, t)) - 1
        a, b = order[k], order[k + 1]
        s = (t - ts[k]) / (ts[k + 1] - ts[k])
        if s < 1e-12:
            return self.slices[a]
        if s > 1 - 1e-12:
            return self.slices[b]
        return (1 - s) * self.slices[a] + s * self.slices[b]

    def value(self, t: float, x) -> np.ndarray:
        return self.grid.interpolate(self.slice_at(t), x)

    def save(self, path) -> None:
        save_table(self, path)


def save_table(table: GridValueTable, path) -> None:
    """Write the OCTB format: header then little-endian float64 slices in stored order."""
    g = table.grid
    with open(path, "wb") as fh:
        fh.write(OCTB_MAGIC)
        fh.write(struct.pack("<II", OCTB_VERSION, g.ndim))
        for a, b, n in zip(g.lo, g.hi, g.counts):
            fh.write(struct.pack("<ddI", a, b, n))
        fh.write(struct.pack("<I", len(table.times)))
        fh.write(np.asarray(table.times, dtype="<f8").tobytes())
        for s in table.slices:
            fh.write(np.asarray(s, dtype="<f8").tobytes())


def load_table(path) -> GridValueTable:
    data = Path(path).read_bytes()
    if data[:4] != OCTB_MAGIC:
        raise ValueError("not an OCTB table")
    version, ndim = struct.unpack_from("<II", data, 4)
    if version != OCTB_VERSION:
        raise ValueError(f"unsupported OCTB version {version}")
    pos = 12
    lo, hi, counts = [], [], []
    for _ in range(ndim):
        a, b, n = struct.unpack_from("<ddI", data, pos)
        pos += 20
        lo.append(a), hi.append(b), counts.append(n)
    (nt,) = struct.unpack_from("<I", data, pos)
    pos += 4
    times = np.frombuffer(data, dtype="<f8", count=nt, offset=pos).tolist()
    pos += 8 * nt
    grid = Grid(tuple(lo), tuple(hi), tuple(counts))
    table = GridValueTable(grid)
    size = grid.n_nodes
    for k in range(nt):
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos + 8 * size * k).reshape(grid.shape)
        table.times.append(times[k])
        table.slices.append(arr.copy())
    return table


# ----------------------------------------------------------------------------
# Numerical Hamiltonians

@dataclass(frozen=True)
class NumericalHamiltonianSpec:
    """Scheme choice and control sampling.

    ``dissipation`` gives global Lax-Friedrichs constants per axis; when
    omitted the local bound ``max_u |f_i(t, x, u)|`` at each node is used.
    ``analytic`` selects the problem's closed-form ``max_u(-f.p)`` when the
    running cost is not part of the Hamiltonian.
    """

    kind: str = "lax_friedrichs"
    n_controls: int | tuple = 64
    dissipation: Optional[tuple] = None
    analytic: bool = True

    def __post_init__(self):
        kind = _KIND_ALIASES.get(self.kind)
        if kind is None:
            raise ValueError(f"unknown numerical Hamiltonian {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if self.dissipation is not None:
            C = tuple(float(c) for c in np.atleast_1d(self.dissipation))
            if any(not (math.isfinite(c) and c >= 0) for c in C):
                raise ValueError("dissipation constants must be finite and nonnegative")
            object.__setattr__(self, "dissipation", C)


def sample_controls(problem: ControlProblem, n_controls=64) -> np.ndarray:
    periodic = problem.metadata.get("periodic_controls")
    return control_grid(problem.lo, problem.hi, n_controls, periodic)


class DynamicsSampler:
    """Velocities and running costs at grid nodes for every sampled control.

    Autonomous problems are evaluated once; set ``metadata["time_dependent"]``
    on problems whose dynamics or costs depend on ``t``.
    """

    def __init__(self, problem: ControlProblem, points: np.ndarray, n_controls=64):
        self.problem = problem
        self.points = np.asarray(points, dtype=float)
        self.controls = sample_controls(problem, n_controls)
        self.autonomous = not problem.metadata.get("time_dependent", False)
        self._cache = None

    def evaluate(self, t: float):
        """Return ``(f, l)`` with shapes ``(n_u, n, d)`` and ``(n_u, n)``."""
        if self.autonomous and self._cache is not None:
            return self._cache
        P = self.problem
        n, d = self.points.shape
        m = len(self.controls)
        x = np.broadcast_to(self.points[None, :, :], (m, n, d))
        u = np.broadcast_to(self.controls[:, None, :], (m, n, self.controls.shape[1]))
        f = np.broadcast_to(np.asarray(P.dynamics(t, x, u), dtype=float), (len(self.controls), n, d))
        ell = np.broadcast_to(np.asarray(P.running_cost(t, x, u), dtype=float), (len(self.controls), n))
        out = (np.ascontiguousarray(f), np.ascontiguousarray(ell))
        if self.autonomous:
            self._cache = out
        return out

    def speeds(self, t: float) -> np.ndarray:
        """``max_u |f_i|`` at every node, shape ``(n, d)``."""
        P = self.problem
        if P.speed_bound is not None:
            return np.broadcast_to(np.asarray(P.speed_bound(t, self.points), dtype=float), self.points.shape)
        f, _ = self.evaluate(t)
        return np.max(np.abs(f), axis=0)


def _hamiltonian_terms(spec, sampler, t, p_minus, p_plus, running_cost):
    """Numerical Hamiltonian at the sampler's points; ``p_*`` have shape ``(n, d)``."""
    P = sampler.problem
    if spec.kind == "upwind":
        f, ell = sampler.evaluate(t)
        vals = (np.einsum("und,nd->un", np.maximum(-f, 0.0), p_minus)
                + np.einsum("und,nd->un", np.minimum(-f, 0.0), p_plus))
        if running_cost:
            vals = vals - ell
        return np.max(vals, axis=0)
    p_bar = 0.5 * (p_minus + p_plus)
    if spec.analytic and not running_cost and P.support_hamiltonian is not None:
        H = np.asarray(P.support_hamiltonian(t, sampler.points, p_bar), dtype=float)
    else:
        f, ell = sampler.evaluate(t)
        vals = -np.einsum("und,nd->un", f, p_bar)
        if running_cost:
            vals = vals - ell
        H = np.max(vals, axis=0)
    C = np.asarray(spec.dissipation) if spec.dissipation is not None else sampler.speeds(t)
    return H - np.sum(C * (p_plus - p_minus), axis=-1) / 2


def numerical_hamiltonian(spec: NumericalHamiltonianSpec, problem: ControlProblem, t: float, x, p_minus, p_plus,
                          running_cost: bool = True):
    """Upwind or Lax-Friedrichs numerical Hamiltonian at one or many points."""
    x = np.asarray(x, dtype=float)
    d = problem.state_dim
    pts = x.reshape(-1, d)
    pm = np.broadcast_to(np.asarray(p_minus, dtype=float).reshape(-1, d), pts.shape)
    pp = np.broadcast_to(np.asarray(p_plus, dtype=float).reshape(-1, d), pts.shape)
    sampler = DynamicsSampler(problem, pts, spec.n_controls)
    out = _hamiltonian_terms(spec, sampler, t, pm, pp, running_cost)
    return float(out[0]) if x.ndim == 1 else out.reshape(x.shape[:-1])


def cfl_from_speeds(max_speeds, dx, horizon: float = math.inf) -> float:
    rate = float(np.sum(np.asarray(max_speeds, dtype=float) / np.asarray(dx, dtype=float)))
    return horizon if rate == 0 else 1.0 / rate


def cfl_max_dt(problem: ControlProblem, grid: Grid, spec: Optional[NumericalHamiltonianSpec] = None,
               sampler: Optional[DynamicsSampler] = None, t: float = 0.0) -> float:
    """``1 / sum_i (max |f_i| / dx_i)`` over grid nodes and sampled controls."""
    spec = spec or NumericalHamiltonianSpec()
    sampler = sampler or DynamicsSampler(problem, grid.points(), spec.n_controls)
    speeds = np.max(sampler.speeds(t), axis=0)
    if spec.dissipation is not None and spec.kind == "lax_friedrichs":
        speeds = np.maximum(speeds, spec.dissipation)
    return cfl_from_speeds(speeds, grid.dx, problem.horizon)


# ----------------------------------------------------------------------------
# One time step

def one_sided_differences(V: np.ndarray, grid: Grid):
    """``(D^-V, D^+V)`` with shape ``(n, d)``; ghost nodes copy the boundary value."""
    V = np.asarray(V, dtype=float).reshape(grid.shape)
    dm, dp = [], []
    for axis, h in enumerate(grid.dx):
        padded = np.concatenate([np.take(V, [0], axis), V, np.take(V, [-1], axis)], axis=axis)
        n = V.shape[axis]
        lower = np.take(padded, np.arange(0, n), axis)
        upper = np.take(padded, np.arange(2, n + 2), axis)
        dm.append(((V - lower) / h).ravel())
        dp.append(((upper - V) / h).ravel())
    return np.stack(dm, axis=-1), np.stack(dp, axis=-1)


def _obstacle_values(obstacle, grid, t):
    if obstacle is None:
        return None
    if callable(obstacle):
        return np.asarray(obstacle(t, grid.points()), dtype=float).reshape(grid.shape)
    return np.broadcast_to(np.asarray(obstacle, dtype=float), grid.shape)


def fd_step(V: np.ndarray, grid: Grid, problem: ControlProblem, t: float, dt: float,
            spec: Optional[NumericalHamiltonianSpec] = None, obstacle=None, running_cost: bool = True,
            sampler: Optional[DynamicsSampler] = None, check_cfl: bool = True) -> np.ndarray:
    """Explicit monotone step ``V - dt * H_num(t, x, D^-V, D^+V)``, then ``max`` with the obstacle.

    ``obstacle`` is an array over the grid or a callable ``(t, points)``.
    """
    spec = spec or NumericalHamiltonianSpec()
    sampler = sampler or DynamicsSampler(problem, grid.points(), spec.n_controls)
    if check_cfl:
        limit = cfl_max_dt(problem, grid, spec, sampler, t)
        if dt > limit * (1 + 1e-12):
            raise CFLError(f"time step {dt:.6g} exceeds the CFL bound {limit:.6g}")
    V = np.asarray(V, dtype=float).reshape(grid.shape)
    dm, dp = one_sided_differences(V, grid)
    Hn = _hamiltonian_terms(spec, sampler, t, dm, dp, running_cost).reshape(grid.shape)
    out = V - dt * Hn
    psi = _obstacle_values(obstacle, grid, t)
    return out if psi is None else np.maximum(out, psi)


def sl_step(V: np.ndarray, grid: Grid, problem: ControlProblem, t: float, dt: float,
            spec: Optional[NumericalHamiltonianSpec] = None, obstacle=None, running_cost: bool = True,
            sampler: Optional[DynamicsSampler] = None) -> np.ndarray:
    """Semi-Lagrangian step ``min_u [dt l + I1[V](x + dt f)]`` with clamped foot points."""
    spec = spec or NumericalHamiltonianSpec()
    sampler = sampler or DynamicsSampler(problem, grid.points(), spec.n_controls)
    f, ell = sampler.evaluate(t)
    V = np.asarray(V, dtype=float).reshape(grid.shape)
    best = np.full(grid.n_nodes, np.inf)
    for k in range(f.shape[0]):
        cand = grid.interpolate(V, sampler.points + dt * f[k])
        if running_cost:
            cand = cand + dt * ell[k]
        np.minimum(best, cand, out=best)
    out = best.reshape(grid.shape)
    psi = _obstacle_values(obstacle, grid, t)
    return out if psi is None else np.maximum(out, psi)


# ----------------------------------------------------------------------------
# Marching solvers

def _method_spec(method: str, spec: Optional[NumericalHamiltonianSpec]):
    if method == "sl":
        return "sl", spec or NumericalHamiltonianSpec()
    kind = _KIND_ALIASES.get(method)
    if kind is None:
        raise ValueError(f"unknown HJB method {method!r}")
    spec = spec or NumericalHamiltonianSpec(kind=kind)
    return "fd", replace(spec, kind=kind)


def _time_steps(span: float, dt: float) -> tuple:
    n = max(1, int(math.ceil(span / dt - 1e-9)))
    return n, span / n


def solve_terminal_value(problem: ControlProblem, grid: Grid, method: str = "lax_friedrichs",
                         spec: Optional[NumericalHamiltonianSpec] = None, dt: Optional[float] = None,
                         store: str = "all_slices", obstacle=None, stopping=None,
                         horizon: Optional[float] = None, terminal=None,
                         progress: Optional[Callable] = None) -> GridValueTable:
    """March ``V(T) = phi`` backward to ``t = 0``.

    ``stopping`` (array over the grid) turns the problem into a free-time one:
    after each step ``V <- min(V, stopping)`` before the obstacle is applied.
    ``terminal`` overrides the final cost sampled on the grid.
    """
    kind, spec = _method_spec(method, spec)
    T = float(problem.horizon if horizon is None else horizon)
    if T < 0:
        raise ValueError("horizon must be nonnegative")
    points = grid.points()
    V = (np.asarray(problem.final_cost(points), dtype=float) if terminal is None
         else np.asarray(terminal, dtype=float)).reshape(grid.shape)
    V = np.broadcast_to(V, grid.shape).copy()
    psi0 = _obstacle_values(obstacle, grid, T)
    if psi0 is not None:
        V = np.maximum(V, psi0)
    table = GridValueTable(grid, policy=store)
    table.append(T, V)
    if T == 0:
        return table
    sampler = DynamicsSampler(problem, points, spec.n_controls)
    if dt is None:
        dt = 0.9 * cfl_max_dt(problem, grid, spec, sampler, T)
        if not math.isfinite(dt) or dt > T:
            dt = T
    elif kind == "fd":
        limit = cfl_max_dt(problem, grid, spec, sampler, T)
        if dt > limit * (1 + 1e-12):
            raise CFLError(f"time step {dt:.6g} exceeds the CFL bound {limit:.6g}")
    n, dt = _time_steps(T, dt)
    for k in range(n):
        t_new = T - (k + 1) * dt
        if kind == "fd":
            V = fd_step(V, grid, problem, t_new, dt, spec, None, True, sampler, check_cfl=False)
        else:
            V = sl_step(V, grid, problem, t_new, dt, spec, None, True, sampler)
        if stopping is not None:
            V = np.minimum(V, np.asarray(stopping).reshape(grid.shape))
        psi = _obstacle_values(obstacle, grid, t_new)
        if psi is not None:
            V = np.maximum(V, psi)
        table.append(max(t_new, 0.0), V)
        if progress is not None:
            progress(k + 1, n)
    return table


@dataclass
class LevelSetResult:
    table: GridValueTable
    min_time: GridValueTable  # single slice, SENTINEL where the target was never reached
    dt: float
    steps: int
    query_points: Optional[np.ndarray] = None
    query_times: Optional[list] = None

    def time_at(self, x) -> Optional[float]:
        """Minimum time interpolated from the node table.

        ``None`` when a corner with nonzero interpolation weight is unreached.
        """
        grid = self.min_time.grid
        vals = self.min_time.slices[0]
        s = (np.asarray(x, dtype=float) - np.asarray(grid.lo)) / grid.dx
        s = np.clip(s, 0.0, np.asarray(grid.counts) - 1.0)
        idx = np.minimum(s.astype(int), np.asarray(grid.counts) - 2)
        frac = s - idx
        total = 0.0
        for corner in np.ndindex(*(2,) * grid.ndim):
            w = float(np.prod(np.where(np.array(corner) == 1, frac, 1.0 - frac)))
            if w <= 1e-12:
                continue
            v = vals[tuple(idx + np.array(corner))]
            if v >= SENTINEL:
                return None
            total += w * v
        return total


def max_components(fun: Callable, points: np.ndarray, count: int) -> Optional[np.ndarray]:
    if count == 0:
        return None
    return np.max(np.asarray(fun(points), dtype=float).reshape(len(points), -1), axis=-1)


def solve_levelset_mintime(problem: ControlProblem, grid: Grid, t_max: float, method: str = "lax_friedrichs",
                           spec: Optional[NumericalHamiltonianSpec] = None, dt: Optional[float] = None,
                           query=None, store: str = "last_two") -> LevelSetResult:
    """Forward pseudo-time marching of ``V(t, x) = min Phi(x(t))`` with obstacle ``Psi``.

    ``Phi`` is the max of the final-constraint components and ``Psi`` the max
    of the state-constraint components. The minimum time at a node is the first
    crossing of zero, linearly interpolated between bracketing slices.
    """
    kind, spec = _method_spec(method, spec)
    points = grid.points()
    phi = max_components(problem.final_constraint, points, problem.n_final_constraints)
    if phi is None:
        raise ValueError("level-set minimum time needs a target (final constraint)")
    psi = max_components(problem.state_constraint, points, problem.n_state_constraints)
    psi = None if psi is None else psi.reshape(grid.shape)
    V = phi.reshape(grid.shape)
    if psi is not None:
        V = np.maximum(V, psi)
    sampler = DynamicsSampler(problem, points, spec.n_controls)
    if dt is None:
        dt = 0.9 * cfl_max_dt(problem, grid, spec, sampler)
    elif kind == "fd":
        limit = cfl_max_dt(problem, grid, spec, sampler)
        if dt > limit * (1 + 1e-12):
            raise CFLError(f"time step {dt:.6g} exceeds the CFL bound {limit:.6g}")
    n, dt = _time_steps(t_max, dt)
    table = GridValueTable(grid, policy=store)
    table.append(0.0, V)
    tmin = np.where(V <= 0, 0.0, SENTINEL)
    q = None if query is None else np.atleast_2d(np.asarray(query, dtype=float))
    q_prev = None if q is None else grid.interpolate(V, q)
    q_times = None if q is None else [0.0 if v <= 0 else None for v in q_prev]
    for k in range(n):
        t_old = k * dt
        if kind == "fd":
            Vn = fd_step(V, grid, problem, t_old, dt, spec, psi, False, sampler, check_cfl=False)
        else:
            Vn = sl_step(V, grid, problem, t_old, dt, spec, psi, False, sampler)
        hit = (tmin >= SENTINEL) & (Vn <= 0)
        if np.any(hit):
            frac = V[hit] / np.maximum(V[hit] - Vn[hit], 1e-300)
            tmin[hit] = t_old + dt * np.clip(frac, 0.0, 1.0)
        if q is not None:
            q_new = grid.interpolate(Vn, q)
            for i, (a, b) in enumerate(zip(q_prev, q_new)):
                if q_times[i] is None and b <= 0:
                    q_times[i] = t_old + dt * float(np.clip(a / max(a - b, 1e-300), 0.0, 1.0))
            q_prev = q_new
        V = Vn
        table.append((k + 1) * dt, V)
    mt = GridValueTable(grid)
    mt.append(0.0, tmin)
    return LevelSetResult(table, mt, dt, n, q, q_times)


def kruzhkov(T_value: Optional[float]) -> float:
    """``1 - exp(-T)``, with ``None`` (never reached) mapped to 1."""
    if T_value is None or (isinstance(T_value, float) and math.isinf(T_value)) or T_value >= SENTINEL:
        return 1.0
    if T_value < 0:
        raise ValueError("minimum time must be nonnegative")
    return 1.0 - math.exp(-T_value)


# ----------------------------------------------------------------------------
# Auxiliary (x, z) problem

@dataclass
class AuxiliaryProblem:
    """Augmented problem on ``(x, z)`` with ``z' = -l``.

    Terminal payoff ``(phi(x) + offset - z) v G(x) v G_f(x)`` and obstacle
    ``G(x)``. The offset shifts the cost into the z-range of the grid; values
    recovered by :func:`value_from_w` are reported in the original units.
    """

    problem: ControlProblem
    base: ControlProblem
    offset: float = 0.0
    z_bounds: tuple = (0.0, 1.0)

    def terminal(self, points) -> np.ndarray:
        return np.asarray(self.problem.final_cost(points), dtype=float)

    def obstacle(self, t, points) -> np.ndarray:
        d = self.base.state_dim
        g = max_components(self.base.state_constraint, np.asarray(points)[..., :d].reshape(-1, d),
                           self.base.n_state_constraints)
        if g is None:
            return np.full(len(points), -np.inf)
        return g

    @property
    def constrained(self) -> bool:
        return self.base.n_state_constraints > 0

    def grid(self, counts: Sequence[int], lo=None, hi=None) -> Grid:
        lo = tuple(self.base.domain_lo if lo is None else lo) + (self.z_bounds[0],)
        hi = tuple(self.base.domain_hi if hi is None else hi) + (self.z_bounds[1],)
        return Grid(lo, hi, tuple(counts))


def build_auxiliary(problem: ControlProblem, z_bounds: tuple = (0.0, 1.0), offset: float = 0.0) -> AuxiliaryProblem:
    d = problem.state_dim
    base = problem

    def split(y):
        y = np.asarray(y, dtype=float)
        return y[..., :d], y[..., d]

    def dynamics(t, y, u):
        x, _ = split(y)
        f = np.asarray(base.dynamics(t, x, u), dtype=float)
        ell = np.asarray(base.running_cost(t, x, u), dtype=float)
        shape = np.broadcast_shapes(f.shape[:-1], ell.shape)
        f = np.broadcast_to(f, shape + (d,))
        return np.concatenate([f, -np.broadcast_to(ell, shape)[..., None]], axis=-1)

    def terminal(y):
        x, z = split(y)
        vals = np.asarray(base.final_cost(x), dtype=float) + offset - z
        if base.n_state_constraints:
            vals = np.maximum(vals, np.max(np.asarray(base.state_constraint(x)), axis=-1))
        if base.n_final_constraints:
            vals = np.maximum(vals, np.max(np.asarray(base.final_constraint(x)), axis=-1))
        return vals

    def state_constraint(y):
        x, _ = split(y)
        return np.asarray(base.state_constraint(x))

    def final_constraint(y):
        x, _ = split(y)
        return np.asarray(base.final_constraint(x))

    lo = None if base.domain_lo is None else tuple(base.domain_lo) + (z_bounds[0],)
    hi = None if base.domain_hi is None else tuple(base.domain_hi) + (z_bounds[1],)
    init = None if base.initial_state is None else tuple(base.initial_state) + (0.0,)
    aug = ControlProblem(
        state_dim=d + 1, control_dim=base.control_dim, dynamics=dynamics,
        control_lo=base.control_lo, control_hi=base.control_hi,
        final_cost=terminal,
        state_constraint=state_constraint, n_state_constraints=base.n_state_constraints,
        final_constraint=final_constraint, n_final_constraints=base.n_final_constraints,
        horizon=base.horizon, free_time=base.free_time, lipschitz=base.lipschitz,
        name=f"{base.name}-auxiliary", initial_state=init, domain_lo=lo, domain_hi=hi,
        nominal_horizon=base.nominal_horizon,
        metadata=dict(base.metadata),
    )
    return AuxiliaryProblem(aug, base, float(offset), tuple(z_bounds))


def solve_auxiliary(aux: AuxiliaryProblem, grid: Grid, method: str = "sl",
                    spec: Optional[NumericalHamiltonianSpec] = None, dt: Optional[float] = None,
                    horizon: Optional[float] = None, store: str = "all_slices",
                    free_time: Optional[bool] = None, progress: Optional[Callable] = None) -> GridValueTable:
    """Backward solve of the minmax equation for ``W``.

    For free-time problems the terminal payoff acts as a stopping payoff at
    every step, so ``W(0, .)`` is the value of stopping at the best time within
    ``horizon``.
    """
    free_time = aux.base.free_time if free_time is None else free_time
    points = grid.points()
    terminal = aux.terminal(points)
    obstacle = aux.obstacle(0.0, points).reshape(grid.shape) if aux.constrained else None
    return solve_terminal_value(
        aux.problem, grid, method, spec, dt, store, obstacle=obstacle,
        stopping=terminal if free_time else None, horizon=horizon, terminal=terminal, progress=progress,
    )


def value_from_w(table: GridValueTable, x, t: float = 0.0, offset: float = 0.0) -> Optional[float]:
    """Smallest ``z`` with ``W(t, x, z) <= 0`` along the z-axis through ``x``; ``None`` if none."""
    grid = table.grid
    zs = grid.axes[-1]
    x = np.asarray(x, dtype=float)
    pts = np.column_stack([np.tile(x, (zs.size, 1)), zs])
    w = table.value(t, pts)
    below = np.flatnonzero(w <= 0)
    if below.size == 0:
        return None
    j = int(below[0])
    if j == 0:
        return float(zs[0]) - offset
    a, b = w[j - 1], w[j]
    z = zs[j - 1] + (zs[j] - zs[j - 1]) * a / (a - b)
    return float(z) - offset
