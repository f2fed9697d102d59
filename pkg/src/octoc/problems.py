"""Benchmark problem constructors: Zermelo variants, Goddard rocket, linear-quadratic family.

Every constructor attaches the JSON configuration it was built from, so a
problem can be written back out with :func:`problem_to_config`.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .core import ControlProblem, LipschitzBundle, array_module

TWO_PI = 2.0 * math.pi

ZERMELO_VARIANTS = ("mintime_point_target", "channel_ball_target", "fuel_two_obstacles")


class ConfigError(ValueError):
    """Invalid problem configuration (unknown keys, bad variant, bad values)."""


# ----------------------------------------------------------------------------
# Zermelo

@dataclass(frozen=True)
class ZermeloVariant:
    tag: str
    v_max: float
    target: tuple
    target_radius: float
    obstacle: bool = False
    horizon: float = 1.0

    def __post_init__(self):
        if self.tag not in ZERMELO_VARIANTS:
            raise ConfigError(f"unknown Zermelo variant {self.tag!r}")
        if self.target_radius < 0:
            raise ConfigError("target radius must be nonnegative")


def river_drift(y2):
    """Current of the straight-river variant: 3 + 0.2 y2 (1 - y2)."""
    return 3.0 + 0.2 * y2 * (1.0 - y2)


def channel_drift(y2):
    """Current of the channel variant: 2 - y2^2/2, zero on the banks y2 = +-2."""
    return 2.0 - 0.5 * y2 * y2


# obstacle of the straight-river variant: ellipse centred at (y1f/2, y2f/2.5)
OBSTACLE_CENTER = (10.0, 0.4)
OBSTACLE_SEMI_AXES = (2.0, 0.1)


def ellipse_excess(y):
    """(y1-10)^2/a1^2 + (y2-0.4)^2/a2^2 - 1, positive outside the obstacle."""
    (c1, c2), (a1, a2) = OBSTACLE_CENTER, OBSTACLE_SEMI_AXES
    return (y[..., 0] - c1) ** 2 / a1**2 + (y[..., 1] - c2) ** 2 / a2**2 - 1.0


def two_obstacle_constraint(x):
    """Pointwise constraint of the fuel problem: positive inside either rectangle."""
    xp = array_module(x)
    box1 = 0.4 - xp.maximum(xp.abs(x[..., 0] + 2.0), xp.abs(x[..., 1] - 0.5))
    box2 = xp.minimum(0.2 - xp.abs(x[..., 0] + 2.5), 1.0 - xp.abs(x[..., 1] + 1.0))
    return xp.maximum(box1, box2)[..., None]


_ZERMELO_DEFAULTS = {
    "mintime_point_target": {"v_max": 1.0, "target": [20.0, 1.0], "target_radius": 0.1,
                             "obstacle": False, "initial_state": [0.0, 0.0]},
    "channel_ball_target": {"v_max": 1.0, "target_radius": 0.1, "cost": "time", "horizon": 1.0},
    "fuel_two_obstacles": {"v_max": 1.0, "target_radius": 0.1, "horizon": 1.0},
}


def make_zermelo(variant: str = "mintime_point_target", params: Optional[dict] = None) -> ControlProblem:
    """Build one of the three Zermelo boat problems.

    ``mintime_point_target`` uses a single control (heading angle) with speed
    fixed at ``v_max``; the two channel variants use (speed, heading).
    """
    if variant not in ZERMELO_VARIANTS:
        raise ConfigError(f"unknown Zermelo variant {variant!r}")
    merged = dict(_ZERMELO_DEFAULTS[variant])
    for key, value in (params or {}).items():
        if key not in merged:
            raise ConfigError(f"unknown parameter {key!r} for Zermelo variant {variant!r}")
        merged[key] = value
    config = {"problem": "zermelo", "variant": variant, "params": merged}
    if merged["target_radius"] < 0:
        raise ConfigError("target radius must be nonnegative")
    vmax = float(merged["v_max"])
    if variant == "mintime_point_target":
        return _zermelo_river(vmax, tuple(map(float, merged["target"])), float(merged["target_radius"]),
                              bool(merged["obstacle"]), tuple(map(float, merged["initial_state"])), config)
    return _zermelo_channel(variant, vmax, float(merged["target_radius"]), float(merged["horizon"]),
                            merged.get("cost", "fuel"), config)


def _zermelo_river(vmax, target, radius, obstacle, x0, config):
    yf = np.asarray(target)

    def dynamics(t, x, u):
        xp = array_module(x, u)
        a = u[..., 0]
        return xp.stack([vmax * xp.cos(a) + river_drift(x[..., 1]), vmax * xp.sin(a)], axis=-1)

    def final_constraint(x):
        xp = array_module(x)
        return (xp.sqrt((x[..., 0] - yf[0]) ** 2 + (x[..., 1] - yf[1]) ** 2) - radius)[..., None]

    def running_cost(t, x, u):
        xp = array_module(x)
        return xp.ones(np.shape(x)[:-1])

    def support(t, x, p):
        xp = array_module(x, p)
        return vmax * xp.sqrt(p[..., 0] ** 2 + p[..., 1] ** 2) - river_drift(x[..., 1]) * p[..., 0]

    def speed(t, x):
        xp = array_module(x)
        h = river_drift(x[..., 1])
        return xp.stack([vmax + xp.abs(h), vmax * xp.ones_like(h)], axis=-1)

    kwargs = {}
    if obstacle:
        kwargs = dict(state_constraint=lambda x: (-ellipse_excess(x))[..., None], n_state_constraints=1)
    return ControlProblem(
        state_dim=2, control_dim=1, dynamics=dynamics,
        control_lo=(0.0,), control_hi=(TWO_PI,),
        running_cost=running_cost, final_constraint=final_constraint, n_final_constraints=1,
        horizon=5.0, free_time=True, nominal_horizon=5.0,
        lipschitz=LipschitzBundle(L_fx=0.2 * 2.0, L_fu=vmax, L_lx=0.0, L_lu=0.0, L_gf=1.0, L_g=1.0,
                                  c_f=vmax + 3.05, c_l=1.0),
        name="zermelo-mintime_point_target", initial_state=x0, target_point=target,
        domain_lo=(-1.0, -0.5), domain_hi=(21.0, 1.5),
        support_hamiltonian=support, speed_bound=speed, config=config,
        metadata={"variant": "mintime_point_target", "v_max": vmax, "target_radius": radius,
                  "obstacle": obstacle, "periodic_controls": (True,)},
        **kwargs,
    )


def _zermelo_channel(variant, vmax, radius, horizon, cost, config):
    def dynamics(t, x, u):
        xp = array_module(x, u)
        v, a = u[..., 0], u[..., 1]
        return xp.stack([v * xp.cos(a) + channel_drift(x[..., 1]), v * xp.sin(a)], axis=-1)

    def final_constraint(x):
        xp = array_module(x)
        if variant == "fuel_two_obstacles":
            return (xp.maximum(xp.abs(x[..., 0]), xp.abs(x[..., 1])) - radius)[..., None]
        return (xp.sqrt(x[..., 0] ** 2 + x[..., 1] ** 2) - radius)[..., None]

    if cost not in ("time", "fuel"):
        raise ConfigError("cost must be 'time' or 'fuel'")

    def running_cost(t, x, u):
        xp = array_module(x, u)
        if cost == "time":
            return xp.ones(np.shape(x)[:-1])
        return u[..., 0] * xp.ones(np.shape(x)[:-1])

    def support(t, x, p):
        xp = array_module(x, p)
        return vmax * xp.sqrt(p[..., 0] ** 2 + p[..., 1] ** 2) - channel_drift(x[..., 1]) * p[..., 0]

    def speed(t, x):
        xp = array_module(x)
        h = channel_drift(x[..., 1])
        return xp.stack([vmax + xp.abs(h), vmax * xp.ones_like(h)], axis=-1)

    kwargs = {}
    if variant == "fuel_two_obstacles":
        kwargs = dict(state_constraint=two_obstacle_constraint, n_state_constraints=1)
    return ControlProblem(
        state_dim=2, control_dim=2, dynamics=dynamics,
        control_lo=(0.0, 0.0), control_hi=(vmax, TWO_PI),
        running_cost=running_cost, final_constraint=final_constraint, n_final_constraints=1,
        horizon=horizon, free_time=(variant == "channel_ball_target" and cost == "time"),
        nominal_horizon=horizon,
        lipschitz=LipschitzBundle(L_fx=2.0, L_fu=max(1.0, vmax), L_lx=0.0,
                                  L_lu=1.0 if cost == "fuel" else 0.0,
                                  L_g=1.0, L_gf=1.0, c_f=vmax + 2.0, c_l=vmax),
        name=f"zermelo-{variant}", target_point=(0.0, 0.0),
        domain_lo=(-5.0, -2.0), domain_hi=(2.0, 2.0),
        support_hamiltonian=support if cost == "time" or variant == "channel_ball_target" else None,
        speed_bound=speed, config=config,
        metadata={"variant": variant, "v_max": vmax, "target_radius": radius, "cost": cost,
                  "periodic_controls": (False, True)},
        **kwargs,
    )


# ----------------------------------------------------------------------------
# Goddard

@dataclass(frozen=True)
class GoddardParams:
    C_D: float = 310.0
    beta: float = 500.0
    T_max: float = 3.5
    b: float = 2.0
    m_star: float = 0.6
    v_max: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ConfigError(f"Goddard parameter {f.name} must be positive")

    def drag(self, r, v):
        xp = array_module(r, v)
        return self.C_D * v * v * xp.exp(-self.beta * (r - 1.0))


# Grids over the Goddard domain include m = 0, far below the dry mass.
MASS_FLOOR = 1e-3


def make_goddard(params: Optional[GoddardParams | dict] = None) -> ControlProblem:
    """Goddard rocket: maximise final altitude with a velocity cap and a dry-mass floor."""
    if params is None:
        params = GoddardParams()
    elif isinstance(params, dict):
        known = {f.name for f in fields(GoddardParams)}
        unknown = set(params) - known
        if unknown:
            raise ConfigError(f"unknown Goddard parameters {sorted(unknown)}")
        params = GoddardParams(**params)
    P = params

    def drift(x):
        xp = array_module(x)
        r, v, m = x[..., 0], x[..., 1], xp.maximum(x[..., 2], MASS_FLOOR)
        return xp.stack([v, -P.drag(r, v) / m - 1.0 / (r * r), xp.zeros_like(m)], axis=-1)

    def control_field(x):
        xp = array_module(x)
        m = xp.maximum(x[..., 2], MASS_FLOOR)
        return xp.stack([xp.zeros_like(m), P.T_max / m, -P.b * P.T_max * xp.ones_like(m)], axis=-1)

    def dynamics(t, x, u):
        return drift(x) + u[..., 0:1] * control_field(x)

    def final_cost(x):
        return -x[..., 0]

    return ControlProblem(
        state_dim=3, control_dim=1, dynamics=dynamics,
        control_lo=(0.0,), control_hi=(1.0,),
        final_cost=final_cost,
        state_constraint=lambda x: (x[..., 1] - P.v_max)[..., None], n_state_constraints=1,
        final_constraint=lambda x: (P.m_star - x[..., 2])[..., None], n_final_constraints=1,
        horizon=0.2, free_time=True, nominal_horizon=0.2,
        lipschitz=LipschitzBundle(L_fx=P.C_D * 0.12 * 2 * P.beta, L_fu=P.T_max * P.b, L_phi=1.0, L_g=1.0,
                                  L_gf=1.0, c_f=P.T_max * P.b + P.C_D),
        name="goddard", initial_state=(1.0, 0.0, 1.0),
        domain_lo=(1.0, 0.0, 0.0), domain_hi=(1.2, 0.12, 1.0),
        state_bounds=((1.0, 0.0, P.m_star), (math.inf, P.v_max, 1.0)),
        drift_field=drift, control_field=control_field,
        config={"problem": "goddard", "variant": None, "params": asdict(P)},
        metadata={"params": P},
    )


# ----------------------------------------------------------------------------
# Linear-quadratic

@dataclass(frozen=True)
class LQSpec:
    A: Any
    B: Any
    Q: Any
    R: Any
    x_hat: Any
    u_hat: Any
    x0: Any
    x1: Any
    T: float = 1.0
    control_bound: float = 100.0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        B = B.reshape(A.shape[0], -1)
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        for name, M in (("Q", Q), ("R", R)):
            if not np.allclose(M, M.T):
                raise ConfigError(f"{name} must be symmetric")
            if np.min(np.linalg.eigvalsh(M)) <= 0:
                raise ConfigError(f"{name} must be positive definite")
        d, r = B.shape
        if A.shape != (d, d) or Q.shape != (d, d) or R.shape != (r, r):
            raise ConfigError("inconsistent LQ matrix shapes")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        for name, n in (("x_hat", d), ("u_hat", r), ("x0", d), ("x1", d)):
            vec = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if vec.size != n:
                raise ConfigError(f"{name} must have size {n}")
            object.__setattr__(self, name, vec)

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def control_dim(self) -> int:
        return self.B.shape[1]

    def to_params(self) -> dict:
        return {
            "A": self.A.tolist(), "B": self.B.tolist(), "Q": self.Q.tolist(), "R": self.R.tolist(),
            "x_hat": self.x_hat.tolist(), "u_hat": self.u_hat.tolist(),
            "x0": self.x0.tolist(), "x1": self.x1.tolist(), "T": self.T,
            "control_bound": self.control_bound,
        }


def kalman_controllable(A, B) -> bool:
    A = np.atleast_2d(A)
    B = np.asarray(B).reshape(A.shape[0], -1)
    blocks = [B]
    for _ in range(A.shape[0] - 1):
        blocks.append(A @ blocks[-1])
    return int(np.linalg.matrix_rank(np.hstack(blocks))) == A.shape[0]


@dataclass(frozen=True)
class LQProblem:
    problem: ControlProblem
    matrices: LQSpec
    controllable: bool


def make_lq(spec: LQSpec | dict) -> LQProblem:
    """Fixed-horizon LQ tracking problem with both endpoints prescribed.

    The endpoint ``x(T) = x1`` is stored as the paired inequalities
    ``x - x1 <= 0`` and ``x1 - x <= 0``.
    """
    if isinstance(spec, dict):
        known = {f.name for f in fields(LQSpec)}
        unknown = set(spec) - known
        if unknown:
            raise ConfigError(f"unknown LQ parameters {sorted(unknown)}")
        spec = LQSpec(**spec)
    S = spec
    controllable = kalman_controllable(S.A, S.B)
    if not controllable:
        warnings.warn("(A, B) fails the Kalman rank condition; turnpike guarantees do not apply")
    d, r = S.state_dim, S.control_dim

    def dynamics(t, x, u):
        xp = array_module(x, u)
        return xp.einsum("ij,...j->...i", S.A, x) + xp.einsum("ij,...j->...i", S.B, u)

    def running_cost(t, x, u):
        xp = array_module(x, u)
        dx = x - S.x_hat
        du = u - S.u_hat
        return xp.einsum("...i,ij,...j->...", dx, S.Q, dx) + xp.einsum("...i,ij,...j->...", du, S.R, du)

    def final_constraint(x):
        xp = array_module(x)
        diff = x - S.x1
        return xp.concatenate([diff, -diff], axis=-1)

    lqb = float(np.linalg.norm(S.A, 2))
    problem = ControlProblem(
        state_dim=d, control_dim=r, dynamics=dynamics,
        control_lo=(-S.control_bound,) * r, control_hi=(S.control_bound,) * r,
        running_cost=running_cost, final_constraint=final_constraint, n_final_constraints=2 * d,
        horizon=float(S.T), free_time=False, nominal_horizon=float(S.T),
        lipschitz=LipschitzBundle(L_fx=lqb, L_fu=float(np.linalg.norm(S.B, 2)), c_f=lqb),
        name="lq", initial_state=tuple(S.x0), target_point=tuple(S.x1),
        config={"problem": "lq", "variant": None, "params": S.to_params()},
    )
    return LQProblem(problem, S, controllable)


# ----------------------------------------------------------------------------
# JSON configuration

_TOP_KEYS = {"problem", "variant", "params"}


def problem_from_config(config: dict | str | Path) -> ControlProblem:
    """Build a problem from ``{"problem": ..., "variant": ..., "params": {...}}``.

    Accepts a dict, a JSON string, or a path to a JSON file. Unknown keys raise
    :class:`ConfigError`.
    """
    if isinstance(config, Path) or (isinstance(config, str) and not config.lstrip().startswith("{")):
        config = json.loads(Path(config).read_text())
    elif isinstance(config, str):
        config = json.loads(config)
    if not isinstance(config, dict):
        raise ConfigError("problem config must be a JSON object")
    unknown = set(config) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    if "problem" not in config:
        raise ConfigError("config needs a 'problem' entry")
    kind = config["problem"]
    params = config.get("params")
    params = {} if params is None else params
    if not isinstance(params, dict):
        raise ConfigError("'params' must be an object")
    if kind == "zermelo":
        return make_zermelo(config.get("variant") or "mintime_point_target", params)
    if kind == "goddard":
        if config.get("variant") not in (None, "default"):
            raise ConfigError("Goddard has no variants")
        return make_goddard(params)
    if kind == "lq":
        if config.get("variant") not in (None, "default"):
            raise ConfigError("LQ has no variants")
        return make_lq(params).problem
    raise ConfigError(f"unknown problem {kind!r}")


def problem_to_config(problem: ControlProblem) -> dict:
    if problem.config is None:
        raise ConfigError("problem was not built from a configuration")
    return json.loads(json.dumps(problem.config))


def config_json(problem: ControlProblem) -> str:
    return json.dumps(problem_to_config(problem), sort_keys=True, indent=2)
