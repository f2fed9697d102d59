"""Optimistic planning: branch and bound over nested boxes of control sequences.

Every node is a product of per-step control boxes with its midpoint sequence
as the sample. ``J - sigma`` lower-bounds the auxiliary cost over the box, so
the smallest such value over the leaves is a certified lower bound on the
optimal ``W(x, z)``, and the best sampled ``J`` is a certified upper bound.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import ControlProblem, LipschitzBundle

# Relative slack on J - sigma so floating-point rounding never certifies a wrong sign.
ROUNDOFF = 1e-12


@dataclass
class DiscreteProblem:
    """``y_{k+1} = F_k(y_k, u_k)`` with stage costs ``L_k``; maps act on batches.

    ``step(k, Y, U)`` and ``stage_cost(k, Y, U)`` take ``Y`` of shape (B, d) and
    ``U`` of shape (B, r). Constraint maps return the worst component per row,
    or are ``None`` when absent.
    """

    N: int
    dt: float
    step: Callable
    stage_cost: Callable
    final_cost: Callable
    lo: np.ndarray
    hi: np.ndarray
    L_Fx: float
    L_Fu: float
    L_Lx: float
    L_Lu: float
    L_phi: float = 0.0
    L_g: float = 0.0
    L_gf: float = 0.0
    state_constraint: Optional[Callable] = None
    final_constraint: Optional[Callable] = None
    estimated: bool = False

    def __post_init__(self):
        self.lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        self.hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if self.N < 1:
            raise ValueError("N must be positive")
        if self.L_Fx < 1.0:
            raise ValueError("L_Fx must be at least 1")

    @property
    def control_dim(self) -> int:
        return self.lo.size

    @property
    def diameters(self) -> np.ndarray:
        return self.hi - self.lo

    def rollout(self, x, U):
        """States (B, N+1, d) and accumulated stage cost (B,) for control batches (B, N, r)."""
        U = np.asarray(U, dtype=float)
        Y = np.broadcast_to(np.asarray(x, dtype=float), (U.shape[0], np.size(x))).copy()
        states = [Y]
        cost = np.zeros(U.shape[0])
        for k in range(self.N):
            cost = cost + np.asarray(self.stage_cost(k, Y, U[:, k]), dtype=float)
            Y = np.asarray(self.step(k, Y, U[:, k]), dtype=float)
            states.append(Y)
        return np.stack(states, axis=1), cost


def _worst(fn, n):
    if not n:
        return None
    return lambda Y: np.max(np.asarray(fn(Y)), axis=-1)


def _estimate_lipschitz(problem: ControlProblem, probes: int = 1000, seed: int = 0) -> LipschitzBundle:
    rng = np.random.default_rng(seed)
    d, r = problem.state_dim, problem.control_dim
    if problem.domain_lo is not None:
        lo, hi = np.asarray(problem.domain_lo, float), np.asarray(problem.domain_hi, float)
        X = lo + (hi - lo) * rng.random((probes, d))
    else:
        X = rng.standard_normal((probes, d))
    ulo, uhi = np.asarray(problem.lo, float), np.asarray(problem.hi, float)
    U = ulo + (uhi - ulo) * rng.random((probes, r))
    eps = 1e-6
    dX = rng.standard_normal((probes, d))
    dX *= eps / np.linalg.norm(dX, axis=1, keepdims=True)
    dU = rng.standard_normal((probes, r))
    dU *= eps / np.linalg.norm(dU, axis=1, keepdims=True)

    def ratio(fn, a, b, step):
        fa, fb = np.asarray(fn(a), float), np.asarray(fn(b), float)
        diff = np.abs(fa - fb) if fa.ndim == 1 else np.linalg.norm(fa - fb, axis=-1)
        return float(np.max(diff) / step)

    f = lambda X_, U_: problem.dynamics(0.0, X_, U_)
    ell = lambda X_, U_: problem.running_cost(0.0, X_, U_)
    g = _worst(problem.state_constraint, problem.n_state_constraints)
    gf = _worst(problem.final_constraint, problem.n_final_constraints)
    return LipschitzBundle(
        L_fx=ratio(lambda Z: f(Z, U), X, X + dX, eps), L_fu=ratio(lambda W: f(X, W), U, U + dU, eps),
        L_lx=ratio(lambda Z: ell(Z, U), X, X + dX, eps), L_lu=ratio(lambda W: ell(X, W), U, U + dU, eps),
        L_phi=ratio(problem.final_cost, X, X + dX, eps),
        L_g=0.0 if g is None else ratio(g, X, X + dX, eps),
        L_gf=0.0 if gf is None else ratio(gf, X, X + dX, eps),
    )


def discretize(problem: ControlProblem, N: int, scheme: str = "euler", horizon: Optional[float] = None) -> DiscreteProblem:
    """One integrator step per stage with the matching quadrature for ``L_k``.

    Discrete constants use the amplification ``C = exp(L_fx dt)``; Heun adds the
    cost sensitivity through its predictor to ``L_Lu``.
    """
    if N < 2:
        raise ValueError("N must be at least 2")
    if scheme not in ("euler", "heun"):
        raise ValueError(f"unknown scheme {scheme!r}")
    T = float(problem.horizon if horizon is None else horizon)
    dt = T / N
    f, ell = problem.dynamics, problem.running_cost

    if scheme == "euler":
        def step(k, Y, U):
            return Y + dt * np.asarray(f(k * dt, Y, U))

        def stage(k, Y, U):
            return dt * np.broadcast_to(np.asarray(ell(k * dt, Y, U), float), Y.shape[:1])
    else:
        def step(k, Y, U):
            t = k * dt
            f0 = np.asarray(f(t, Y, U))
            return Y + 0.5 * dt * (f0 + np.asarray(f(t + dt, Y + dt * f0, U)))

        def stage(k, Y, U):
            t = k * dt
            Y1 = step(k, Y, U)
            l0 = np.broadcast_to(np.asarray(ell(t, Y, U), float), Y.shape[:1])
            l1 = np.broadcast_to(np.asarray(ell(t + dt, Y1, U), float), Y.shape[:1])
            return 0.5 * dt * (l0 + l1)

    estimated = problem.lipschitz is None
    lip = _estimate_lipschitz(problem) if estimated else problem.lipschitz
    C = math.exp(lip.L_fx * dt)
    L_Lu = dt * C * lip.L_lu
    if scheme == "heun":
        L_Lu += 0.5 * dt * dt * C * lip.L_lx * lip.L_fu
    return DiscreteProblem(
        N=N, dt=dt, step=step, stage_cost=stage, final_cost=problem.final_cost,
        lo=np.asarray(problem.lo, float), hi=np.asarray(problem.hi, float),
        L_Fx=1.0 + dt * lip.L_fx * C, L_Fu=dt * lip.L_fu * C, L_Lx=dt * lip.L_lx * C, L_Lu=L_Lu,
        L_phi=lip.L_phi, L_g=lip.L_g, L_gf=lip.L_gf,
        state_constraint=_worst(problem.state_constraint, problem.n_state_constraints),
        final_constraint=_worst(problem.final_constraint, problem.n_final_constraints),
        estimated=estimated,
    )


def evaluate_j_batch(dp: DiscreteProblem, x, z: float, U) -> np.ndarray:
    """``max(sum L_k + phi(y_N) - z, max_k g(y_k), g_f(y_N))`` for every row of ``U`` (B, N, r)."""
    states, cost = dp.rollout(x, U)
    final = states[:, -1]
    J = cost + np.asarray(dp.final_cost(final), dtype=float) - z
    if dp.state_constraint is not None:
        B, n1, d = states.shape
        g = np.asarray(dp.state_constraint(states.reshape(B * n1, d)), dtype=float).reshape(B, n1)
        J = np.maximum(J, g.max(axis=1))
    if dp.final_constraint is not None:
        J = np.maximum(J, np.asarray(dp.final_constraint(final), dtype=float))
    if not np.all(np.isfinite(J)):
        raise FloatingPointError("non-finite rollout")
    return J


def evaluate_j(dp: DiscreteProblem, x, z: float, u_seq) -> float:
    U = np.asarray(u_seq, dtype=float).reshape(1, dp.N, dp.control_dim)
    lo, hi = dp.lo - 1e-12, dp.hi + 1e-12
    if np.any(U < lo) or np.any(U > hi):
        raise ValueError("control sequence leaves the control box")
    return float(evaluate_j_batch(dp, x, z, U)[0])


def weights_from_lipschitz(dp: DiscreteProblem):
    """Sensitivity of the cost part (beta) and the constraint part (gamma) to step ``k``."""
    N = dp.N
    beta = np.empty(N)
    gamma = np.empty(N)
    Lc = max(dp.L_g, dp.L_gf)
    for k in range(N):
        tail = sum(dp.L_Lx * dp.L_Fx ** (j - k - 1) for j in range(k + 1, N))
        beta[k] = dp.L_Lu + dp.L_Fu * (tail + dp.L_phi * dp.L_Fx ** (N - 1 - k))
        gamma[k] = dp.L_Fu * Lc * dp.L_Fx ** (N - 1 - k)
    return beta, gamma


def _step_diameters(widths: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(widths**2, axis=-1))


def sigma_and_split(widths: np.ndarray, beta, gamma, M: int = 3):
    """Error radius of a node and the ``(k, axis)`` whose split lowers it most.

    ``widths`` has shape (N, r). Ties resolve to the smallest flat index.
    """
    widths = np.asarray(widths, dtype=float)
    beta, gamma = np.asarray(beta, float), np.asarray(gamma, float)
    d = _step_diameters(widths)
    sb, sg = float(beta @ d), float(gamma @ d)
    sigma = max(sb, sg)
    N, r = widths.shape
    plus = np.empty((N, r))
    for a in range(r):
        w = widths.copy()
        w[:, a] /= M
        delta = _step_diameters(w) - d
        plus[:, a] = np.maximum(sb + beta * delta, sg + gamma * delta)
    flat = int(np.argmin(plus.ravel()))
    return sigma, divmod(flat, r)


def sigma_depth_bound(beta, gamma, D, M: int, p: int) -> float:
    """``N w_max |D| M^{1 - p/N}``: greedy splitting always divides the largest
    term, so at depth ``p`` every term is at most ``w_max |D| M^{1 - p/N}``."""
    beta, gamma = np.asarray(beta, float), np.asarray(gamma, float)
    N = beta.size
    w = max(float(beta.max()), float(gamma.max()))
    return N * w * float(np.linalg.norm(D)) * M ** (1.0 - p / N)


@dataclass
class PlanNode:
    index: int
    parent: Optional[int]
    centers: np.ndarray  # (N, r) sampled midpoint sequence
    splits: np.ndarray  # (N, r) split counts
    J: float
    sigma: float
    split_at: tuple
    leaf: bool = True

    @property
    def depth(self) -> int:
        return int(self.splits.sum())

    @property
    def bound(self) -> float:
        return self.J - self.sigma - ROUNDOFF * (1.0 + abs(self.J) + self.sigma)


@dataclass
class PlanTree:
    nodes: list
    M: int
    expansions: int = 0

    @property
    def leaves(self) -> list:
        return [n for n in self.nodes if n.leaf]


@dataclass
class PlanResult:
    best_u: np.ndarray
    J_best: float
    lower_bound: float
    states: np.ndarray
    tree: PlanTree
    middle_child_ok: bool
    checkpoints: dict = field(default_factory=dict)

    @property
    def gap(self) -> float:
        return self.J_best - self.lower_bound

    def stats(self) -> dict:
        return {"expansions": self.tree.expansions, "nodes": len(self.tree.nodes),
                "max_depth": max(n.depth for n in self.tree.nodes), "M": self.tree.M}


def optimistic_plan(dp: DiscreteProblem, x, z: float, I_max: int, M: int = 3,
                    checkpoints=(), weights=None) -> PlanResult:
    """Expand the leaf with the smallest ``J - sigma`` ``I_max`` times.

    ``lower_bound`` is the largest leaf-minimum of ``J - sigma`` seen so far;
    each of these is a valid lower bound on ``W(x, z)``.
    """
    if M < 3 or M % 2 == 0:
        raise ValueError("M must be odd and at least 3")
    if M <= dp.L_Fx:
        raise ValueError(f"M={M} must exceed L_Fx={dp.L_Fx:.4g}")
    if I_max < 1:
        raise ValueError("I_max must be positive")
    beta, gamma = weights_from_lipschitz(dp) if weights is None else weights
    N, r = dp.N, dp.control_dim
    D = dp.diameters
    mid = (M - 1) // 2

    def make(index, parent, centers, splits, J):
        sigma, k_star = sigma_and_split(D * float(M) ** (-splits), beta, gamma, M)
        return PlanNode(index, parent, centers, splits, J, sigma, k_star)

    centers0 = np.broadcast_to(0.5 * (dp.lo + dp.hi), (N, r)).copy()
    J0 = float(evaluate_j_batch(dp, x, z, centers0[None])[0])
    root = make(0, None, centers0, np.zeros((N, r), dtype=int), J0)
    tree = PlanTree([root], M)
    heap = [(root.bound, 0, 0)]
    best = root
    lower = heap[0][0]
    middle_ok = True
    marks = {}
    wanted = sorted(set(int(c) for c in checkpoints))
    for n in range(1, I_max + 1):
        _, _, idx = heapq.heappop(heap)
        node = tree.nodes[idx]
        node.leaf = False
        k, a = node.split_at
        width = D[a] * float(M) ** (-node.splits[k, a])
        kids_c = np.repeat(node.centers[None], M, axis=0)
        offsets = (np.arange(M) - mid) * (width / M)
        kids_c[:, k, a] = node.centers[k, a] + offsets
        kids_c[mid, k, a] = node.centers[k, a]
        # the middle child repeats the parent's sequence; re-evaluating it checks that claim
        Js = evaluate_j_batch(dp, x, z, kids_c)
        middle_ok &= bool(Js[mid] <= node.J)
        splits = node.splits.copy()
        splits[k, a] += 1
        for j in range(M):
            child = make(len(tree.nodes), idx, kids_c[j], splits, float(Js[j]))
            tree.nodes.append(child)
            heapq.heappush(heap, (child.bound, child.depth, child.index))
            if child.J < best.J:
                best = child
        tree.expansions = n
        lower = max(lower, heap[0][0])
        if n in wanted:
            marks[n] = (best.J, lower)
    states, _ = dp.rollout(x, best.centers[None])
    return PlanResult(best.centers.copy(), best.J, lower, states[0], tree, middle_ok, marks)


@dataclass
class PlanValue:
    lo: float
    hi: float
    inconclusive: bool
    probes: list
    best_u: Optional[np.ndarray] = None

    @property
    def estimate(self) -> float:
        return 0.5 * (self.lo + self.hi)


def plan_value(dp: DiscreteProblem, x, I_max: int, z_tolerance: float, z_bracket=None, M: int = 3,
               max_probes: int = 60) -> PlanValue:
    """Bisection on ``z`` for ``V(x) = inf{z : W(x, z) <= 0}``.

    A probe certifies ``V <= z`` when ``J_best <= 0`` and ``V >= z`` when the
    lower bound is positive. Inconclusive probes raise the lower end and set
    the ``inconclusive`` flag.
    """
    if z_bracket is None:
        root = optimistic_plan(dp, x, 0.0, 1, M)
        spread = root.tree.nodes[0].sigma + 1.0
        c0 = root.tree.nodes[0].J
        z_bracket = (c0 - spread, c0 + spread)
    lo, hi = map(float, z_bracket)
    if hi <= lo:
        raise ValueError("empty z bracket")
    probes, best_u, inconclusive = [], None, False
    while hi - lo > z_tolerance and len(probes) < max_probes:
        z = 0.5 * (lo + hi)
        res = optimistic_plan(dp, x, z, I_max, M)
        if res.J_best <= 0:
            verdict = "feasible"
            hi, best_u = z, res.best_u
        elif res.lower_bound > 0:
            verdict = "infeasible"
            lo = z
        else:
            verdict = "inconclusive"
            lo, inconclusive = z, True
        probes.append((z, verdict, res.J_best, res.lower_bound))
    return PlanValue(lo, hi, inconclusive, probes, best_u)
