"""``octoc`` command line: solver runs, warm-start chaining and the reproduction benchmarks.

Exit codes: 0 on success, 2 when a solver fails to converge (artifacts are
still written), 1 on usage or configuration errors.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_NONCONVERGED = 0, 1, 2


class UsageError(Exception):
    pass


class SolverFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


def _configure_threads(threads):
    n = os.environ.get("OCTOC_THREADS") or (str(threads) if threads else None)
    if n is None:
        return None
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = n
    if int(n) == 1:
        os.environ["XLA_FLAGS"] = (os.environ.get("XLA_FLAGS", "") + " --xla_cpu_multi_thread_eigen=false").strip()
    return int(n)


def _load_problem(spec: str):
    from .problems import problem_from_config

    if spec in ("goddard", "zermelo", "lq"):
        return problem_from_config({"problem": spec})
    return problem_from_config(spec if spec.lstrip().startswith("{") else Path(spec))


def _dump(obj, path) -> None:
    Path(path).write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")


def _plain(obj):
    import numpy as np

    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_manifest(out, args, problem, started, artifacts, extra=None) -> None:
    config = getattr(problem, "config", None) if problem is not None else None
    digest = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest() if config else None
    options = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": args.command, "problem_config": config, "config_sha256": digest, "options": options,
        "determinism": "no random seeds are used; identical inputs reproduce artifacts exactly",
        "wall_time_s": time.perf_counter() - started, "artifacts": [str(a) for a in artifacts],
    }
    if extra:
        manifest.update(extra)
    _dump(manifest, f"{out}.manifest.json")


def _read_manifest(path) -> dict:
    p = Path(f"{path}.manifest.json")
    return json.loads(p.read_text()) if p.exists() else {}


def _parse_grid(text: str, ndim: int):
    parts = [int(v) for v in text.lower().split("x")]
    if len(parts) == 1:
        parts = parts * ndim
    if len(parts) != ndim:
        raise UsageError(f"grid {text!r} has {len(parts)} axes, expected {ndim}")
    return tuple(parts)


# ----------------------------------------------------------------------------
# Subcommands

def cmd_direct(args) -> int:
    from .core import write_trajectory_csv
    from .direct import classify_arcs, shooting_guess_from_direct, solve_direct

    started = time.perf_counter()
    problem = _load_problem(args.problem)
    options = json.loads(args.options) if args.options else None
    sol = solve_direct(problem, args.N, args.scheme, options)
    payload = sol.to_json()
    if problem.control_dim == 1:
        payload["arcs"] = [[a.kind, a.t_start, a.t_end] for a in classify_arcs(problem, sol.trajectory)]
    if problem.name == "goddard":
        p0, sw, tf = shooting_guess_from_direct(sol)
        payload["shooting_guess"] = {"p0": p0, "switch_times": sw, "tf": tf}
    _dump(payload, args.out)
    artifacts = [args.out]
    if args.csv:
        write_trajectory_csv(sol.trajectory, args.csv)
        artifacts.append(args.csv)
    if args.svg:
        from .plotting import export_plot

        export_plot(args.svg, sol.trajectory, target=problem.target_point)
        artifacts.append(args.svg)
    _write_manifest(args.out, args, problem, started, artifacts)
    print(f"status={sol.status} objective={sol.objective:.10g} feasibility={sol.feasibility:.3g}")
    ok = sol.status in ("converged", "stalled") and sol.feasibility <= 1e-6
    return EXIT_OK if ok else EXIT_NONCONVERGED


def _goddard_guess_from_table(table_path):
    import numpy as np

    from .benchmarks import goddard_switches
    from .hjb import build_auxiliary, load_table, value_from_w
    from .problems import make_goddard
    from .reconstruct import costate_from_w, reconstruct_minmax

    meta = _read_manifest(table_path)
    offset = float(meta.get("offset", 2.0))
    z_bounds = tuple(meta.get("z_bounds", (0.0, 1.0)))
    table = load_table(table_path)
    problem = make_goddard()
    aux = build_auxiliary(problem, z_bounds, offset)
    x0 = np.asarray(problem.initial_state, float)
    value = value_from_w(table, x0, 0.0, offset)
    h = float(meta.get("reconstruction_h", 1e-3))
    rec = reconstruct_minmax(table, aux, x0, h, z0=value, horizon=float(table.times.max()))
    t1, t2, t3, tf = goddard_switches(problem, rec.trajectory, table.grid.dx[1])
    cost = costate_from_w(table, 0.0, x0, (value or 0.0) + offset)
    return cost.renormalized, [t1, t2, t3], tf


def cmd_shoot(args) -> int:
    import numpy as np

    started = time.perf_counter()
    problem = _load_problem(args.problem)
    kind, _, source = args.init.partition(":")
    if kind not in ("from-direct", "from-hjb", "manual") or not source:
        raise UsageError("--init must be from-direct:FILE, from-hjb:FILE or manual:VALUES")
    if problem.name == "goddard":
        from .shooting import shoot_goddard

        if kind == "from-direct":
            guess = json.loads(Path(source).read_text()).get("shooting_guess")
            if guess is None:
                raise UsageError(f"{source} holds no Goddard shooting guess")
            p0, sw, tf = guess["p0"], guess["switch_times"], guess["tf"]
        elif kind == "from-hjb":
            p0, sw, tf = _goddard_guess_from_table(source)
        else:
            vals = _floats(source)
            if len(vals) != 7:
                raise UsageError("manual Goddard init needs p_r,p_v,p_m,t1,t2,t3,tf")
            p0, sw, tf = vals[:3], vals[3:6], vals[6]
        if len(sw) != 3:
            raise UsageError(f"expected three switching times, got {len(sw)}")
        res = shoot_goddard(p0, *sw, tf)
        payload = {"p0": res.p0, "switch_times": res.switch_times, "tf": res.tf,
                   "final_altitude": res.final_altitude, "residual": res.residual}
    elif problem.name.startswith("zermelo-mintime"):
        from .hjb import SENTINEL, load_table
        from .reconstruct import estimate_costate
        from .shooting import shoot_zermelo_penalized

        if kind == "from-hjb":
            table = load_table(source)
            x0 = np.asarray(problem.initial_state, float)
            tf = float(table.value(0.0, x0))
            if tf >= SENTINEL:
                raise SolverFailure(f"the start {x0.tolist()} was not reached; increase the horizon of the table")
            p0 = estimate_costate(table, 0.0, x0).p
        elif kind == "manual":
            vals = _floats(source)
            if len(vals) != 3:
                raise UsageError("manual Zermelo init needs p1,p2,tf")
            p0, tf = vals[:2], vals[2]
        else:
            raise UsageError("Zermelo shooting accepts from-hjb or manual initialisation")
        res = shoot_zermelo_penalized(p0, tf, alpha=args.alpha, obstacle=True)
        payload = {"p0": res.p0, "tf": res.tf, "residual": res.residual}
    else:
        raise UsageError(f"no shooting formulation for problem {problem.name!r}")
    payload.update(status=res.newton.status, iterations=res.newton.iterations,
                   residual_norm=res.newton.residual_norm)
    _dump(payload, args.out)
    artifacts = [args.out]
    if args.csv:
        from .core import write_trajectory_csv

        write_trajectory_csv(res.extremal.trajectory(), args.csv)
        artifacts.append(args.csv)
    _write_manifest(args.out, args, problem, started, artifacts)
    print(f"status={res.newton.status} iterations={res.newton.iterations} "
          f"residual={res.newton.residual_norm:.3g}")
    return EXIT_OK if res.newton.converged else EXIT_NONCONVERGED


def cmd_hjb(args) -> int:
    from .hjb import (Grid, NumericalHamiltonianSpec, build_auxiliary, save_table, solve_auxiliary,
                      solve_levelset_mintime, solve_terminal_value)

    started = time.perf_counter()
    problem = _load_problem(args.problem)
    spec = NumericalHamiltonianSpec(kind="lf" if args.method == "sl" else args.method, n_controls=args.n_controls)
    extra = {"mode": args.mode}
    if args.mode == "levelset":
        grid = Grid(problem.domain_lo, problem.domain_hi, _parse_grid(args.grid, problem.state_dim))
        res = solve_levelset_mintime(problem, grid, args.horizon or 10.0, args.method, spec, args.dt)
        table = res.min_time
    elif args.mode == "bolza":
        grid = Grid(problem.domain_lo, problem.domain_hi, _parse_grid(args.grid, problem.state_dim))
        table = solve_terminal_value(problem, grid, args.method, spec, args.dt, args.store, horizon=args.horizon)
    else:
        z_bounds = tuple(_floats(args.z_bounds))
        aux = build_auxiliary(problem, z_bounds, args.offset)
        grid = aux.grid(_parse_grid(args.grid, problem.state_dim + 1))
        table = solve_auxiliary(aux, grid, args.method, spec, args.dt, args.horizon, args.store)
        extra.update(offset=args.offset, z_bounds=z_bounds)
    save_table(table, args.out)
    artifacts = [args.out]
    if args.svg and grid.ndim == 2:
        import numpy as np

        from .plotting import export_plot

        V = table.slices[0]
        levels = np.linspace(np.min(V[V < 1e5]), np.max(V[V < 1e5]), 10)[1:-1] if np.any(V < 1e5) else []
        export_plot(args.svg, grid=grid, values=V, levels=levels, target=problem.target_point)
        artifacts.append(args.svg)
    _write_manifest(args.out, args, problem, started, artifacts, extra)
    print(f"wrote {args.out} ({len(table.times)} slices, grid {grid.counts})")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    import numpy as np

    from .core import write_trajectory_csv
    from .hjb import build_auxiliary, load_table
    from .reconstruct import reconstruct_bolza, reconstruct_minmax, reconstruct_mintime

    started = time.perf_counter()
    problem = _load_problem(args.problem)
    table = load_table(args.table)
    meta = _read_manifest(args.table)
    mode = args.mode or meta.get("mode", "bolza")
    x0 = np.asarray(_floats(args.x0) if args.x0 else problem.initial_state, float)
    if mode == "levelset":
        rec = reconstruct_mintime(table, problem, x0, args.h, args.scheme, n_controls=args.n_controls)
    elif mode == "auxiliary":
        aux = build_auxiliary(problem, tuple(meta.get("z_bounds", (0.0, 1.0))), float(meta.get("offset", 0.0)))
        rec = reconstruct_minmax(table, aux, x0, args.h, scheme=args.scheme, n_controls=args.n_controls,
                                 horizon=float(table.times.max()))
    else:
        rec = reconstruct_bolza(table, problem, x0, args.h, args.scheme, horizon=float(table.times.max()),
                                n_controls=args.n_controls)
    write_trajectory_csv(rec.trajectory, args.out)
    artifacts = [args.out]
    if args.svg:
        from .plotting import export_plot

        export_plot(args.svg, rec.trajectory, target=problem.target_point)
        artifacts.append(args.svg)
    _write_manifest(args.out, args, problem, started, artifacts, {"diagnostics": rec.diagnostics()})
    print(f"final_time={rec.final_time:.6g} realized_cost={rec.realized_cost:.10g} truncated={rec.truncated}")
    return EXIT_NONCONVERGED if rec.infeasible or rec.reached is False else EXIT_OK


def cmd_plan(args) -> int:
    import numpy as np

    from .planning import discretize, optimistic_plan, plan_value

    started = time.perf_counter()
    problem = _load_problem(args.problem)
    dp = discretize(problem, args.N, args.scheme)
    x0 = np.asarray(_floats(args.x0), float)
    res = optimistic_plan(dp, x0, args.z, args.imax, args.M)
    payload = {"controls": res.best_u, "states": res.states, "J_best": res.J_best, "lower_bound": res.lower_bound,
               "tree": res.stats(), "middle_child_ok": res.middle_child_ok, "lipschitz_estimated": dp.estimated}
    if args.value_tol:
        val = plan_value(dp, x0, args.imax, args.value_tol, M=args.M)
        payload["value_interval"] = [val.lo, val.hi]
        payload["value_inconclusive"] = val.inconclusive
    _dump(payload, args.out)
    _write_manifest(args.out, args, problem, started, [args.out])
    print(f"J_best={res.J_best:.10g} lower_bound={res.lower_bound:.10g} nodes={len(res.tree.nodes)}")
    return EXIT_OK if res.J_best <= 0 else EXIT_NONCONVERGED


def cmd_bench(args) -> int:
    from . import benchmarks as B

    started = time.perf_counter()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checks = []
    if args.name == "goddard-table1":
        report = B.goddard_table1(hjb_counts=40 if args.large else 20)
        text = B.format_table1(report)
        (out / "goddard_table1.txt").write_text(text + "\n")
        _dump(report["rows"], out / "goddard_table1.json")
        checks = report["checks"]
        print(text)
    elif args.name == "zermelo-levelset":
        run = B.zermelo_levelset((1000, 200) if args.large else (500, 100))
        shot = B.zermelo_shoot_from_levelset(run)
        checks = [
            B.Check("minimum time at the start", run.min_time is not None and
                    abs(run.min_time - B.ZERMELO_MIN_TIME) <= 0.05, f"{run.min_time} ({run.runtime:.1f} s)"),
            B.Check("costate seed", bool(max(abs(run.costate - B.ZERMELO_COSTATE_SEED)) <= 0.02),
                    f"{run.costate.tolist()}"),
            B.Check("penalised shooting", shot.newton.converged and 4.96 <= shot.tf <= 5.0,
                    f"p0={shot.p0.tolist()} tf={shot.tf:.6g} ({shot.newton.iterations} it)"),
        ]
        _dump({"min_time": run.min_time, "costate": run.costate, "shooting_p0": shot.p0, "shooting_tf": shot.tf},
              out / "zermelo_levelset.json")
    elif args.name == "planning-test5":
        runs = B.planning_test5()
        checks = [B.Check(f"planning from {r.start}", r.feasible,
                          f"max g={r.max_g:.4g} g_f={r.g_final:.4g} J={r.result.J_best:.4g} ({r.runtime:.1f} s)")
                  for r in runs]
        _dump([{"start": r.start, "controls": r.result.best_u, "states": r.result.states,
                "J_best": r.result.J_best, "lower_bound": r.result.lower_bound} for r in runs],
              out / "planning_test5.json")
    for c in checks:
        print(c.line())
    _write_manifest(out / args.name, args, None, started, sorted(str(p) for p in out.iterdir()),
                    {"checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in checks]})
    return EXIT_OK if all(c.passed for c in checks) else EXIT_NONCONVERGED


# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="octoc", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None, help="worker threads (OCTOC_THREADS overrides)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("direct", help="direct transcription and NLP solve")
    p.add_argument("--problem", required=True)
    p.add_argument("--N", type=int, default=100)
    p.add_argument("--scheme", default="crank_nicolson", choices=["euler", "crank_nicolson", "cn"])
    p.add_argument("--options", help="NLP options as a JSON object")
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.add_argument("--svg")
    p.set_defaults(func=cmd_direct)

    p = sub.add_parser("shoot", help="indirect shooting")
    p.add_argument("--problem", required=True)
    p.add_argument("--init", required=True, help="from-direct:FILE | from-hjb:FILE | manual:VALUES")
    p.add_argument("--alpha", type=float, default=1e-3)
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_shoot)

    p = sub.add_parser("hjb", help="grid value-function solve")
    p.add_argument("--problem", required=True)
    p.add_argument("--mode", default="levelset", choices=["levelset", "bolza", "auxiliary"])
    p.add_argument("--grid", required=True, help="nodes per axis, e.g. 500x100 or 20")
    p.add_argument("--method", default="lax_friedrichs", choices=["lax_friedrichs", "lf", "upwind", "sl"])
    p.add_argument("--dt", type=float)
    p.add_argument("--horizon", type=float)
    p.add_argument("--n-controls", type=int, default=64)
    p.add_argument("--offset", type=float, default=0.0)
    p.add_argument("--z-bounds", default="0,1")
    p.add_argument("--store", default="all_slices", choices=["all_slices", "last_two"])
    p.add_argument("--out", required=True)
    p.add_argument("--svg")
    p.set_defaults(func=cmd_hjb)

    p = sub.add_parser("reconstruct", help="feedback reconstruction from a value table")
    p.add_argument("--problem", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--mode", choices=["levelset", "bolza", "auxiliary"])
    p.add_argument("--x0")
    p.add_argument("--h", type=float, default=0.01)
    p.add_argument("--scheme", default="heun", choices=["euler", "heun"])
    p.add_argument("--n-controls", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--svg")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("plan", help="optimistic planning")
    p.add_argument("--problem", required=True)
    p.add_argument("--N", type=int, default=40)
    p.add_argument("--M", type=int, default=3)
    p.add_argument("--imax", type=int, default=3200)
    p.add_argument("--x0", required=True)
    p.add_argument("--z", type=float, default=0.0)
    p.add_argument("--scheme", default="euler", choices=["euler", "heun"])
    p.add_argument("--value-tol", type=float, help="also bracket V(x0) by bisection to this width")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("bench", help="reproduction benchmarks")
    p.add_argument("name", choices=["goddard-table1", "zermelo-levelset", "planning-test5"])
    p.add_argument("--large", action="store_true", help="finer grids (Goddard Nx=40, long run)")
    p.add_argument("--out", default="bench-out")
    p.set_defaults(func=cmd_bench)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"octoc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    _configure_threads(args.threads)
    from .problems import ConfigError

    from .core import DivergedError, StepSizeError
    from .shooting import ResidualFailure

    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"octoc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverFailure, ResidualFailure, DivergedError, StepSizeError, ArithmeticError) as exc:
        print(f"octoc: solver failure: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
