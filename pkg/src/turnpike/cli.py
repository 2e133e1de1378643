"""Command-line front end: ``turnpike static|solve|analyze|sweep``.

Exit codes: 0 success, 2 input error, 3 no extremal, 4 solver failure,
5 sweep quality failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from typing import Sequence

import numpy as np

from . import problems
from .analysis import AnalysisError, analyze, sweep
from .direct_solver import solve_direct
from .lq_core import LqBvp, LqError, extremal_residual
from .ocp_model import (
    ControlProblem,
    FixedFixed,
    FixedFree,
    ModelError,
    StaticExtremal,
    check_assumptions,
    linearize,
    static_multistart,
)
from .bvp_shooting import ShootingConfig, ShootingError, shoot_classic, shoot_midpoint
from .trajectory import Trajectory, write_atomic

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NO_EXTREMAL = 3
EXIT_SOLVER = 4
EXIT_SWEEP = 5
WORKERS_ENV = "TURNPIKE_WORKERS"
TIE_TOL = 1e-6
UNRESOLVED_LIMIT = 0.05


class InputError(Exception):
    pass


def default_workers() -> int | None:
    raw = os.environ.get(WORKERS_ENV)
    if not raw:
        return None
    try:
        return max(1, int(raw))
    except ValueError:
        raise InputError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _sanitize(obj):
    """Replace non-finite floats with null so the output is strict JSON."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    return obj


def dump_json(data: dict) -> str:
    data = json.loads(json.dumps(data, default=_json_default))
    return json.dumps(_sanitize(data), indent=2, sort_keys=True, allow_nan=False) + "\n"


def emit(text: str, path: str | None) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        write_atomic(path, text)


def _vector(text: str | None, n: int, name: str) -> np.ndarray | None:
    if text is None:
        return None
    try:
        v = np.array([float(s) for s in text.split(",")], dtype=float)
    except ValueError:
        raise InputError(f"{name} must be a comma-separated list of numbers") from None
    if v.size != n:
        raise InputError(f"{name} needs {n} entries")
    return v


def grid(text: str) -> list[float]:
    """``a:b:step`` (inclusive) or a comma-separated list."""
    try:
        if ":" in text:
            a, b, step = (float(s) for s in text.split(":"))
            if step <= 0 or b < a:
                raise ValueError
            count = int(math.floor((b - a) / step + 1e-9)) + 1
            return [round(a + k * step, 12) for k in range(count)]
        return [float(s) for s in text.split(",")]
    except ValueError:
        raise InputError(f"bad grid {text!r}: use a:b:step or a comma-separated list") from None


def load_problem(name: str) -> ControlProblem:
    try:
        return problems.get(name)
    except problems.ProblemFileError as exc:
        raise InputError(str(exc)) from None
    except OSError as exc:
        raise InputError(str(exc)) from None


def _with_boundary(p: ControlProblem, x0, x1, free_end: bool) -> ControlProblem:
    b = p.boundary
    if x0 is None and x1 is None and not free_end:
        return p
    start = x0 if x0 is not None else getattr(b, "x0", None)
    if start is None:
        raise InputError("--x0 is required for this problem")
    if free_end:
        return p.with_boundary(FixedFree(start))
    end = x1 if x1 is not None else getattr(b, "x1", None)
    if end is None:
        raise InputError("--x1 is required for this problem")
    return p.with_boundary(FixedFixed(start, end))


# ---------------------------------------------------------------------------
# static


def static_box(p: ControlProblem) -> tuple[np.ndarray, np.ndarray]:
    box = p.options.get("static_box")
    if box is None:
        return np.full(p.n, -3.0), np.full(p.n, 3.0)
    return np.asarray(box[0], dtype=float), np.asarray(box[1], dtype=float)


def static_report(p: ControlProblem, starts: int, seed: int, workers: int | None) -> dict:
    found = static_multistart(p, static_box(p), starts, seed, workers)
    entries = []
    best = found[0].f0_value if found else None
    for e in found:
        item = e.to_dict()
        try:
            d = linearize(p, e)
            item["assumptions"] = check_assumptions(d, p, e.x).to_dict()
        except ModelError as exc:
            item["assumptions"] = None
            item["linearization_error"] = str(exc)
        item["global_candidate"] = bool(abs(e.f0_value - best) <= TIE_TOL * max(1.0, abs(best)))
        entries.append(item)
    return {
        "problem": p.name,
        "starts": starts,
        "seed": seed,
        "box": [b.tolist() for b in static_box(p)],
        "extremals": entries,
        "global_candidates": sum(1 for it in entries if it["global_candidate"]),
    }


def cmd_static(args) -> int:
    p = load_problem(args.problem)
    report = static_report(p, args.starts, args.seed, args.workers)
    emit(dump_json(report), args.out)
    return EXIT_OK if report["extremals"] else EXIT_NO_EXTREMAL


def _turnpike(p: ControlProblem, args) -> StaticExtremal:
    if args.static:
        try:
            with open(args.static) as fh:
                entries = json.load(fh)["extremals"]
        except (OSError, ValueError, KeyError) as exc:
            raise InputError(f"bad static report {args.static}: {exc}") from None
    else:
        entries = static_report(p, args.starts, args.seed, args.workers)["extremals"]
    if not entries:
        raise InputError("no static extremal available for the turnpike")
    if not 0 <= args.turnpike < len(entries):
        raise InputError(f"--turnpike must be in [0, {len(entries) - 1}]")
    return StaticExtremal.from_dict(entries[args.turnpike])


# ---------------------------------------------------------------------------
# solve


def cmd_solve(args) -> int:
    p = load_problem(args.problem)
    x0 = _vector(args.x0, p.n, "--x0")
    x1 = _vector(args.x1, p.n, "--x1")
    p = _with_boundary(p, x0, x1, args.free_end)
    T = args.T if args.T is not None else p.options.get("T")
    if T is None or T <= 0:
        raise InputError("--T must be given and positive")
    traj: Trajectory | None = None
    report: dict = {"problem": p.name, "method": args.method, "T": T}
    if args.method == "lq":
        if p.lq is None:
            raise InputError("method lq needs a problem with an 'lq' block")
        if not isinstance(p.boundary, FixedFixed):
            raise InputError("method lq needs fixed initial and final states")
        try:
            bvp = LqBvp(p.lq, p.boundary.x0, p.boundary.x1, T)
        except LqError as exc:
            report.update(converged=False, message=str(exc))
            emit(dump_json(report), args.report)
            return EXIT_SOLVER
        traj = bvp.sample(args.samples)
        residual = extremal_residual(bvp, traj.t[1:-1])
        report.update(converged=True, cost=traj.cost, extremal_residual=residual, nu=bvp.split.nu)
    elif args.method == "shoot-classic":
        e = _turnpike(p, args) if args.guess is None else None
        guess = _vector(args.guess, p.n, "--guess") if args.guess is not None else e.lam
        cfg = ShootingConfig(variant="classic", steps_per_unit=args.steps)
        try:
            res = shoot_classic(p, T, guess, cfg, turnpike=e)
        except ShootingError as exc:
            report.update(converged=False, message=str(exc))
            emit(dump_json(report), args.report)
            return EXIT_SOLVER
        report.update(res.report("classic"))
        traj = res.trajectory
    elif args.method == "shoot-midpoint":
        e = _turnpike(p, args)
        cfg = ShootingConfig(variant="midpoint", steps_per_unit=args.steps)
        try:
            res = shoot_midpoint(p, T, e, cfg)
        except ShootingError as exc:
            report.update(converged=False, message=str(exc))
            emit(dump_json(report), args.report)
            return EXIT_SOLVER
        report.update(res.report("midpoint"))
        traj = res.trajectory
    else:
        e = None if args.init == "circle" else _turnpike(p, args)
        res, traj = solve_direct(p, T, e, N=args.N, init=args.init, radius=args.radius)
        report.update(
            converged=res.converged,
            cost=res.objective,
            max_violation=res.max_violation,
            stationarity=res.stationarity,
            outer_iterations=res.outer_iterations,
            inner_iterations=res.inner_iterations,
            N=traj.t.size - 1,
            init=args.init,
            message=res.message,
        )
    if traj is not None and args.out:
        traj.to_csv(args.out)
    emit(dump_json(report), args.report)
    return EXIT_OK if report.get("converged") else EXIT_SOLVER


# ---------------------------------------------------------------------------
# analyze


def cmd_analyze(args) -> int:
    try:
        traj = Trajectory.from_csv(args.trajectory)
    except (OSError, ValueError, IndexError) as exc:
        raise InputError(f"bad trajectory {args.trajectory}: {exc}") from None
    try:
        with open(args.static) as fh:
            entries = json.load(fh)["extremals"]
        e = StaticExtremal.from_dict(entries[args.turnpike])
    except (OSError, ValueError, KeyError, IndexError, TypeError) as exc:
        raise InputError(f"bad static report {args.static}: {exc}") from None
    p = load_problem(args.problem) if args.problem else None
    if traj.n != e.x.size or traj.m != e.u.size:
        raise InputError("trajectory and static report dimensions differ")
    eps = [float(v) for v in args.eps.split(",")] if args.eps else [0.1]
    if any(v <= 0 for v in eps):
        raise InputError("--eps values must be positive")
    try:
        rep = analyze(traj, e, eps, p)
    except AnalysisError as exc:
        raise InputError(str(exc)) from None
    emit(dump_json(rep.to_dict()), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep


def cmd_sweep(args) -> int:
    p = load_problem(args.problem)
    if p.n != 1:
        raise InputError("grid sweeps are defined for scalar states")
    T = args.T if args.T is not None else p.options.get("T")
    if T is None or T <= 0:
        raise InputError("--T must be given and positive")
    x0s = grid(args.x0_grid)
    x1s = grid(args.x1_grid)
    found = static_multistart(p, static_box(p), args.starts, args.seed, args.workers)
    if len(found) < 2:
        sys.stderr.write(f"sweep needs at least two extremals, found {len(found)}\n")
        return EXIT_NO_EXTREMAL
    radius = p.options.get("orbit_radius") if args.orbit else None
    res = sweep(p, x0s, x1s, T, found, orbit_radius=radius, N=args.N, workers=args.workers)
    emit(res.to_csv(), args.out)
    if args.report:
        emit(
            dump_json(
                {
                    "problem": p.name,
                    "T": T,
                    "extremals": [e.to_dict() for e in res.extremals],
                    "unresolved_fraction": res.unresolved_fraction,
                    "switch_points": res.switch_points() if len(x1s) == 1 else None,
                }
            ),
            args.report,
        )
    return EXIT_OK if res.unresolved_fraction < UNRESOLVED_LIMIT else EXIT_SWEEP


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="turnpike", description="Turnpike steady states and long-horizon optimal control.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp, seeded=True):
        sp.add_argument("problem", help="registry name (" + ", ".join(problems.REGISTRY) + ") or problem JSON path")
        if seeded:
            sp.add_argument("--starts", type=int, default=64, help="multistart count for the static problem")
            sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--workers", type=int, default=None, help=f"process count (default from ${WORKERS_ENV})")

    sp = sub.add_parser("static", help="static extremals (turnpike candidates) with assumption checks")
    common(sp)
    sp.add_argument("--out", help="report path (default stdout)")
    sp.set_defaults(func=cmd_static)

    sp = sub.add_parser("solve", help="solve the long-horizon boundary-value problem")
    common(sp)
    sp.add_argument("--method", choices=["lq", "shoot-classic", "shoot-midpoint", "direct"], required=True)
    sp.add_argument("--T", type=float, default=None, help="horizon (default from the problem)")
    sp.add_argument("--out", help="trajectory CSV path")
    sp.add_argument("--report", help="JSON report path (default stdout)")
    sp.add_argument("--x0", help="initial state, comma-separated")
    sp.add_argument("--x1", help="final state, comma-separated")
    sp.add_argument("--free-end", action="store_true", help="leave the final state free")
    sp.add_argument("--turnpike", type=int, default=0, help="index into the static report (0 = global candidate)")
    sp.add_argument("--static", help="static report to take the turnpike from")
    sp.add_argument("--init", choices=["turnpike", "circle"], default="turnpike", help="direct-method initialization")
    sp.add_argument("--radius", type=float, default=None, help="orbit radius for --init circle")
    sp.add_argument("--N", type=int, default=None, help="direct-method intervals (default 20 T)")
    sp.add_argument("--steps", type=int, default=100, help="RK4 steps per unit time for shooting")
    sp.add_argument("--samples", type=int, default=1001, help="samples of the LQ closed form")
    sp.add_argument("--guess", help="classic shooting initial costate, comma-separated")
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("analyze", help="turnpike diagnostics of a trajectory")
    sp.add_argument("trajectory", help="trajectory CSV")
    sp.add_argument("static", help="static report JSON")
    sp.add_argument("--turnpike", type=int, default=0)
    sp.add_argument("--eps", default="0.1", help="comma-separated neighborhood radii")
    sp.add_argument("--problem", help="problem for the dissipativity check")
    sp.add_argument("--out", help="report path (default stdout)")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("sweep", help="turnpike labels over a grid of boundary states")
    common(sp)
    sp.add_argument("--x0-grid", required=True, help="a:b:step or comma list")
    sp.add_argument("--x1-grid", required=True, help="a:b:step or comma list")
    sp.add_argument("--T", type=float, default=None)
    sp.add_argument("--N", type=int, default=None)
    sp.add_argument("--orbit", action="store_true", help="add the orbit initialization to every cell")
    sp.add_argument("--out", help="grid CSV path (default stdout)")
    sp.add_argument("--report", help="JSON summary path")
    sp.set_defaults(func=cmd_sweep)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code not in (0, None) else EXIT_OK
    try:
        if getattr(args, "workers", None) is None and hasattr(args, "workers"):
            args.workers = default_workers()
        return args.func(args)
    except InputError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
