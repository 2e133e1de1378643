"""Turnpike diagnostics: distance series, exponential fits, measure statistic,
dissipativity with a linear storage function, value gaps and boundary sweeps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.optimize import least_squares

from .lq_core import LqBvp
from .ocp_model import ControlProblem, FixedFixed, StaticExtremal, parallel_map
from .trajectory import Trajectory

DISTANCE_FLOOR = 1e-12
MIN_FIT_SAMPLES = 10
UNRESOLVED = -1


class AnalysisError(ValueError):
    pass


def _unit_costate(e) -> np.ndarray:
    lam = np.asarray(e.lam, dtype=float)
    lam0 = getattr(e, "lambda0", -1.0)
    return lam * (-1.0 / lam0)


def distance_series(traj: Trajectory, e: StaticExtremal) -> np.ndarray:
    """d(t) = |x - xbar| + |u - ubar| + |lambda - lambdabar| at each sample.

    Both costates are compared in the lambda0 = -1 normalization.
    """
    tr = traj.with_unit_costate()
    if tr.n != np.size(e.x) or tr.m != np.size(e.u):
        raise AnalysisError("trajectory and extremal dimensions differ")
    return (
        np.linalg.norm(tr.x - np.asarray(e.x), axis=1)
        + np.linalg.norm(tr.u - np.asarray(e.u), axis=1)
        + np.linalg.norm(tr.lam - _unit_costate(e), axis=1)
    )


def two_sided_envelope(t: np.ndarray, T: float, nu: float) -> np.ndarray:
    """e^{-nu t} + e^{-nu (T - t)}."""
    t = np.asarray(t, dtype=float)
    return np.exp(-nu * t) + np.exp(-nu * (T - t))


# ---------------------------------------------------------------------------
# exponential fit


@dataclass(frozen=True)
class ExponentialFit:
    C: float
    nu: float
    window: tuple[tuple[float, float], tuple[float, float]]
    residual: float
    samples: int
    one_sided_nu: float

    def to_dict(self) -> dict:
        return {
            "C": self.C,
            "nu": self.nu,
            "window": [list(w) for w in self.window],
            "residual": self.residual,
            "samples": self.samples,
            "one_sided_nu": self.one_sided_nu,
        }


def fit_window(T: float) -> tuple[tuple[float, float], tuple[float, float]]:
    return (0.1 * T, 0.45 * T), (0.55 * T, 0.9 * T)


def fit_exponential(t: np.ndarray, d: np.ndarray, T: float | None = None) -> ExponentialFit:
    """Fit d(t) ~ C (e^{-nu t} + e^{-nu (T - t)}) on the two-sided window.

    A linear least-squares fit of log d against -min(t, T - t) seeds a
    nonlinear refinement of the two-sided model in log space; the
    refinement removes the bias the far boundary layer puts on the linear fit.
    """
    t = np.asarray(t, dtype=float)
    d = np.asarray(d, dtype=float)
    if T is None:
        T = float(t[-1] - t[0])
    if T <= 4:
        raise AnalysisError("horizon must exceed 4 for an exponential fit")
    s = t - t[0]
    (a0, a1), (b0, b1) = fit_window(T)
    mask = (((s >= a0) & (s <= a1)) | ((s >= b0) & (s <= b1))) & (d >= DISTANCE_FLOOR) & np.isfinite(d)
    count = int(mask.sum())
    if count < MIN_FIT_SAMPLES:
        raise AnalysisError(f"only {count} usable samples in the fit window, need {MIN_FIT_SAMPLES}")
    ss, logd = s[mask], np.log(d[mask])
    near = np.minimum(ss, T - ss)
    slope, intercept = np.polyfit(-near, logd, 1)
    nu_lin = float(slope)

    def resid(theta):
        logc, nu = theta
        return logc + np.log(two_sided_envelope(ss, T, nu)) - logd

    theta0 = np.array([intercept, max(nu_lin, 1e-6)])
    sol = least_squares(resid, theta0, bounds=([-np.inf, 0.0], [np.inf, np.inf]), xtol=1e-14, ftol=1e-14, gtol=1e-14)
    logc, nu = sol.x
    rms = float(np.sqrt(np.mean(sol.fun**2)))
    return ExponentialFit(float(np.exp(logc)), float(nu), ((a0, a1), (b0, b1)), rms, count, nu_lin)


def bound_constant(t: np.ndarray, d: np.ndarray, nu: float, T: float | None = None) -> float:
    """Smallest C with d(t) <= C (e^{-nu t} + e^{-nu (T - t)}) on the samples.

    Samples below DISTANCE_FLOOR are roundoff and are ignored.
    """
    t = np.asarray(t, dtype=float)
    d = np.asarray(d, dtype=float)
    if T is None:
        T = float(t[-1] - t[0])
    keep = d >= DISTANCE_FLOOR
    if not keep.any():
        return 0.0
    return float(np.max(d[keep] / two_sided_envelope(t[keep] - t[0], T, nu)))


def bound_violations(t: np.ndarray, d: np.ndarray, C: float, nu: float, T: float | None = None, slack: float = 0.05) -> int:
    """Number of samples above DISTANCE_FLOOR where d exceeds (1 + slack) times the two-sided bound."""
    t = np.asarray(t, dtype=float)
    d = np.asarray(d, dtype=float)
    if T is None:
        T = float(t[-1] - t[0])
    bound = (1.0 + slack) * C * two_sided_envelope(t - t[0], T, nu)
    return int(np.sum((d >= DISTANCE_FLOOR) & (d > bound)))


def decay_slope(horizons: Sequence[float], midpoint_distances: Sequence[float]) -> float:
    """Least-squares slope of log d(T/2) against the half horizon T/2."""
    h = 0.5 * np.asarray(horizons, dtype=float)
    y = np.log(np.asarray(midpoint_distances, dtype=float))
    return float(np.polyfit(h, y, 1)[0])


def midpoint_distance(traj: Trajectory, e: StaticExtremal) -> float:
    """Distance to the turnpike at t = T/2, interpolated between samples."""
    d = distance_series(traj, e)
    return float(np.interp(traj.t[0] + 0.5 * traj.T, traj.t, d))


# ---------------------------------------------------------------------------
# measure-turnpike statistic


def measure_stat(traj: Trajectory, e: StaticExtremal, eps: float) -> float:
    """Trapezoid measure of {t : |(x - xbar, u - ubar)| > eps}."""
    if eps <= 0:
        raise AnalysisError("eps must be positive")
    dev = np.hypot(np.linalg.norm(traj.x - np.asarray(e.x), axis=1), np.linalg.norm(traj.u - np.asarray(e.u), axis=1))
    indicator = (dev > eps).astype(float)
    return float(np.trapezoid(indicator, traj.t))


# ---------------------------------------------------------------------------
# dissipativity


@dataclass(frozen=True)
class DissipativityReport:
    storage: np.ndarray
    supply: np.ndarray
    balance: np.ndarray
    violation: float
    worst_interval: tuple[float, float]

    def to_dict(self) -> dict:
        return {"violation": self.violation, "worst_interval": list(self.worst_interval)}


def dissipativity_check(p: ControlProblem, traj: Trajectory, e: StaticExtremal) -> DissipativityReport:
    """Check S(x(t0)) + int_{t0}^{t1} w >= S(x(t1)) on every sampled subinterval.

    Storage S(x) = <lambdabar, x> (lambda0 = -1), supply w = f0(x, u) - f0(xbar, ubar).
    The balance G(t) = int_0^t w - S(x(t)) + S(x(0)) must be nondecreasing; the
    violation is the largest drop of G, found with a running maximum.
    """
    lam_bar = _unit_costate(e)
    storage = traj.x @ lam_bar
    supply = p.running_cost_series(traj.x, traj.u) - p.running_cost(e.x, e.u)
    integral = cumulative_simpson(supply, x=traj.t, initial=0.0)
    G = integral - storage + storage[0]
    peak = np.maximum.accumulate(G)
    drop = peak - G
    j = int(np.argmax(drop))
    i = int(np.argmax(G[: j + 1]))
    return DissipativityReport(storage, supply, G, float(drop[j]), (float(traj.t[i]), float(traj.t[j])))


# ---------------------------------------------------------------------------
# value expansion


@dataclass(frozen=True)
class ValueGap:
    horizons: list[float]
    values: list[float | None]
    gaps: list[float | None]
    diagnostic: float | None

    def to_dict(self) -> dict:
        return {"horizons": self.horizons, "values": self.values, "gaps": self.gaps, "diagnostic": self.diagnostic}


def best_value(p: ControlProblem, e: StaticExtremal, T: float) -> float | None:
    """V(T): closed form for exact-LQ fixed-endpoint problems, direct transcription otherwise."""
    if p.lq is not None and isinstance(p.boundary, FixedFixed):
        return LqBvp(p.lq, p.boundary.x0, p.boundary.x1, T).cost()
    from .direct_solver import solve_direct

    res, _ = solve_direct(p, T, e)
    return res.objective if res.converged else None


def value_gap(
    p: ControlProblem,
    e: StaticExtremal,
    horizons: Sequence[float],
    value: Callable[[ControlProblem, StaticExtremal, float], float | None] = best_value,
) -> ValueGap:
    """Gaps V(T) - T f0(xbar, ubar); the diagnostic compares T_max with the horizon nearest T_max / 2."""
    hs = [float(T) for T in horizons]
    base = p.running_cost(e.x, e.u)
    values, gaps = [], []
    for T in hs:
        try:
            v = value(p, e, T)
        except Exception:  # noqa: BLE001 - a failed horizon is reported as missing
            v = None
        values.append(v)
        gaps.append(None if v is None else v - T * base)
    diagnostic = None
    known = [(T, g) for T, g in zip(hs, gaps) if g is not None]
    if len(known) >= 2:
        T_max, g_max = max(known)
        T_half, g_half = min(known[:-1] if known[-1][0] == T_max else known, key=lambda k: abs(k[0] - T_max / 2))
        if T_half != T_max:
            diagnostic = abs(g_max - g_half)
    return ValueGap(hs, values, gaps, diagnostic)


# ---------------------------------------------------------------------------
# turnpike report


@dataclass(frozen=True)
class TurnpikeReport:
    t: np.ndarray
    distance: np.ndarray
    fit: ExponentialFit | None
    fit_error: str | None
    measure: dict[float, float]
    dissipativity: DissipativityReport | None

    def to_dict(self) -> dict:
        return {
            "distance": {"t": self.t.tolist(), "d": self.distance.tolist()},
            "fit": None if self.fit is None else self.fit.to_dict(),
            "fit_error": self.fit_error,
            "measure": [{"eps": k, "Lambda": v} for k, v in sorted(self.measure.items())],
            "dissipativity": None if self.dissipativity is None else self.dissipativity.to_dict(),
        }


def analyze(
    traj: Trajectory, e: StaticExtremal, eps: Sequence[float] = (0.1,), p: ControlProblem | None = None
) -> TurnpikeReport:
    """Distance series, exponential fit, measure statistic and (with ``p``) dissipativity."""
    d = distance_series(traj, e)
    fit, err = None, None
    try:
        fit = fit_exponential(traj.t, d, traj.T)
    except AnalysisError as exc:
        err = str(exc)
    measure = {float(v): measure_stat(traj, e, float(v)) for v in eps}
    diss = dissipativity_check(p, traj, e) if p is not None else None
    return TurnpikeReport(traj.t, d, fit, err, measure, diss)


# ---------------------------------------------------------------------------
# boundary sweeps


def canonical_extremals(extremals: Sequence[StaticExtremal]) -> list[StaticExtremal]:
    """Deduplicate by position (1e-6) and order by state lexicographically."""
    out: list[StaticExtremal] = []
    for e in sorted(extremals, key=lambda e: tuple(np.asarray(e.x, dtype=float))):
        if all(np.linalg.norm(np.asarray(e.x) - np.asarray(o.x)) > 1e-6 for o in out):
            out.append(e)
    return out


def nearest_label(x_mid: np.ndarray, extremals: Sequence[StaticExtremal]) -> int:
    """Index of the nearest extremal state; exact ties are unresolved."""
    dist = np.array([np.linalg.norm(np.asarray(x_mid) - np.asarray(e.x)) for e in extremals])
    best = int(np.argmin(dist))
    if np.sum(dist == dist[best]) > 1:
        return UNRESOLVED
    return best


@dataclass(frozen=True)
class SweepCell:
    x0: np.ndarray
    x1: np.ndarray
    label: int
    cost: float
    x_mid: np.ndarray | None
    branch_costs: list[float | None] = field(default_factory=list)


@dataclass(frozen=True)
class SweepResult:
    x0_grid: list
    x1_grid: list
    extremals: list[StaticExtremal]
    cells: list[SweepCell]
    T: float

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.cells]).reshape(len(self.x0_grid), len(self.x1_grid))

    @property
    def costs(self) -> np.ndarray:
        return np.array([c.cost for c in self.cells]).reshape(len(self.x0_grid), len(self.x1_grid))

    @property
    def unresolved_fraction(self) -> float:
        return float(np.mean(self.labels == UNRESOLVED)) if self.cells else 0.0

    def label_name(self, label: int) -> str:
        if label == UNRESOLVED:
            return "unresolved"
        return str(label)

    def to_csv(self) -> str:
        def fmt(v):
            return ";".join(format(float(a), ".17g") for a in np.atleast_1d(v))

        lines = ["x0,x1,label,cost"]
        for c in self.cells:
            cost = "nan" if not math.isfinite(c.cost) else format(c.cost, ".17g")
            lines.append(f"{fmt(c.x0)},{fmt(c.x1)},{self.label_name(c.label)},{cost}")
        return "\n".join(lines) + "\n"

    def switch_points(self, row: int = 0, column: int | None = None) -> list[float]:
        """Midpoints of x0 between consecutive cells with different resolved labels.

        Scans along x0 at a fixed x1 column (default: the first column).
        """
        col = 0 if column is None else column
        labels = self.labels[:, col]
        xs = [float(np.atleast_1d(v)[0]) for v in self.x0_grid]
        out = []
        for k in range(len(xs) - 1):
            a, b = labels[k], labels[k + 1]
            if a != b and a != UNRESOLVED and b != UNRESOLVED:
                out.append(0.5 * (xs[k] + xs[k + 1]))
        return out


def _sweep_cell(args) -> SweepCell:
    from .direct_solver import solve_direct

    p, x0, x1, T, extremals, orbit_radius, N = args
    q = p.with_boundary(FixedFixed(x0, x1))
    best_cost, best_mid = math.inf, None
    branch: list[float | None] = []
    inits: list[tuple[str, StaticExtremal | None]] = [("turnpike", e) for e in extremals]
    if orbit_radius is not None:
        inits.append(("orbit", None))
    for init, e in inits:
        try:
            res, traj = solve_direct(q, T, e, N=N, init=init, radius=orbit_radius)
        except Exception:  # noqa: BLE001 - a failing start only removes one candidate
            branch.append(None)
            continue
        if not res.converged:
            branch.append(None)
            continue
        branch.append(res.objective)
        if res.objective < best_cost:
            best_cost = res.objective
            best_mid = traj.at(traj.t[0] + 0.5 * T)[0]
    label = UNRESOLVED if best_mid is None else nearest_label(best_mid, extremals)
    return SweepCell(np.atleast_1d(x0), np.atleast_1d(x1), label, best_cost, best_mid, branch)


def sweep(
    p: ControlProblem,
    x0_grid: Sequence,
    x1_grid: Sequence,
    T: float,
    extremals: Sequence[StaticExtremal],
    orbit_radius: float | None = None,
    N: int | None = None,
    workers: int | None = None,
) -> SweepResult:
    """Best-of-initializations direct solves on a row-major (x0, x1) grid.

    Each cell is solved from every extremal's turnpike (and an orbit when
    ``orbit_radius`` is given); the least converged cost wins and the cell is
    labeled by the extremal nearest to x(T/2). Labels index the extremals in
    canonical (state-lexicographic) order.
    """
    ext = canonical_extremals(extremals)
    if len(ext) < 2:
        raise AnalysisError("a sweep needs at least two distinct extremals")
    x0s = [np.atleast_1d(np.asarray(v, dtype=float)) for v in x0_grid]
    x1s = [np.atleast_1d(np.asarray(v, dtype=float)) for v in x1_grid]
    tasks = [(p, a, b, float(T), ext, orbit_radius, N) for a in x0s for b in x1s]
    cells = parallel_map(_sweep_cell, tasks, workers)
    return SweepResult(list(x0_grid), list(x1_grid), ext, list(cells), float(T))
