"""Pontryagin extremal flow and single shooting (classic and midpoint).

The midpoint variant places the unknown at t = T/2, starts it at the
turnpike and integrates backward to 0 and forward to T. Over long horizons
the flow amplifies perturbations like ``exp(rho * T / 2)`` where ``rho`` is the
largest real part in the linearized spectrum; when that exceeds what double
precision can resolve the flow is integrated in multiprecision (gmpy2 mpfr)
so the boundary map stays differentiable by finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import expr as ex
from .lq_core import split, HyperbolicityError
from .ocp_model import (
    ControlProblem,
    FixedConstrained,
    FixedFixed,
    FixedFree,
    Periodic,
    StaticExtremal,
    BoundarySpec,
    hamiltonian_series,
    linearize,
    ModelError,
)
from .trajectory import Trajectory

BLOWUP = 1e12


class ShootingError(RuntimeError):
    pass


class UnsupportedControlStructure(ShootingError):
    pass


class IntegrationBlowUp(ShootingError):
    def __init__(self, time: float):
        super().__init__(f"extremal flow blew up near t = {time:.6g}")
        self.time = time


class SingularJacobian(ShootingError):
    pass


@dataclass(frozen=True)
class ExtremalPoint:
    x: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).reshape(-1)
        lam = np.asarray(self.lam, dtype=float).reshape(-1)
        if x.shape != lam.shape or not (np.all(np.isfinite(x)) and np.all(np.isfinite(lam))):
            raise ValueError("extremal point needs finite x and lambda of equal length")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "lam", lam)

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.x, self.lam])


@dataclass(frozen=True)
class ShootingConfig:
    variant: str = "midpoint"
    steps_per_unit: int = 100
    tol: float = 1e-9
    max_iter: int = 50
    fd_step: float = 1e-7
    precision: str | int | None = None  # "double", "auto" or decimal digits
    max_halvings: int = 30

    def __post_init__(self):
        if self.variant not in ("classic", "midpoint"):
            raise ValueError(f"unknown shooting variant {self.variant!r}")
        if self.steps_per_unit <= 0 or self.tol <= 0 or self.max_iter <= 0 or self.fd_step <= 0:
            raise ValueError("shooting parameters must be positive")


@dataclass
class ShootingResult:
    converged: bool
    unknown: np.ndarray
    trajectory: Trajectory | None
    residual_norm: float
    iterations: int
    gamma: np.ndarray | None = None
    clamp_events: int = 0
    h_drift: float | None = None
    midpoint_distance: float | None = None
    digits: int = 16
    message: str = ""

    def report(self, variant: str) -> dict:
        return {
            "variant": variant,
            "converged": self.converged,
            "iterations": self.iterations,
            "residual": self.residual_norm,
            "clamp_events": self.clamp_events,
            "h_drift": self.h_drift,
            "midpoint_distance": self.midpoint_distance,
            "gamma": None if self.gamma is None else self.gamma.tolist(),
            "unknown": self.unknown.tolist(),
            "digits": self.digits,
            "cost": None if self.trajectory is None else self.trajectory.cost,
            "message": self.message,
        }


# ---------------------------------------------------------------------------
# arithmetic back ends (float or mpfr) on short python lists


class _Arith:
    """Scalar arithmetic for the flow: IEEE doubles or mpfr of a given precision."""

    def __init__(self, p: ControlProblem, digits: int | None = None):
        self.p = p
        self.digits = digits
        if digits is None:
            self.num = float
            self.backend = "float"
            self.eps = 1e-13
        else:
            import gmpy2

            self.gmpy2 = gmpy2
            self.ctx = gmpy2.context(precision=int(math.ceil(digits * 3.3219280949)) + 8)
            self.num = gmpy2.mpfr
            self.backend = "mpfr"
            self.eps = gmpy2.mpfr(10.0) ** (-(digits - 10))
        self.flow = p.sym.fn("flow", self.backend)
        self.hu_huu = p.sym.fn("hu_huu", self.backend)
        self.f0 = p.sym.fn("f0", self.backend)
        huu_vars = set().union(*[ex.variables(e) for row in p.sym.Huu for e in row]) if p.m else set()
        self.affine_newton = not any(v.kind == "u" for v in huu_vars)
        self.lo = list(p.lo)
        self.hi = list(p.hi)

    def vec(self, values) -> list:
        return [self.num(float(v)) if isinstance(v, (np.floating, np.integer)) else self.num(v) for v in values]

    def __enter__(self):
        if self.digits is not None:
            self._local = self.gmpy2.context(self.ctx)
            self._local.__enter__()
        return self

    def __exit__(self, *exc):
        if self.digits is not None:
            self._local.__exit__(*exc)
        return False


def _solve_small(A: list[list], b: list, tiny=0.0) -> list:
    """Gaussian elimination with partial pivoting on lists (any scalar type)."""
    size = len(b)
    M = [list(row) + [b[i]] for i, row in enumerate(A)]
    scale = max((abs(v) for row in A for v in row), default=0)
    for c in range(size):
        piv = max(range(c, size), key=lambda r: abs(M[r][c]))
        if abs(M[piv][c]) <= tiny * scale or M[piv][c] == 0:
            raise SingularJacobian("singular linear system")
        M[c], M[piv] = M[piv], M[c]
        for r in range(c + 1, size):
            fac = M[r][c] / M[c][c]
            if fac != 0:
                for k in range(c, size + 1):
                    M[r][k] -= fac * M[c][k]
    out = [0] * size
    for r in range(size - 1, -1, -1):
        acc = M[r][size]
        for k in range(r + 1, size):
            acc -= M[r][k] * out[k]
        out[r] = acc / M[r][r]
    return out


def _negative_definite(H: list[list]) -> bool:
    """Sylvester-type test through unpivoted elimination pivots of -H."""
    size = len(H)
    M = [[-v for v in row] for row in H]
    for c in range(size):
        if not M[c][c] > 0:
            return False
        for r in range(c + 1, size):
            fac = M[r][c] / M[c][c]
            for k in range(c, size):
                M[r][k] -= fac * M[c][k]
    return True


class _Stats:
    def __init__(self):
        self.clamp_events = 0


def _control(ar: _Arith, x, lam, u_start, stats: _Stats | None = None) -> list:
    """Maximize H(x, lam, -1, .) over the control box from a warm start."""
    m = ar.p.m
    if m == 0:
        return []
    u = list(u_start)
    free = list(range(m))
    for _ in range(m + 1):
        for it in range(60):
            vals = ar.hu_huu(x, u, lam)
            hu = vals[:m]
            huu = [list(vals[m + i * m : m + (i + 1) * m]) for i in range(m)]
            sub = [[huu[i][j] for j in free] for i in free]
            if not _negative_definite(sub):
                raise UnsupportedControlStructure("H_uu is not negative definite: unsupported control structure")
            g = [hu[i] for i in free]
            if it > 0 and max(abs(v) for v in g) <= ar.eps * (1 + max(abs(v) for v in u)):
                break
            step = _solve_small(sub, [-v for v in g])
            for k, i in enumerate(free):
                u[i] += step[k]
            if ar.affine_newton:
                break
        else:
            raise UnsupportedControlStructure("inner maximization of H did not converge")
        clamped = False
        for i in list(free):
            if u[i] < ar.lo[i] or u[i] > ar.hi[i]:
                u[i] = ar.num(ar.lo[i]) if u[i] < ar.lo[i] else ar.num(ar.hi[i])
                free.remove(i)
                clamped = True
        if clamped and stats is not None:
            stats.clamp_events += 1
        if not clamped or not free:
            break
    return u


def control_from_costate(p: ControlProblem, x, lam, u_start=None) -> np.ndarray:
    """Maximizer of the normal Hamiltonian over the control box."""
    ar = _Arith(p)
    u0 = np.zeros(p.m) if u_start is None else np.asarray(u_start, dtype=float)
    u0 = np.clip(u0, p.lo, p.hi)
    u = _control(ar, [float(v) for v in x], [float(v) for v in lam], [float(v) for v in u0])
    return np.array(u, dtype=float)


def extremal_rhs(p: ControlProblem, z: ExtremalPoint | np.ndarray, u_start=None) -> np.ndarray:
    """(dH/dlambda, -dH/dx) at the maximizing control."""
    zz = z.z if isinstance(z, ExtremalPoint) else np.asarray(z, dtype=float)
    n = p.n
    x, lam = list(map(float, zz[:n])), list(map(float, zz[n:]))
    ar = _Arith(p)
    u0 = [float(v) for v in (np.zeros(p.m) if u_start is None else np.clip(u_start, p.lo, p.hi))]
    u = _control(ar, x, lam, u0)
    return np.array(ar.flow(x, u, lam), dtype=float)


# ---------------------------------------------------------------------------
# integration


@dataclass
class FlowPath:
    t: np.ndarray
    z: list  # list of per-node state lists
    u: list
    arith_digits: int | None = None

    def as_float(self):
        z = np.array([[float(v) for v in row] for row in self.z])
        u = np.array([[float(v) for v in row] for row in self.u]).reshape(len(self.u), -1)
        return z, u


def _integrate(ar: _Arith, z0: list, t0: float, t1: float, steps: int, u0: list, stats: _Stats, record: bool = True):
    n = ar.p.n
    h = ar.num(t1 - t0) / steps
    h2 = h / 2
    h6 = h / 6
    z = list(z0)
    u = list(u0)

    def rhs(zz, ustart):
        uu = _control(ar, zz[:n], zz[n:], ustart, stats)
        return list(ar.flow(zz[:n], uu, zz[n:])), uu

    zs, us = [], []
    for k in range(steps):
        k1, u = rhs(z, u)
        if record:
            zs.append(z)
            us.append(u)
        k2, u = rhs([a + h2 * b for a, b in zip(z, k1)], u)
        k3, u = rhs([a + h2 * b for a, b in zip(z, k2)], u)
        k4, u = rhs([a + h * b for a, b in zip(z, k3)], u)
        z = [a + h6 * (b1 + 2 * b2 + 2 * b3 + b4) for a, b1, b2, b3, b4 in zip(z, k1, k2, k3, k4)]
        big = max(abs(v) for v in z)
        if not big < BLOWUP:
            raise IntegrationBlowUp(t0 + (t1 - t0) * (k + 1) / steps)
    u = _control(ar, z[:n], z[n:], u, stats)
    zs.append(z)
    us.append(u)
    if not record:
        zs, us = zs[-1:], us[-1:]
    return zs, us


def integrate(
    p: ControlProblem, z0, t0: float, t1: float, steps: int, u_start=None, digits: int | None = None
) -> FlowPath:
    """Fixed-step RK4 of the extremal flow from ``z0`` at ``t0`` to ``t1`` (either direction)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    ar = _Arith(p, digits)
    with ar:
        zz = z0.z if isinstance(z0, ExtremalPoint) else z0
        z = ar.vec(list(np.asarray(zz, dtype=float)) if digits is None else zz)
        u0 = np.clip(np.zeros(p.m) if u_start is None else np.asarray(u_start, dtype=float), p.lo, p.hi)
        zs, us = _integrate(ar, z, t0, t1, steps, ar.vec(u0), _Stats())
    return FlowPath(np.linspace(t0, t1, steps + 1), zs, us, digits)


# ---------------------------------------------------------------------------
# boundary residual


def _residual(spec: BoundarySpec, z0: list, zT: list, gamma: list, n: int, num, backend: str) -> list:
    x0, l0, xT, lT = z0[:n], z0[n:], zT[:n], zT[n:]
    if isinstance(spec, FixedFixed):
        return [a - num(b) for a, b in zip(x0, spec.x0)] + [a - num(b) for a, b in zip(xT, spec.x1)]
    if isinstance(spec, FixedFree):
        return [a - num(b) for a, b in zip(x0, spec.x0)] + list(lT)
    if isinstance(spec, FixedConstrained):
        g_fn, dg_fn = _constraint_fns(spec, backend)
        g = list(g_fn(xT, ()))
        dg = list(dg_fn(xT, ()))
        p = spec.p
        costate = [lT[i] - sum(dg[k * n + i] * gamma[k] for k in range(p)) for i in range(n)]
        return [a - num(b) for a, b in zip(x0, spec.x0)] + g + costate
    if isinstance(spec, Periodic):
        return [a - b for a, b in zip(x0, xT)] + [a - b for a, b in zip(l0, lT)]
    raise ValueError(f"unknown boundary specification {spec!r}")


_CONSTRAINT_CACHE: dict = {}


def _constraint_fns(spec: FixedConstrained, backend: str):
    key = (id(spec), backend)
    if key not in _CONSTRAINT_CACHE:
        jac = [d for row in spec.g.jacobian("x") for d in row]
        _CONSTRAINT_CACHE[key] = (ex.compile_exprs(list(spec.g), backend), ex.compile_exprs(jac, backend), spec)
    return _CONSTRAINT_CACHE[key][:2]


def boundary_dim(spec: BoundarySpec, n: int) -> int:
    return 2 * n + (spec.p if isinstance(spec, FixedConstrained) else 0)


def boundary_residual(traj: Trajectory, spec: BoundarySpec, gamma=None) -> np.ndarray:
    """Boundary/transversality residual of a sampled extremal (costates with lambda0 = -1)."""
    tr = traj.with_unit_costate()
    n = tr.n
    if isinstance(spec, FixedConstrained):
        if gamma is None or len(gamma) != spec.p:
            raise ValueError(f"constrained terminal condition needs {spec.p} multipliers")
        gamma = [float(g) for g in gamma]
    elif gamma is not None and len(gamma):
        raise ValueError("multipliers only apply to constrained terminal conditions")
    z0 = list(np.concatenate([tr.x[0], tr.lam[0]]))
    zT = list(np.concatenate([tr.x[-1], tr.lam[-1]]))
    return np.array(_residual(spec, z0, zT, gamma or [], n, float, "float"), dtype=float)


# ---------------------------------------------------------------------------
# Newton with finite-difference Jacobian


@dataclass
class NewtonResult:
    root: list
    residual_norm: float
    iterations: int
    converged: bool
    message: str = ""
    history: list = field(default_factory=list)


def _norm(v) -> float:
    return math.sqrt(sum(float(a) ** 2 for a in v))


def newton_fd(residual, guess, cfg: ShootingConfig = ShootingConfig(), num=float, singular_tiny: float = 1e-12) -> NewtonResult:
    """Damped Newton on ``residual`` with forward-difference Jacobian.

    ``residual`` maps a list to a list and may raise :class:`ShootingError`
    (treated as an infinite residual inside the line search). Steps are
    halved until the residual norm decreases.
    """
    y = [num(v) for v in guess]
    try:
        r = residual(y)
    except (ShootingError, ex.ExpressionDomainError, OverflowError) as exc:
        return NewtonResult([float(v) for v in y], math.inf, 0, False, f"initial guess: {exc}")
    if len(r) != len(y):
        raise ValueError(f"residual has {len(r)} rows for {len(y)} unknowns")
    norm = _norm(r)
    history = [norm]
    for it in range(cfg.max_iter + 1):
        if norm <= cfg.tol:
            return NewtonResult(y, norm, it, True, "converged", history)
        if it == cfg.max_iter:
            break
        cols = []
        try:
            for j in range(len(y)):
                # power-of-two step, then the step actually realized in y + h
                hj = num(2.0 ** round(math.log2(cfg.fd_step * max(1.0, abs(float(y[j]))))))
                yj = list(y)
                yj[j] += hj
                hj = yj[j] - y[j]
                rj = residual(yj)
                cols.append([(a - b) / hj for a, b in zip(rj, r)])
        except (ShootingError, ex.ExpressionDomainError, OverflowError) as exc:
            return NewtonResult(y, norm, it, False, f"Jacobian evaluation failed: {exc}", history)
        J = [[cols[j][i] for j in range(len(y))] for i in range(len(r))]
        try:
            if num is float:
                Jf = np.array(J, dtype=float)
                if not np.all(np.isfinite(Jf)) or np.linalg.cond(Jf) > 1.0 / singular_tiny:
                    raise SingularJacobian(f"singular Jacobian (condition {np.linalg.cond(Jf):.3g})")
                step = list(np.linalg.solve(Jf, -np.array(r, dtype=float)))
            else:
                step = _solve_small(J, [-a for a in r], tiny=singular_tiny)
        except (SingularJacobian, np.linalg.LinAlgError) as exc:
            return NewtonResult(y, norm, it, False, str(exc), history)
        alpha = 1.0
        for _ in range(cfg.max_halvings):
            trial = [a + alpha * b for a, b in zip(y, step)]
            try:
                r_trial = residual(trial)
                n_trial = _norm(r_trial)
            except (ShootingError, ex.ExpressionDomainError, OverflowError):
                n_trial = math.inf
            if n_trial < norm:
                break
            alpha /= 2
        else:
            return NewtonResult(y, norm, it, False, "line search failed", history)
        y, r, norm = trial, r_trial, n_trial
        history.append(norm)
    return NewtonResult(y, norm, cfg.max_iter, False, "maximum iterations reached", history)


# ---------------------------------------------------------------------------
# shooting


def spectral_radius_real(p: ControlProblem, e: StaticExtremal) -> float:
    """Largest |Re| in the spectrum of the linearized extremal matrix at ``e``."""
    M = linearize(p, e).hamiltonian_matrix()
    return float(np.max(np.abs(np.linalg.eigvals(M).real)))


def amplification_digits(rho: float, span: float, margin: float = 1.25) -> float:
    return margin * rho * span / math.log(10.0)


def _choose_digits(cfg: ShootingConfig, p: ControlProblem, e: StaticExtremal | None, span: float) -> tuple[int | None, float]:
    """(working decimal digits or None for double, finite-difference step)."""
    mode = cfg.precision
    if mode is None:
        mode = "auto" if cfg.variant == "midpoint" else "double"
    if mode == "double":
        return None, cfg.fd_step
    if isinstance(mode, int):
        amp = max(0.0, (mode - 30) / 3)
    else:
        if e is None:
            return None, cfg.fd_step
        try:
            amp = amplification_digits(spectral_radius_real(p, e), span)
        except (ModelError, np.linalg.LinAlgError):
            return None, cfg.fd_step
        if amp <= 6:
            return None, cfg.fd_step
    # forward differences carry a relative error ~ h * 10**amp while the
    # Jacobian condition number is ~ 10**amp, hence h ~ 10**-(2 amp) and
    # enough digits to resolve the difference quotient after that
    digits = int(3 * amp + 30) if not isinstance(mode, int) else mode
    return digits, 10.0 ** (-(2 * amp + 8))


class _Problem:
    """Residual maps of one shooting solve."""

    def __init__(self, p: ControlProblem, T: float, cfg: ShootingConfig, ar: _Arith, u_seed: list):
        self.p, self.T, self.cfg, self.ar = p, float(T), cfg, ar
        self.n = p.n
        self.spec = p.boundary
        self.np_ = self.spec.p if isinstance(self.spec, FixedConstrained) else 0
        self.u_seed = u_seed
        self.stats = _Stats()

    def steps(self, span: float) -> int:
        return max(1, int(math.ceil(self.cfg.steps_per_unit * abs(span) - 1e-9)))

    def ends_classic(self, lam0: list, record=False):
        x0 = [self.ar.num(v) for v in self.spec.x0]
        zs, us = _integrate(self.ar, x0 + list(lam0), 0.0, self.T, self.steps(self.T), self.u_seed, self.stats, record)
        return zs, us

    def ends_midpoint(self, zmid: list, record=False):
        half = self.T / 2
        steps = self.steps(half)
        back, ub = _integrate(self.ar, list(zmid), half, 0.0, steps, self.u_seed, self.stats, record)
        fwd, uf = _integrate(self.ar, list(zmid), half, self.T, steps, self.u_seed, self.stats, record)
        return back, ub, fwd, uf

    def residual_classic(self, y: list) -> list:
        n = self.n
        zs, _ = self.ends_classic(y[:n])
        z0 = [self.ar.num(v) for v in self.spec.x0] + list(y[:n])
        return _residual(self.spec, z0, zs[-1], y[n:], n, self.ar.num, self.ar.backend)[n:]

    def residual_midpoint(self, y: list) -> list:
        n = self.n
        back, _, fwd, _ = self.ends_midpoint(y[: 2 * n])
        return _residual(self.spec, back[-1], fwd[-1], y[2 * n :], n, self.ar.num, self.ar.backend)


def _refine_turnpike(ar: _Arith, e: StaticExtremal) -> list:
    """KKT point of ``e`` polished in the working precision; returns [x, u, lam]."""
    p = ar.p
    size = 2 * p.n + p.m
    y = ar.vec(np.concatenate([e.x, e.u, e.lam]))
    if ar.digits is None:
        return y
    kkt = p.sym.fn("kkt", "mpfr")
    jac = p.sym.fn("kkt_jac", "mpfr")
    split_y = lambda v: (v[: p.n], v[p.n : p.n + p.m], v[p.n + p.m :])  # noqa: E731
    for _ in range(20):
        r = list(kkt(*split_y(y)))
        if max(abs(v) for v in r) <= ar.eps * ar.eps:
            break
        J = list(jac(*split_y(y)))
        step = _solve_small([J[i * size : (i + 1) * size] for i in range(size)], [-v for v in r])
        y = [a + b for a, b in zip(y, step)]
    return y


def _finish(p: ControlProblem, T: float, t: np.ndarray, z: np.ndarray, u: np.ndarray, method: str, meta: dict) -> Trajectory:
    n = p.n
    x, lam = z[:, :n], z[:, n:]
    f0 = p.running_cost_series(x, u)
    meta = dict(meta)
    meta["cost"] = float(np.trapezoid(f0, t))
    return Trajectory(t=t, x=x, u=u, lam=lam, method=method, lambda0=-1.0, meta=meta)


def hamiltonian_drift(p: ControlProblem, traj: Trajectory) -> float:
    """max |H(t) - H(0)| / max(1, |H(0)|) along a sampled extremal."""
    tr = traj.with_unit_costate()
    H = hamiltonian_series(p, tr.x, tr.lam, tr.u)
    return float(np.max(np.abs(H - H[0])) / max(1.0, abs(H[0])))


def shoot_classic(
    p: ControlProblem,
    T: float,
    guess,
    cfg: ShootingConfig = ShootingConfig(variant="classic"),
    turnpike: StaticExtremal | None = None,
    gamma_guess=None,
) -> ShootingResult:
    """Newton on lambda(0) so that the flow from (x0, lambda(0)) meets the boundary conditions."""
    spec = p.boundary
    if isinstance(spec, Periodic):
        raise ValueError("classic shooting needs a fixed initial state")
    cfg = replace(cfg, variant="classic")
    digits, fd = _choose_digits(cfg, p, turnpike, T)
    ar = _Arith(p, digits)
    n = p.n
    with ar:
        u_seed = ar.vec(np.clip(turnpike.u if turnpike is not None else np.zeros(p.m), p.lo, p.hi))
        prob = _Problem(p, T, cfg, ar, u_seed)
        y0 = list(np.asarray(guess, dtype=float).reshape(-1))
        if len(y0) != n:
            raise ValueError(f"classic shooting guess must have {n} entries")
        y0 += list(np.zeros(prob.np_) if gamma_guess is None else np.asarray(gamma_guess, dtype=float))
        tiny = 1e-12 if digits is None else 10.0 ** (-(digits - 10))
        res = newton_fd(prob.residual_classic, y0, replace(cfg, fd_step=fd), ar.num, tiny)
        traj = None
        drift = None
        if math.isfinite(res.residual_norm):
            try:
                prob.stats = _Stats()
                zs, us = prob.ends_classic(res.root[:n], record=True)
                z = np.array([[float(v) for v in row] for row in zs])
                u = np.array([[float(v) for v in row] for row in us]).reshape(len(us), p.m)
                t = np.linspace(0.0, T, len(zs))
                traj = _finish(p, T, t, z, u, "shoot-classic", {"iterations": res.iterations, "tol": cfg.tol})
                drift = hamiltonian_drift(p, traj)
            except ShootingError:
                traj = None
    root = np.array([float(v) for v in res.root])
    return ShootingResult(
        converged=res.converged,
        unknown=root[:n],
        trajectory=traj,
        residual_norm=res.residual_norm,
        iterations=res.iterations,
        gamma=root[n:] if prob.np_ else None,
        clamp_events=prob.stats.clamp_events,
        h_drift=drift,
        digits=digits or 16,
        message=res.message,
    )


def shoot_midpoint(
    p: ControlProblem,
    T: float,
    turnpike: StaticExtremal,
    cfg: ShootingConfig = ShootingConfig(),
    gamma_guess=None,
) -> ShootingResult:
    """Newton on z(T/2), started at the turnpike (x̄, λ̄)."""
    cfg = replace(cfg, variant="midpoint")
    digits, fd = _choose_digits(cfg, p, turnpike, T / 2)
    ar = _Arith(p, digits)
    n = p.n
    with ar:
        polished = _refine_turnpike(ar, turnpike)
        u_seed = polished[n : n + p.m]
        prob = _Problem(p, T, cfg, ar, u_seed)
        y0 = polished[:n] + polished[n + p.m :] + list(np.zeros(prob.np_) if gamma_guess is None else np.asarray(gamma_guess, dtype=float))
        tiny = 1e-12 if digits is None else 10.0 ** (-(digits - 10))
        res = newton_fd(prob.residual_midpoint, y0, replace(cfg, fd_step=fd), ar.num, tiny)
        traj = None
        drift = None
        if math.isfinite(res.residual_norm):
            try:
                prob.stats = _Stats()
                back, ub, fwd, uf = prob.ends_midpoint(res.root[: 2 * n], record=True)
                zs = back[::-1] + fwd[1:]
                us = ub[::-1] + uf[1:]
                z = np.array([[float(v) for v in row] for row in zs])
                u = np.array([[float(v) for v in row] for row in us]).reshape(len(us), p.m)
                t = np.concatenate([np.linspace(0.0, T / 2, len(back)), np.linspace(T / 2, T, len(fwd))[1:]])
                traj = _finish(p, T, t, z, u, "shoot-midpoint", {"iterations": res.iterations, "tol": cfg.tol})
                drift = hamiltonian_drift(p, traj)
            except ShootingError:
                traj = None
    root = np.array([float(v) for v in res.root])
    return ShootingResult(
        converged=res.converged,
        unknown=root[: 2 * n],
        trajectory=traj,
        residual_norm=res.residual_norm,
        iterations=res.iterations,
        gamma=root[2 * n :] if prob.np_ else None,
        clamp_events=prob.stats.clamp_events,
        h_drift=drift,
        midpoint_distance=float(np.linalg.norm(root[: 2 * n] - turnpike.z)),
        digits=digits or 16,
        message=res.message,
    )
