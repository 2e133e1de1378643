"""Nonlinear optimal control problems, their Hamiltonian and static extremals.

Costates follow the lambda0 = -1 normalization: ``H = <lam, f> - f0``.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from . import expr as ex
from .expr import Expression, Var, VectorField
from .lq_core import LqProblem, HyperbolicityError, kalman_rank, split, to_unit_costate, lq_turnpike

KKT_TOL = 1e-9
COND_LIMIT = 1e12
BOUNDARY_TOL = 1e-9


class ModelError(ValueError):
    pass


class SingularJacobianError(ModelError):
    pass


class NoConvergenceError(ModelError):
    pass


# ---------------------------------------------------------------------------
# boundary conditions


@dataclass(frozen=True)
class FixedFixed:
    x0: np.ndarray
    x1: np.ndarray
    kind = "fixed_fixed"

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(-1))
        object.__setattr__(self, "x1", np.asarray(self.x1, dtype=float).reshape(-1))


@dataclass(frozen=True)
class FixedFree:
    x0: np.ndarray
    kind = "fixed_free"

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(-1))


@dataclass(frozen=True)
class FixedConstrained:
    """x(0) = x0 and g(x(T)) = 0 with ``g`` written over x1..xn."""

    x0: np.ndarray
    g: VectorField
    kind = "fixed_constrained"

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(-1))

    @property
    def p(self) -> int:
        return len(self.g)

    @cached_property
    def _compiled(self):
        jac = [d for row in self.g.jacobian("x") for d in row]
        return ex.compile_exprs(list(self.g)), ex.compile_exprs(jac)

    def g_value(self, x) -> np.ndarray:
        return np.array(self._compiled[0](x, ()), dtype=float)

    def g_jacobian(self, x) -> np.ndarray:
        return np.array(self._compiled[1](x, ()), dtype=float).reshape(self.p, self.g.n)

    def __getstate__(self):
        state = dict(self.__dict__)
        state.pop("_compiled", None)
        return state


@dataclass(frozen=True)
class Periodic:
    kind = "periodic"


BoundarySpec = FixedFixed | FixedFree | FixedConstrained | Periodic


# ---------------------------------------------------------------------------
# compiled derivatives


class _Symbolic:
    """Symbolic derivatives of f, f0 and H, compiled on demand per backend."""

    def __init__(self, p: "ControlProblem"):
        n, m = p.n, p.m
        self.n, self.m = n, m
        xs = [Var("x", i) for i in range(n)]
        us = [Var("u", j) for j in range(m)]
        ls = [Var("l", i) for i in range(n)]
        ws = xs + us
        self.f = list(p.f)
        self.f0 = p.f0
        lf = ex.ZERO
        for li, fi in zip(ls, self.f):
            lf = ex.add(lf, ex.mul(li, fi))
        self.H = ex.sub(lf, self.f0)
        self.Hx = [ex.differentiate(self.H, v) for v in xs]
        self.Hu = [ex.differentiate(self.H, v) for v in us]
        self.Hw = self.Hx + self.Hu
        self.Hww = [[ex.differentiate(a, v) for v in ws] for a in self.Hw]
        self.f_w = [[ex.differentiate(fi, v) for v in ws] for fi in self.f]
        self.f0_w = [ex.differentiate(self.f0, v) for v in ws]
        self.f0_ww = [[ex.differentiate(a, v) for v in ws] for a in self.f0_w]
        self.lf_ww = [[ex.simplify(ex.add(self.Hww[i][j], self.f0_ww[i][j])) for j in range(n + m)] for i in range(n + m)]
        kkt = self.f + self.Hx + self.Hu
        vars_all = xs + us + ls
        self.kkt = kkt
        self.kkt_jac = [[ex.differentiate(r, v) for v in vars_all] for r in kkt]
        self.Huu = [row[n:] for row in self.Hww[n:]]
        self._cache: dict = {}

    def fn(self, name: str, backend: str = "float"):
        key = (name, backend)
        if key not in self._cache:
            self._cache[key] = ex.compile_exprs(self._exprs(name), backend)
        return self._cache[key]

    def _exprs(self, name: str) -> list[Expression]:
        flat = lambda rows: [e for row in rows for e in row]  # noqa: E731
        table = {
            "f": lambda: self.f,
            "f0": lambda: [self.f0],
            "H": lambda: [self.H],
            "kkt": lambda: self.kkt,
            "kkt_jac": lambda: flat(self.kkt_jac),
            "hu_huu": lambda: self.Hu + flat(self.Huu),
            "flow": lambda: self.f + [ex.neg(e) for e in self.Hx],
            "Hww": lambda: flat(self.Hww),
            "f_w": lambda: flat(self.f_w),
            "f0_w": lambda: self.f0_w,
            "f0_ww": lambda: flat(self.f0_ww),
            "lf_ww": lambda: flat(self.lf_ww),
        }
        return list(table[name]())


# ---------------------------------------------------------------------------
# problem


@dataclass(frozen=True)
class ControlProblem:
    """x' = f(x, u), min int f0(x, u), boundary conditions and a control box."""

    n: int
    m: int
    f: VectorField
    f0: Expression
    boundary: BoundarySpec
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    name: str = ""
    lq: LqProblem | None = None
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.f) != self.n or self.f.n != self.n or self.f.m != self.m:
            raise ModelError("dynamics do not match declared dimensions")
        for e in list(self.f) + [self.f0]:
            for v in ex.variables(e):
                if v.kind == "l" or v.index >= (self.n if v.kind == "x" else self.m):
                    raise ModelError(f"variable {v} outside declared dimensions")
        lo = np.full(self.m, -np.inf) if self.lo is None else np.asarray(self.lo, dtype=float).reshape(-1)
        hi = np.full(self.m, np.inf) if self.hi is None else np.asarray(self.hi, dtype=float).reshape(-1)
        if lo.size != self.m or hi.size != self.m or np.any(lo > hi):
            raise ModelError("control bounds must satisfy lo <= hi componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        b = self.boundary
        for name in ("x0", "x1"):
            if hasattr(b, name) and getattr(b, name).size != self.n:
                raise ModelError(f"boundary {name} has wrong dimension")
        if isinstance(b, FixedConstrained) and (b.g.n != self.n or b.p > self.n):
            raise ModelError("terminal constraint must have p <= n components over x")

    @classmethod
    def from_text(cls, f: Sequence[str], f0: str, n: int, m: int, boundary: BoundarySpec, **kw) -> "ControlProblem":
        return cls(n, m, VectorField.parse(f, n, m), ex.parse(f0, n, m), boundary, **kw)

    @classmethod
    def from_lq(cls, lq: LqProblem, boundary: BoundarySpec, name: str = "") -> "ControlProblem":
        """Nonlinear form of an LQ problem (costates then differ by a factor 2)."""
        n, m = lq.n, lq.m

        def lin(i):
            terms = [f"{float(lq.A[i, j])!r}*x{j + 1}" for j in range(n) if lq.A[i, j] != 0]
            terms += [f"{float(lq.B[i, k])!r}*u{k + 1}" for k in range(m) if lq.B[i, k] != 0]
            return " + ".join(terms) or "0"

        def quad(S, var, d):
            size = S.shape[0]
            terms = []
            for i in range(size):
                for j in range(size):
                    if S[i, j] != 0:
                        terms.append(f"{float(S[i, j])!r}*({var}{i + 1} - {float(d[i])!r})*({var}{j + 1} - {float(d[j])!r})")
            return terms

        f0 = " + ".join(quad(lq.Q, "x", lq.xd) + quad(lq.U, "u", lq.ud)) or "0"
        f0 = f0.replace("- -", "+ ")
        return cls.from_text([lin(i) for i in range(n)], f0, n, m, boundary, name=name, lq=lq)

    @cached_property
    def sym(self) -> _Symbolic:
        return _Symbolic(self)

    def __getstate__(self):
        state = dict(self.__dict__)
        state.pop("sym", None)
        return state

    def with_boundary(self, boundary: BoundarySpec) -> "ControlProblem":
        return ControlProblem(
            self.n, self.m, self.f, self.f0, boundary, self.lo, self.hi, self.name, self.lq, dict(self.options)
        )

    # numeric helpers -----------------------------------------------------

    def dynamics(self, x, u) -> np.ndarray:
        return np.array(self.sym.fn("f")(x, u), dtype=float)

    def running_cost(self, x, u) -> float:
        return float(self.sym.fn("f0")(x, u)[0])

    def running_cost_series(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """f0 along sample rows."""
        val = self.sym.fn("f0", "numpy")(np.asarray(x, dtype=float).T, np.asarray(u, dtype=float).T)[0]
        return np.broadcast_to(np.asarray(val, dtype=float), (np.asarray(x).shape[0],)).copy()


def hamiltonian(p: ControlProblem, x, lam, lam0: float, u) -> float:
    """<lam, f(x, u)> + lam0 * f0(x, u)."""
    if lam0 > 0:
        raise ModelError("cost multiplier must be nonpositive")
    return float(np.dot(np.asarray(lam, dtype=float), p.dynamics(x, u)) + lam0 * p.running_cost(x, u))


def hamiltonian_series(p: ControlProblem, x: np.ndarray, lam: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Normal Hamiltonian (lambda0 = -1) along sample rows."""
    val = p.sym.fn("H", "numpy")(x.T, u.T, lam.T)[0]
    return np.broadcast_to(np.asarray(val, dtype=float), (x.shape[0],)).copy()


def kkt_residual(p: ControlProblem, x, u, lam) -> np.ndarray:
    """Stacked [f; H_x; H_u] at (x, lam, -1, u)."""
    return np.array(p.sym.fn("kkt")(x, u, lam), dtype=float)


def _kkt_jacobian(p: ControlProblem, x, u, lam) -> np.ndarray:
    size = 2 * p.n + p.m
    return np.array(p.sym.fn("kkt_jac")(x, u, lam), dtype=float).reshape(size, size)


# ---------------------------------------------------------------------------
# static problem


@dataclass(frozen=True)
class StaticExtremal:
    x: np.ndarray
    u: np.ndarray
    lam: np.ndarray
    kkt_residual_norm: float
    f0_value: float
    status: str = "accepted"
    iterations: int = 0
    lambda0: float = -1.0

    @property
    def accepted(self) -> bool:
        return self.status == "accepted"

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.x, self.lam])

    def to_dict(self) -> dict:
        return {
            "x": self.x.tolist(),
            "u": self.u.tolist(),
            "lambda": self.lam.tolist(),
            "lambda0": self.lambda0,
            "kkt_residual_norm": self.kkt_residual_norm,
            "f0_value": self.f0_value,
            "status": self.status,
            "iterations": self.iterations,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StaticExtremal":
        return cls(
            x=np.asarray(d["x"], dtype=float),
            u=np.asarray(d["u"], dtype=float),
            lam=np.asarray(d["lambda"], dtype=float),
            kkt_residual_norm=float(d["kkt_residual_norm"]),
            f0_value=float(d["f0_value"]),
            status=d.get("status", "accepted"),
            iterations=int(d.get("iterations", 0)),
        )


def static_from_lq(p: ControlProblem) -> StaticExtremal:
    """Turnpike of an exact-LQ problem, costate converted to lambda0 = -1."""
    if p.lq is None:
        raise ModelError("problem has no LQ block")
    tp = lq_turnpike(p.lq)
    lam = to_unit_costate(tp.lam)
    res = float(np.linalg.norm(kkt_residual(p, tp.x, tp.u, lam)))
    return StaticExtremal(tp.x, tp.u, lam, res, p.running_cost(tp.x, tp.u))


def reduced_hessian(p: ControlProblem, x, u, lam) -> np.ndarray:
    """Hessian of f0 - <lam, f> in (x, u), restricted to the kernel of [f_x f_u]."""
    n, m = p.n, p.m
    L = -np.array(p.sym.fn("Hww")(x, u, lam), dtype=float).reshape(n + m, n + m)
    J = np.array(p.sym.fn("f_w")(x, u), dtype=float).reshape(n, n + m)
    _, s, vh = np.linalg.svd(J)
    rank = int(np.sum(s > 1e-10 * max(1.0, s[0] if s.size else 1.0)))
    Z = vh[rank:].T
    return Z.T @ L @ Z


def _classify(p: ControlProblem, x, u, lam) -> str:
    if np.any(u < p.lo - BOUNDARY_TOL) or np.any(u > p.hi + BOUNDARY_TOL):
        return "outside_box"
    if np.any(np.abs(u - p.lo) <= BOUNDARY_TOL) or np.any(np.abs(u - p.hi) <= BOUNDARY_TOL):
        return "on_boundary"
    R = reduced_hessian(p, x, u, lam)
    if R.size and np.min(np.linalg.eigvalsh(0.5 * (R + R.T))) <= 1e-8:
        return "not_minimum"
    return "accepted"


def newton_solve(residual, jacobian, y0, tol: float = KKT_TOL, max_iter: int = 100):
    """Damped Newton with Armijo backtracking on the residual norm.

    Returns (y, residual norm, iterations). Raises on singular Jacobian or
    failure to converge.
    """
    y = np.asarray(y0, dtype=float).copy()
    r = residual(y)
    norm = float(np.linalg.norm(r))
    for it in range(max_iter + 1):
        if norm <= tol:
            return y, norm, it
        if it == max_iter:
            break
        J = jacobian(y)
        if not np.all(np.isfinite(J)) or np.linalg.cond(J) > COND_LIMIT:
            raise SingularJacobianError(f"singular Jacobian at iteration {it}")
        step = np.linalg.solve(J, -r)
        alpha = 1.0
        while alpha > 1e-10:
            trial = y + alpha * step
            try:
                r_trial = residual(trial)
                n_trial = float(np.linalg.norm(r_trial))
            except (ex.ExpressionDomainError, OverflowError):
                n_trial = np.inf
            if np.isfinite(n_trial) and n_trial <= (1.0 - 1e-4 * alpha) * norm:
                break
            alpha *= 0.5
        else:
            raise NoConvergenceError(f"line search failed at iteration {it}, residual {norm:.3e}")
        y, r, norm = trial, r_trial, n_trial
    raise NoConvergenceError(f"no convergence in {max_iter} iterations, residual {norm:.3e}")


def static_newton(p: ControlProblem, guess: Sequence[float], tol: float = KKT_TOL, max_iter: int = 100) -> StaticExtremal:
    """Newton on the KKT system from ``guess = (x, u, lam)`` stacked."""
    n, m = p.n, p.m
    guess = np.asarray(guess, dtype=float).reshape(-1)
    if guess.size != 2 * n + m:
        raise ModelError(f"guess must have {2 * n + m} entries")
    unpack = lambda y: (y[:n], y[n : n + m], y[n + m :])  # noqa: E731
    y, norm, it = newton_solve(
        lambda y: kkt_residual(p, *unpack(y)), lambda y: _kkt_jacobian(p, *unpack(y)), guess, tol, max_iter
    )
    x, u, lam = (a.copy() for a in unpack(y))
    return StaticExtremal(x, u, lam, norm, p.running_cost(x, u), _classify(p, x, u, lam), it)


def _try_start(args):
    p, guess = args
    try:
        return static_newton(p, guess)
    except (ModelError, ex.ExpressionDomainError, OverflowError, np.linalg.LinAlgError):
        return None


def parallel_map(fn, items, workers: int | None = None) -> list:
    """Ordered map, optionally over a process pool."""
    items = list(items)
    if workers is None or workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def static_multistart(
    p: ControlProblem,
    box: tuple[Sequence[float], Sequence[float]],
    k: int = 64,
    seed: int = 0,
    workers: int | None = None,
    include_rejected: bool = False,
) -> list[StaticExtremal]:
    """Seeded uniform multistart of :func:`static_newton` over a state box.

    Starts draw x uniformly in ``box`` with u = 0 and lam = 0. Results are
    sorted by (f0, x) and deduplicated at distance 1e-6.
    """
    if k < 1:
        raise ModelError("k must be positive")
    lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (p.n,)) for b in box)
    rng = np.random.default_rng(seed)
    xs = rng.uniform(lo, hi, size=(k, p.n))
    u0 = np.clip(np.zeros(p.m), p.lo, p.hi)
    guesses = [np.concatenate([x, u0, np.zeros(p.n)]) for x in xs]
    found = [e for e in parallel_map(_try_start, [(p, g) for g in guesses], workers) if e is not None]
    if not include_rejected:
        found = [e for e in found if e.accepted]
    found.sort(key=lambda e: (e.f0_value, tuple(e.x)))
    unique: list[StaticExtremal] = []
    for e in found:
        if all(np.linalg.norm(np.concatenate([e.x - o.x, e.u - o.u, e.lam - o.lam])) > 1e-6 for o in unique):
            unique.append(e)
    return unique


# ---------------------------------------------------------------------------
# linearization and assumptions


@dataclass(frozen=True)
class LinearizationData:
    A: np.ndarray
    B: np.ndarray
    Hxx: np.ndarray
    Hxu: np.ndarray
    Hux: np.ndarray
    Huu: np.ndarray
    U: np.ndarray
    W: np.ndarray
    Abar: np.ndarray

    def hamiltonian_matrix(self) -> np.ndarray:
        """Matrix of the extremal system linearized at the turnpike."""
        G = self.B @ np.linalg.solve(self.U, self.B.T)
        return np.block([[self.Abar, G], [self.W, -self.Abar.T]])


def linearize(p: ControlProblem, e: StaticExtremal) -> LinearizationData:
    n, m = p.n, p.m
    Hww = np.array(p.sym.fn("Hww")(e.x, e.u, e.lam), dtype=float).reshape(n + m, n + m)
    Hww = 0.5 * (Hww + Hww.T)
    fw = np.array(p.sym.fn("f_w")(e.x, e.u), dtype=float).reshape(n, n + m)
    A, B = fw[:, :n], fw[:, n:]
    Hxx, Hxu, Hux, Huu = Hww[:n, :n], Hww[:n, n:], Hww[n:, :n], Hww[n:, n:]
    U = -Huu
    if np.linalg.cond(U) > COND_LIMIT:
        raise ModelError("-H_uu is singular at the extremal")
    W = -Hxx - Hxu @ np.linalg.solve(U, Hux)
    W = 0.5 * (W + W.T)
    Abar = A + B @ np.linalg.solve(U, Hux)
    return LinearizationData(A, B, Hxx, Hxu, Hux, Huu, U, W, Abar)


@dataclass(frozen=True)
class AssumptionReport:
    u_min_eig: float
    w_min_eig: float
    kalman_rank: int
    dR_rank: int
    dR_rows: int
    n: int
    nu: float | None

    @property
    def positive_definite(self) -> bool:
        return self.u_min_eig > 0 and self.w_min_eig > 0

    @property
    def kalman(self) -> bool:
        return self.kalman_rank == self.n

    @property
    def regular_boundary(self) -> bool:
        return self.dR_rank == self.dR_rows

    @property
    def all_pass(self) -> bool:
        return self.positive_definite and self.kalman and self.regular_boundary

    def to_dict(self) -> dict:
        return {
            "positive_definite": self.positive_definite,
            "u_min_eig": self.u_min_eig,
            "w_min_eig": self.w_min_eig,
            "kalman": self.kalman,
            "kalman_rank": self.kalman_rank,
            "regular_boundary": self.regular_boundary,
            "dR_rank": self.dR_rank,
            "dR_rows": self.dR_rows,
            "hyperbolic": self.nu is not None,
            "nu": self.nu,
        }


def boundary_rank(spec: BoundarySpec, x: np.ndarray, n: int) -> tuple[int, int]:
    """(rank, row count) of the boundary map's differential at (x, x)."""
    if isinstance(spec, FixedFixed):
        return 2 * n, 2 * n
    if isinstance(spec, FixedFree):
        return n, n
    if isinstance(spec, FixedConstrained):
        dg = spec.g_jacobian(x)
        return n + int(np.linalg.matrix_rank(dg, tol=1e-10 * max(1.0, np.abs(dg).max()))), n + spec.p
    if isinstance(spec, Periodic):
        return n, n
    raise ModelError(f"unknown boundary {spec!r}")


def check_assumptions(d: LinearizationData, p: ControlProblem, x: np.ndarray | None = None) -> AssumptionReport:
    x = np.zeros(p.n) if x is None else np.asarray(x, dtype=float)
    rank, rows = boundary_rank(p.boundary, x, p.n)
    try:
        nu = split(d.hamiltonian_matrix()).nu
    except HyperbolicityError:
        nu = None
    return AssumptionReport(
        u_min_eig=float(np.min(np.linalg.eigvalsh(d.U))),
        w_min_eig=float(np.min(np.linalg.eigvalsh(d.W))),
        kalman_rank=kalman_rank(d.A, d.B),
        dR_rank=rank,
        dR_rows=rows,
        n=p.n,
        nu=nu,
    )
