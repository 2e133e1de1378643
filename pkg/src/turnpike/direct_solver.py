"""Direct transcription: trapezoidal (Crank-Nicolson) discretization solved by
an augmented Lagrangian method with sparse Newton inner iterations.

Decision vector is node-major, ``w = (x_0, u_0, x_1, u_1, ..., x_N, u_N)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import expr as ex
from .ocp_model import ControlProblem, FixedConstrained, FixedFixed, FixedFree, Periodic, StaticExtremal
from .bvp_shooting import ShootingError, control_from_costate
from .trajectory import Trajectory


class DirectError(RuntimeError):
    pass


def _bcast(vals, size: int) -> np.ndarray:
    return np.stack([np.broadcast_to(np.asarray(v, dtype=float), (size,)) for v in vals], axis=-1)


class Transcription:
    """Trapezoidal transcription of a control problem on a uniform grid."""

    def __init__(self, p: ControlProblem, T: float, N: int | None = None):
        N = int(round(20 * T)) if N is None else int(N)
        if N < 2:
            raise ValueError("need at least 2 intervals")
        if T <= 0:
            raise ValueError("T must be positive")
        self.p, self.T, self.N = p, float(T), N
        self.h = self.T / N
        self.t = np.linspace(0.0, self.T, N + 1)
        self.n, self.m = p.n, p.m
        self.k = p.n + p.m
        self.nvar = (N + 1) * self.k
        self.weights = np.full(N + 1, self.h)
        self.weights[[0, -1]] *= 0.5
        self.n_defect = p.n * N
        spec = p.boundary
        if isinstance(spec, FixedFixed):
            self.n_boundary = 2 * p.n
        elif isinstance(spec, FixedConstrained):
            self.n_boundary = p.n + spec.p
        elif isinstance(spec, (FixedFree, Periodic)):
            self.n_boundary = p.n
        else:
            raise ValueError(f"unknown boundary {spec!r}")
        self.ncon = self.n_defect + self.n_boundary
        lo = np.full((N + 1, self.k), -np.inf)
        hi = np.full((N + 1, self.k), np.inf)
        lo[:, p.n :] = p.lo
        hi[:, p.n :] = p.hi
        self.lo, self.hi = lo.reshape(-1), hi.reshape(-1)
        self._fns = {name: p.sym.fn(name, "numpy") for name in ("f", "f_w", "f0", "f0_w", "f0_ww", "lf_ww")}

    # layout helpers ------------------------------------------------------

    def unpack(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        W = w.reshape(self.N + 1, self.k)
        return W[:, : self.n], W[:, self.n :]

    def pack(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        return np.hstack([np.asarray(X, dtype=float).reshape(self.N + 1, self.n), np.asarray(U, dtype=float).reshape(self.N + 1, self.m)]).reshape(-1)

    def _eval(self, name: str, X, U, L=None):
        args = (X.T, U.T) if L is None else (X.T, U.T, L.T)
        return _bcast(self._fns[name](*args), X.shape[0])

    @cached_property
    def _g_fns(self):
        spec = self.p.boundary
        xs = [ex.Var("x", i) for i in range(self.n)]
        jac = spec.g.jacobian("x")
        hess = [[[ex.differentiate(jac[k][i], xs[j]) for j in range(self.n)] for i in range(self.n)] for k in range(spec.p)]
        flat = [e for blk in hess for row in blk for e in row]
        return (
            ex.compile_exprs(list(spec.g)),
            ex.compile_exprs([e for row in jac for e in row]),
            ex.compile_exprs(flat),
        )

    # objective ------------------------------------------------------------

    def objective(self, w: np.ndarray) -> float:
        X, U = self.unpack(w)
        return float(np.dot(self.weights, self._eval("f0", X, U)[:, 0]))

    def objective_grad(self, w: np.ndarray) -> np.ndarray:
        X, U = self.unpack(w)
        return (self.weights[:, None] * self._eval("f0_w", X, U)).reshape(-1)

    # constraints ----------------------------------------------------------

    def constraints(self, w: np.ndarray) -> np.ndarray:
        X, U = self.unpack(w)
        F = self._eval("f", X, U)
        defect = X[1:] - X[:-1] - 0.5 * self.h * (F[1:] + F[:-1])
        return np.concatenate([defect.reshape(-1), self._boundary_values(X)])

    def _boundary_values(self, X: np.ndarray) -> np.ndarray:
        spec = self.p.boundary
        if isinstance(spec, FixedFixed):
            return np.concatenate([X[0] - spec.x0, X[-1] - spec.x1])
        if isinstance(spec, FixedFree):
            return X[0] - spec.x0
        if isinstance(spec, FixedConstrained):
            return np.concatenate([X[0] - spec.x0, np.array(self._g_fns[0](X[-1], ()), dtype=float)])
        return X[0] - X[-1]

    def constraint_jacobian(self, w: np.ndarray) -> sp.csr_matrix:
        X, U = self.unpack(w)
        n, k, N = self.n, self.k, self.N
        Fw = self._eval("f_w", X, U).reshape(N + 1, n, k)
        eye = np.zeros((n, k))
        eye[:, :n] = np.eye(n)
        left = -eye[None] - 0.5 * self.h * Fw[:-1]
        right = eye[None] - 0.5 * self.h * Fw[1:]
        ii = np.arange(N)[:, None, None] * n + np.arange(n)[None, :, None]
        jj = np.arange(N)[:, None, None] * k + np.arange(k)[None, None, :]
        rows = [np.broadcast_to(ii, left.shape).ravel(), np.broadcast_to(ii, right.shape).ravel()]
        cols = [np.broadcast_to(jj, left.shape).ravel(), np.broadcast_to(jj + k, right.shape).ravel()]
        vals = [left.ravel(), right.ravel()]
        r0 = self.n_defect
        spec = self.p.boundary
        idx = np.arange(n)
        if isinstance(spec, (FixedFixed, FixedFree, FixedConstrained, Periodic)):
            rows.append(r0 + idx)
            cols.append(idx)
            vals.append(np.ones(n))
        if isinstance(spec, FixedFixed):
            rows.append(r0 + n + idx)
            cols.append(N * k + idx)
            vals.append(np.ones(n))
        elif isinstance(spec, Periodic):
            rows.append(r0 + idx)
            cols.append(N * k + idx)
            vals.append(-np.ones(n))
        elif isinstance(spec, FixedConstrained):
            dg = np.array(self._g_fns[1](X[-1], ()), dtype=float).reshape(spec.p, n)
            gi, gj = np.meshgrid(np.arange(spec.p), idx, indexing="ij")
            rows.append(r0 + n + gi.ravel())
            cols.append(N * k + gj.ravel())
            vals.append(dg.ravel())
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(self.ncon, self.nvar)
        )

    def lagrangian_hessian(self, w: np.ndarray, y: np.ndarray) -> sp.csr_matrix:
        """Hessian of J + y'c (block diagonal in the nodes)."""
        X, U = self.unpack(w)
        n, k, N = self.n, self.k, self.N
        Y = y[: self.n_defect].reshape(N, n)
        Lnode = np.zeros((N + 1, n))
        Lnode[:-1] += Y
        Lnode[1:] += Y
        Lnode *= -0.5 * self.h
        blocks = self.weights[:, None, None] * self._eval("f0_ww", X, U).reshape(N + 1, k, k)
        blocks = blocks + self._eval("lf_ww", X, U, Lnode).reshape(N + 1, k, k)
        spec = self.p.boundary
        if isinstance(spec, FixedConstrained):
            gam = y[self.n_defect + n :]
            gh = np.array(self._g_fns[2](X[-1], ()), dtype=float).reshape(spec.p, n, n)
            blocks[-1, :n, :n] += np.einsum("p,pij->ij", gam, gh)
        return sp.block_diag(list(blocks), format="csr")


@dataclass
class NlpResult:
    converged: bool
    w: np.ndarray
    multipliers: np.ndarray
    objective: float
    max_violation: float
    stationarity: float
    outer_iterations: int
    inner_iterations: int
    message: str = ""
    history: list = field(default_factory=list)


@dataclass(frozen=True)
class AlConfig:
    """Augmented Lagrangian settings.

    Below ``rho_curvature``, negative curvature in the Newton matrix raises the
    penalty; above it the matrix is shifted instead.
    """

    viol_tol: float = 1e-7
    stat_tol: float = 1e-6
    max_outer: int = 20
    max_inner: int = 100
    rho0: float = 10.0
    rho_factor: float = 10.0
    rho_max: float = 1e8
    rho_curvature: float = 1e3


def _factor_pd(H: sp.csr_matrix, delta_hint: float = 0.0, floor: float = 1e-10):
    """LU of ``H + delta I`` without pivoting, shifted until all pivots are positive.

    The shift search starts near ``delta_hint`` (the previous successful shift)
    so that consecutive Newton steps reuse the same curvature estimate.
    """
    size = H.shape[0]
    diag = np.abs(H.diagonal())
    scale = max(1.0, float(diag.max()) if size else 1.0)
    eye = sp.identity(size, format="csc")
    Hc = H.tocsc()
    delta = 0.0
    for _ in range(60):
        try:
            lu = splu(
                (Hc + delta * eye).tocsc(),
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
            d = lu.U.diagonal()
            if np.all(d > 1e-14 * scale) and np.all(np.isfinite(d)):
                return lu, delta
        except RuntimeError:
            pass
        delta = max(floor, 0.1 * delta_hint) if delta == 0.0 else delta * 4.0
    raise DirectError("could not regularize the Newton matrix")


def _projected_gradient(w, g, lo, hi):
    pg = g.copy()
    pg[(w <= lo) & (g > 0)] = 0.0
    pg[(w >= hi) & (g < 0)] = 0.0
    return pg


def solve_al(tr: Transcription, init: np.ndarray, mu0: np.ndarray | None = None, cfg: AlConfig = AlConfig()) -> NlpResult:
    """Augmented Lagrangian outer loop with projected Newton inner loop."""
    w = np.clip(np.asarray(init, dtype=float).copy(), tr.lo, tr.hi)
    if w.size != tr.nvar:
        raise ValueError(f"initial vector has {w.size} entries, expected {tr.nvar}")
    mu = np.zeros(tr.ncon) if mu0 is None else np.asarray(mu0, dtype=float).copy()
    rho = cfg.rho0
    inner_total = 0
    history = []
    stat = np.inf
    viol = np.inf
    delta_hint = 0.0

    def merit(v):
        c = tr.constraints(v)
        return tr.objective(v) + mu @ c + 0.5 * rho * c @ c, c

    for outer in range(1, cfg.max_outer + 1):
        val, c = merit(w)
        for _ in range(cfg.max_inner):
            Jc = tr.constraint_jacobian(w)
            y = mu + rho * c
            g = tr.objective_grad(w) + Jc.T @ y
            pg = _projected_gradient(w, g, tr.lo, tr.hi)
            stat = float(np.max(np.abs(pg)))
            if stat <= 0.1 * cfg.stat_tol:
                break
            # second-order constraint terms use the current multipliers only; the
            # rho * c part vanishes at feasibility and would otherwise swamp the
            # curvature test far from it
            HL = tr.lagrangian_hessian(w, mu)
            H = HL + rho * (Jc.T @ Jc)
            shift_floor = 1e-8 * max(1.0, float(np.abs(HL.diagonal()).max()))
            active = ((w <= tr.lo) & (g > 0)) | ((w >= tr.hi) & (g < 0))
            free = np.flatnonzero(~active)
            Hf = H.tocsr()[free][:, free]
            lu, delta = _factor_pd(Hf, delta_hint, shift_floor)
            delta_hint = delta
            if delta > 0 and rho < cfg.rho_curvature:
                # negative curvature of the augmented Lagrangian: raise the
                # penalty before resorting to a diagonal shift
                rho = min(rho * cfg.rho_factor, cfg.rho_max)
                val, c = merit(w)
                continue
            d = np.zeros_like(w)
            d[free] = lu.solve(-g[free])
            slope = g @ d
            if slope >= 0:
                d = -pg
                slope = g @ d
            alpha = 1.0
            for _ in range(50):
                trial = np.clip(w + alpha * d, tr.lo, tr.hi)
                try:
                    val_t, c_t = merit(trial)
                except (ex.ExpressionDomainError, FloatingPointError):
                    val_t = np.inf
                if np.isfinite(val_t) and val_t <= val + 1e-4 * (g @ (trial - w)):
                    break
                alpha *= 0.5
            else:
                # no decrease is possible at this precision: accept the current point
                break
            inner_total += 1
            step_small = np.max(np.abs(trial - w)) <= 1e-15 * (1 + np.max(np.abs(w)))
            w, val, c = trial, val_t, c_t
            if step_small:
                break
        viol = float(np.max(np.abs(c))) if c.size else 0.0
        mu = mu + rho * c
        g_lag = tr.objective_grad(w) + tr.constraint_jacobian(w).T @ mu
        stat = float(np.max(np.abs(_projected_gradient(w, g_lag, tr.lo, tr.hi))))
        history.append({"outer": outer, "rho": rho, "violation": viol, "stationarity": stat, "objective": tr.objective(w)})
        if viol <= cfg.viol_tol and stat <= cfg.stat_tol:
            return NlpResult(True, w, mu, tr.objective(w), viol, stat, outer, inner_total, "converged", history)
        rho = min(rho * cfg.rho_factor, cfg.rho_max)
    return NlpResult(False, w, mu, tr.objective(w), viol, stat, cfg.max_outer, inner_total, "outer iteration cap", history)


# ---------------------------------------------------------------------------
# initializations


def _ramp_length(N: int) -> int:
    return max(1, N // 20)


def _apply_ramps(tr: Transcription, X: np.ndarray) -> np.ndarray:
    spec = tr.p.boundary
    N = tr.N
    k = _ramp_length(N)
    X = X.copy()
    if hasattr(spec, "x0"):
        target = X[k].copy()
        for i in range(k):
            X[i] = spec.x0 + (i / k) * (target - spec.x0)
    if isinstance(spec, FixedFixed):
        target = X[N - k].copy()
        for i in range(k):
            X[N - i] = spec.x1 + (i / k) * (target - spec.x1)
    return X


def init_turnpike(tr: Transcription, e: StaticExtremal) -> tuple[np.ndarray, np.ndarray]:
    """Turnpike values at every node with linear ramps to the boundary data.

    Returns the decision vector and matching initial multipliers.
    """
    X = np.tile(e.x, (tr.N + 1, 1))
    U = np.tile(np.clip(e.u, tr.p.lo, tr.p.hi), (tr.N + 1, 1))
    X = _apply_ramps(tr, X)
    mu = np.zeros(tr.ncon)
    mu[: tr.n_defect] = np.tile(e.lam, tr.N)
    return tr.pack(X, U), mu


def init_orbit(tr: Transcription, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Circular orbit (R sin t, R cos t) with zero control, ramped to the boundary data."""
    if tr.n != 2:
        raise ValueError("orbit initialization needs a planar state")
    X = np.column_stack([radius * np.sin(tr.t), radius * np.cos(tr.t)])
    U = np.zeros((tr.N + 1, tr.m))
    X = _apply_ramps(tr, X)
    return tr.pack(X, U), np.zeros(tr.ncon)


def costate_from_multipliers(tr: Transcription, mu: np.ndarray) -> np.ndarray:
    """Node costates (lambda0 = -1) from the defect multipliers.

    The trapezoidal multipliers approximate the costate at interval
    midpoints with factor +1; nodes take the average of adjacent intervals.
    """
    M = mu[: tr.n_defect].reshape(tr.N, tr.n)
    lam = np.empty((tr.N + 1, tr.n))
    lam[1:-1] = 0.5 * (M[:-1] + M[1:])
    lam[0] = 1.5 * M[0] - 0.5 * M[1]
    lam[-1] = 1.5 * M[-1] - 0.5 * M[-2]
    return lam


def _endpoint_controls(tr: Transcription, X: np.ndarray, U: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Replace the first and last node controls by the Hamiltonian maximizer.

    The decision controls at the two end nodes pair with half-interval
    multipliers and are only first-order accurate; the node costates are
    second-order, so the pointwise maximizer restores the order there.
    """
    U = U.copy()
    for i in (0, tr.N):
        try:
            U[i] = control_from_costate(tr.p, X[i], lam[i], U[i])
        except (ShootingError, ex.ExpressionError, ZeroDivisionError):
            pass
    return U


def to_trajectory(tr: Transcription, res: NlpResult) -> Trajectory:
    X, U = tr.unpack(res.w)
    lam = costate_from_multipliers(tr, res.multipliers)
    return Trajectory(
        t=tr.t.copy(),
        x=X.copy(),
        u=_endpoint_controls(tr, X, U, lam),
        lam=lam,
        method="direct",
        lambda0=-1.0,
        meta={
            "cost": res.objective,
            "converged": res.converged,
            "max_violation": res.max_violation,
            "stationarity": res.stationarity,
            "outer_iterations": res.outer_iterations,
            "inner_iterations": res.inner_iterations,
            "N": tr.N,
        },
    )


def solve_direct(
    p: ControlProblem,
    T: float,
    turnpike: StaticExtremal | None = None,
    N: int | None = None,
    init: str = "turnpike",
    radius: float | None = None,
    cfg: AlConfig = AlConfig(),
) -> tuple[NlpResult, Trajectory]:
    """Transcribe, initialize and solve; returns the NLP result and its trajectory."""
    tr = Transcription(p, T, N)
    if init == "turnpike":
        if turnpike is None:
            raise ValueError("turnpike initialization needs a static extremal")
        w0, mu0 = init_turnpike(tr, turnpike)
    elif init in ("circle", "orbit"):
        w0, mu0 = init_orbit(tr, radius if radius is not None else float(p.options.get("orbit_radius", 3.0)))
    else:
        raise ValueError(f"unknown initialization {init!r}")
    res = solve_al(tr, w0, mu0, cfg)
    return res, to_trajectory(tr, res)
