"""Linear-quadratic turnpike machinery.

Problem::

    x' = A x + B u,   x(0) = x0,  x(T) = x1,
    min  int_0^T (x - xd)' Q (x - xd) + (u - ud)' U (u - ud) dt

Costates here follow the lambda0 = -1/2 normalization, so that
``u = ud + U^{-1} B' lambda`` and the extremal system reads
``z' = M z + (B ud; -Q xd)`` with ``M = [[A, B U^{-1} B'], [Q, -A']]``.
:func:`to_unit_costate` converts to the lambda0 = -1 convention used by the
nonlinear solvers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .trajectory import Trajectory

HYPERBOLICITY_TOL = 1e-9
COND_LIMIT = 1e12


class LqError(ValueError):
    pass


class HyperbolicityError(LqError):
    def __init__(self, eigenvalue: complex):
        super().__init__(f"eigenvalue {eigenvalue:.6g} is within {HYPERBOLICITY_TOL} of the imaginary axis")
        self.eigenvalue = eigenvalue


def _mat(a, rows: int | None = None) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(a, dtype=float))
    if rows is not None and arr.shape[0] != rows and arr.shape[1] == rows and arr.shape[0] == 1:
        arr = arr.T
    return arr


@dataclass(frozen=True)
class LqProblem:
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    U: np.ndarray
    xd: np.ndarray
    ud: np.ndarray

    def __post_init__(self):
        A = _mat(self.A)
        n = A.shape[0]
        B = _mat(self.B, rows=n)
        m = B.shape[1]
        Q = _mat(self.Q)
        U = _mat(self.U)
        xd = np.asarray(self.xd, dtype=float).reshape(-1)
        ud = np.asarray(self.ud, dtype=float).reshape(-1)
        if A.shape != (n, n) or B.shape[0] != n or Q.shape != (n, n) or U.shape != (m, m):
            raise LqError(f"inconsistent dimensions A{A.shape} B{B.shape} Q{Q.shape} U{U.shape}")
        if xd.size != n or ud.size != m:
            raise LqError("xd/ud dimensions do not match A/B")
        for name, S in (("Q", Q), ("U", U)):
            if np.max(np.abs(S - S.T)) > 1e-12:
                raise LqError(f"{name} is not symmetric")
            if np.min(np.linalg.eigvalsh(S)) <= 0:
                raise LqError(f"{name} is not positive definite")
        for name, val in (("A", A), ("B", B), ("Q", Q), ("U", U), ("xd", xd), ("ud", ud)):
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def running_cost(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """f0 on sample rows ``x`` (N, n) and ``u`` (N, m)."""
        dx = np.atleast_2d(x) - self.xd
        du = np.atleast_2d(u) - self.ud
        return np.einsum("ij,jk,ik->i", dx, self.Q, dx) + np.einsum("ij,jk,ik->i", du, self.U, du)


def to_unit_costate(lam):
    """Costate in the lambda0 = -1 convention from the lambda0 = -1/2 one."""
    return 2.0 * np.asarray(lam, dtype=float)


# ---------------------------------------------------------------------------
# controllability


def controllability_matrix(A, B) -> np.ndarray:
    A = _mat(A)
    B = _mat(B, rows=A.shape[0])
    blocks = [B]
    for _ in range(A.shape[0] - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


def kalman_rank(A, B) -> int:
    """Numerical rank of (B, AB, ..., A^{n-1}B), threshold 1e-10 * largest singular value."""
    s = np.linalg.svd(controllability_matrix(A, B), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > 1e-10 * s[0]))


def pbh_test(A, B) -> bool:
    """Hautus test: no eigenvector of A' lies in the kernel of B'.

    Eigenvalues are clustered so that repeated eigenvalues are tested on
    their whole eigenspace, not on one arbitrary eigenvector basis.
    """
    A = _mat(A)
    n = A.shape[0]
    B = _mat(B, rows=n)
    eig = np.linalg.eigvals(A.T)  # LinAlgError propagates
    scale = max(1.0, np.linalg.norm(A, 2))
    clusters: list[complex] = []
    for ev in eig:
        if all(abs(ev - c) > 1e-6 * scale for c in clusters):
            clusters.append(ev)
    for xi in clusters:
        mat = A.T.astype(complex) - xi * np.eye(n)
        _, s, vh = np.linalg.svd(mat)
        null = vh[s <= 1e-7 * scale].conj().T
        if null.shape[1] == 0:
            null = vh[-1:].conj().T
        sv = np.linalg.svd(B.T @ null, compute_uv=False)
        rank_needed = null.shape[1]
        if sv.size < rank_needed or np.min(sv) <= 1e-10:
            return False
    return True


# ---------------------------------------------------------------------------
# Hamiltonian matrix, turnpike and splitting


@dataclass(frozen=True)
class HamiltonianMatrix:
    M: np.ndarray
    n: int


def _spd_inverse(U: np.ndarray) -> np.ndarray:
    if np.linalg.cond(U) > COND_LIMIT:
        raise LqError("U is numerically singular")
    c, low = sla.cho_factor(U)
    return sla.cho_solve((c, low), np.eye(U.shape[0]))


def build_M(p: LqProblem) -> HamiltonianMatrix:
    Uinv = _spd_inverse(p.U)
    M = np.block([[p.A, p.B @ Uinv @ p.B.T], [p.Q, -p.A.T]])
    return HamiltonianMatrix(M, p.n)


@dataclass(frozen=True)
class LqTurnpike:
    x: np.ndarray
    lam: np.ndarray  # lambda0 = -1/2
    u: np.ndarray
    residual: float


def lq_turnpike(p: LqProblem) -> LqTurnpike:
    """Equilibrium of the extremal system, i.e. the static LQ optimum."""
    Mh = build_M(p)
    eig = np.linalg.eigvals(Mh.M)
    if np.min(np.abs(eig)) < 1e-9:
        raise LqError("M is singular (Kalman condition violated or degenerate data)")
    rhs = -np.concatenate([p.B @ p.ud, -p.Q @ p.xd])
    z = np.linalg.solve(Mh.M, rhs)
    res = float(np.linalg.norm(Mh.M @ z - rhs))
    x, lam = z[: p.n], z[p.n :]
    u = p.ud + _spd_inverse(p.U) @ p.B.T @ lam
    return LqTurnpike(x=x, lam=lam, u=u, residual=res)


@dataclass(frozen=True)
class Splitting:
    P: np.ndarray
    M1: np.ndarray
    M2: np.ndarray
    nu: float
    eigenvalues: np.ndarray = field(repr=False)


def split(Mh: HamiltonianMatrix | np.ndarray) -> Splitting:
    """Stable/unstable block diagonalization ``P^{-1} M P = diag(M1, M2)``.

    Ordered real Schur form followed by a Sylvester solve that removes the
    off-diagonal block.
    """
    M = Mh.M if isinstance(Mh, HamiltonianMatrix) else np.asarray(Mh, dtype=float)
    eig = np.linalg.eigvals(M)
    bad = eig[np.abs(eig.real) < HYPERBOLICITY_TOL]
    if bad.size:
        raise HyperbolicityError(complex(bad[0]))
    T, Z, k = sla.schur(M, output="real", sort="lhp")
    T11, T12, T22 = T[:k, :k], T[:k, k:], T[k:, k:]
    X = sla.solve_sylvester(T11, -T22, -T12)
    size = M.shape[0]
    Y = np.eye(size)
    Y[:k, k:] = X
    P = Z @ Y
    return Splitting(P=P, M1=T11, M2=T22, nu=float(np.min(np.abs(eig.real))), eigenvalues=eig)


def expm(a: np.ndarray) -> np.ndarray:
    """Matrix exponential (scaling and squaring with Pade approximant); batched over leading axes."""
    return sla.expm(a)


# ---------------------------------------------------------------------------
# closed-form two-point boundary value problem


class LqBvp:
    """Exact solution of the LQ extremal BVP with x(0) = x0, x(T) = x1."""

    def __init__(self, p: LqProblem, x0, x1, T: float):
        if T <= 0:
            raise LqError("T must be positive")
        self.p = p
        self.T = float(T)
        self.x0 = np.asarray(x0, dtype=float).reshape(-1)
        self.x1 = np.asarray(x1, dtype=float).reshape(-1)
        self.turnpike = lq_turnpike(p)
        self.split = split(build_M(p))
        n = p.n
        if self.split.M1.shape[0] != n:
            raise LqError("stable subspace dimension differs from n")
        P = self.split.P
        Pxv, Pxw = P[:n, :n], P[:n, n:]
        E1 = expm(self.split.M1 * self.T)
        E2 = expm(-self.split.M2 * self.T)
        K = np.block([[Pxv, Pxw @ E2], [Pxv @ E1, Pxw]])
        if np.linalg.cond(K) > COND_LIMIT:
            raise LqError("boundary linear system is singular or ill-conditioned")
        rhs = np.concatenate([self.x0 - self.turnpike.x, self.x1 - self.turnpike.x])
        sol = np.linalg.solve(K, rhs)
        self.v0, self.wT = sol[:n], sol[n:]
        self._Uinv_Bt = _spd_inverse(p.U) @ p.B.T

    def state(self, t) -> tuple[np.ndarray, np.ndarray]:
        """(x, lambda) at times ``t``; arrays of shape (len(t), n)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        n = self.p.n
        v = expm(self.split.M1[None] * t[:, None, None]) @ self.v0
        w = expm(self.split.M2[None] * (t - self.T)[:, None, None]) @ self.wT
        z = np.concatenate([v, w], axis=1) @ self.split.P.T
        x = z[:, :n] + self.turnpike.x
        lam = z[:, n:] + self.turnpike.lam
        return x, lam

    def derivative(self, t) -> np.ndarray:
        """Exact time derivative of (x, lambda) from the splitting; shape (len(t), 2n)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        v = expm(self.split.M1[None] * t[:, None, None]) @ self.v0
        w = expm(self.split.M2[None] * (t - self.T)[:, None, None]) @ self.wT
        return np.concatenate([v @ self.split.M1.T, w @ self.split.M2.T], axis=1) @ self.split.P.T

    def control(self, lam: np.ndarray) -> np.ndarray:
        return self.p.ud + np.atleast_2d(lam) @ self._Uinv_Bt.T

    def cost(self, panels: int | None = None, order: int = 8) -> float:
        """Running cost by composite Gauss-Legendre quadrature."""
        panels = panels or max(64, int(np.ceil(8 * self.T)))
        nodes, weights = np.polynomial.legendre.leggauss(order)
        edges = np.linspace(0.0, self.T, panels + 1)
        half = 0.5 * np.diff(edges)
        mid = 0.5 * (edges[1:] + edges[:-1])
        t = (mid[:, None] + half[:, None] * nodes[None, :]).reshape(-1)
        w = (half[:, None] * weights[None, :]).reshape(-1)
        x, lam = self.state(t)
        return float(np.sum(w * self.p.running_cost(x, self.control(lam))))

    def sample(self, samples: int) -> Trajectory:
        t = np.linspace(0.0, self.T, samples)
        x, lam = self.state(t)
        # pin exact boundary values (removes roundoff of the reconstruction)
        x[0], x[-1] = self.x0, self.x1
        u = self.control(lam)
        return Trajectory(
            t=t,
            x=x,
            u=u,
            lam=lam,
            method="lq",
            lambda0=-0.5,
            meta={
                "cost": self.cost(),
                "cost_trapezoid": float(np.trapezoid(self.p.running_cost(x, u), t)),
                "nu": self.split.nu,
            },
        )


def lq_bvp_closed_form(p: LqProblem, x0, x1, T: float, samples: int = 1001) -> Trajectory:
    """Optimal trajectory of the LQ problem from the hyperbolic splitting."""
    return LqBvp(p, x0, x1, T).sample(samples)


def extremal_residual(bvp: LqBvp, t: np.ndarray, h: float | None = None, exact: bool = False) -> float:
    """Max norm of z' - (M z + c) along ``t``.

    z' by fourth-order central differences, or from the splitting when
    ``exact``. The default step balances truncation, about (h rho)^4 rho |z|,
    against roundoff, about eps |z| / h, where rho is the spectral radius of M.
    """
    t = np.asarray(t, dtype=float)
    Mh = build_M(bvp.p)
    c = np.concatenate([bvp.p.B @ bvp.p.ud, -bvp.p.Q @ bvp.p.xd])

    def z(tt):
        x, lam = bvp.state(tt)
        return np.concatenate([x, lam], axis=1)

    if exact:
        dz = bvp.derivative(t)
    else:
        if h is None:
            h = 2e-3 / max(1.0, float(np.abs(bvp.split.eigenvalues).max()))
        dz = (-z(t + 2 * h) + 8 * z(t + h) - 8 * z(t - h) + z(t - 2 * h)) / (12 * h)
    res = dz - (z(t) @ Mh.M.T + c)
    return float(np.max(np.abs(res)))


# ---------------------------------------------------------------------------
# minimum-energy steering and the three-phase strategy


def gramian(A, B, tau: float, panels: int = 16, order: int = 12) -> np.ndarray:
    """int_0^tau e^{As} B B' e^{A's} ds by composite Gauss-Legendre quadrature."""
    A = _mat(A)
    B = _mat(B, rows=A.shape[0])
    nodes, weights = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(0.0, tau, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    s = (mid[:, None] + half[:, None] * nodes[None, :]).reshape(-1)
    w = (half[:, None] * weights[None, :]).reshape(-1)
    E = expm(A[None] * s[:, None, None]) @ B
    return np.einsum("k,kij,klj->il", w, E, E)


def steering_law(A, B, x_from, x_to, tau: float):
    """Minimum-energy open-loop control ``u(t)`` steering x_from to x_to in time tau."""
    A = _mat(A)
    B = _mat(B, rows=A.shape[0])
    if tau <= 0:
        raise LqError("tau must be positive")
    G = gramian(A, B, tau)
    if np.linalg.cond(G) > COND_LIMIT:
        raise LqError("controllability Gramian is ill-conditioned")
    gap = np.asarray(x_to, dtype=float) - expm(A * tau) @ np.asarray(x_from, dtype=float)
    eta = np.linalg.solve(G, gap)

    def u(t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return (expm(A.T[None] * (tau - t)[:, None, None]) @ eta) @ B

    return u


def min_energy_steer(A, B, x_from, x_to, tau: float, samples: int = 101) -> np.ndarray:
    """Samples (samples, m) of the minimum-energy control on ``linspace(0, tau, samples)``."""
    return steering_law(A, B, x_from, x_to, tau)(np.linspace(0.0, tau, samples))


def _rk4_cost(A, B, x0, u_of_t, f0, tau: float, steps: int):
    """RK4 on (x, accumulated cost); returns final state and cost."""
    h = tau / steps
    x = np.asarray(x0, dtype=float).copy()
    J = 0.0

    def rhs(t, xx):
        u = u_of_t(t)[0]
        return A @ xx + B @ u, f0(xx, u)

    t = 0.0
    for _ in range(steps):
        k1x, k1c = rhs(t, x)
        k2x, k2c = rhs(t + h / 2, x + h / 2 * k1x)
        k3x, k3c = rhs(t + h / 2, x + h / 2 * k2x)
        k4x, k4c = rhs(t + h, x + h * k3x)
        x = x + h / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
        J += h / 6 * (k1c + 2 * k2c + 2 * k3c + k4c)
        t += h
    return x, J


def quasi_optimal_cost(p: LqProblem, x0, x1, T: float, steps: int = 400) -> tuple[float, float]:
    """Cost of the steer / hold / steer strategy and of the optimal control.

    Both transient arcs last one time unit and use minimum-energy steering of
    the deviation from the turnpike, so they reduce to holding (x̄, ū) when the
    endpoint already sits on the turnpike.
    """
    if T <= 2:
        raise LqError("three-phase strategy needs T > 2")
    tp = lq_turnpike(p)
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)

    def f0(x, u):
        return float(p.running_cost(x[None], u[None])[0])

    def phase(dev_from, dev_to):
        law = steering_law(p.A, p.B, dev_from, dev_to, 1.0)
        _, J = _rk4_cost(p.A, p.B, tp.x + dev_from, lambda t: tp.u + law(t), f0, 1.0, steps)
        return J

    cost = phase(x0 - tp.x, np.zeros(p.n))
    cost += (T - 2.0) * f0(tp.x, tp.u)
    cost += phase(np.zeros(p.n), x1 - tp.x)
    optimal = LqBvp(p, x0, x1, T).cost()
    return float(cost), float(optimal)
