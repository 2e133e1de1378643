import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from turnpike import problems
from turnpike.expr import VectorField
from turnpike.lq_core import LqBvp, LqProblem, build_M, expm, lq_bvp_closed_form
from turnpike.ocp_model import ControlProblem, FixedConstrained, FixedFixed, FixedFree, Periodic, static_from_lq
from turnpike.bvp_shooting import (
    ExtremalPoint,
    IntegrationBlowUp,
    ShootingConfig,
    UnsupportedControlStructure,
    boundary_residual,
    control_from_costate,
    extremal_rhs,
    hamiltonian_drift,
    integrate,
    newton_fd,
    shoot_classic,
    shoot_midpoint,
)
from turnpike.trajectory import Trajectory

DRIFT_TOL = 1e-5


def _assert_converged_quality(p, res):
    assert res.converged and res.residual_norm <= 1e-9
    assert res.h_drift is not None and res.h_drift <= DRIFT_TOL
    assert hamiltonian_drift(p, res.trajectory) <= DRIFT_TOL
    assert res.clamp_events == 0


# ---------------------------------------------------------------------------
# control maximization and the extremal vector field


def test_control_exa_closed_form(exa):
    for lam in ([0.0, 0.0], [1.0, 0.7], [-3.0, -4.2]):
        assert control_from_costate(exa, [0.3, -1.0], lam)[0] == pytest.approx(lam[1] / 2, abs=1e-12)


def test_control_cost_offset_and_clamp():
    p = ControlProblem.from_text(["u1"], "(u1 - 0.3)^2", 1, 1, FixedFree([0.0]))
    assert control_from_costate(p, [0.0], [0.0])[0] == pytest.approx(0.3, abs=1e-12)
    boxed = ControlProblem.from_text(["u1"], "(u1 - 0.3)^2", 1, 1, FixedFree([0.0]), lo=[-0.1], hi=[0.1])
    assert control_from_costate(boxed, [0.0], [0.0])[0] == pytest.approx(0.1, abs=1e-15)


def test_control_nonlinear_maximizer():
    p = ControlProblem.from_text(["sin(u1)"], "x1^2 + u1^2", 1, 1, FixedFree([0.0]))
    lam = 0.8
    u = control_from_costate(p, [0.0], [lam])[0]
    assert lam * np.cos(u) - 2 * u == pytest.approx(0.0, abs=1e-12)


def test_control_rejects_convex_hamiltonian():
    p = ControlProblem.from_text(["u1"], "x1^2 - u1^2", 1, 1, FixedFree([0.0]))
    with pytest.raises(UnsupportedControlStructure):
        control_from_costate(p, [0.0], [0.1])


def test_rhs_vanishes_at_turnpike(exa_extremals, exa):
    for e in exa_extremals:
        assert np.abs(extremal_rhs(exa, ExtremalPoint(e.x, e.lam), e.u)).max() <= 1e-9


def test_rhs_matches_lq_matrix(lq_scalar):
    e = static_from_lq(lq_scalar)
    M = build_M(lq_scalar.lq).M
    rng = np.random.default_rng(0)
    for _ in range(10):
        z = rng.normal(size=2)
        # (x, lambda) with lambda in the lambda0 = -1 convention is (x, 2 lambda_half)
        dz_half = M @ (np.array([z[0], z[1] / 2]) - np.array([e.x[0], e.lam[0] / 2]))
        expected = np.array([dz_half[0], 2 * dz_half[1]])
        np.testing.assert_allclose(extremal_rhs(lq_scalar, z), expected, atol=1e-8)


def test_rhs_zero_costate_exa(exa):
    x = np.array([0.4, -0.3])
    rhs = extremal_rhs(exa, np.concatenate([x, [0.0, 0.0]]))
    np.testing.assert_allclose(rhs[:2], exa.dynamics(x, [0.0]), atol=1e-14)


# ---------------------------------------------------------------------------
# integration


def test_integrate_at_equilibrium_is_constant(exa_extremals, exa):
    e = exa_extremals[0]
    path = integrate(exa, ExtremalPoint(e.x, e.lam), 0.0, 2.0, 200, e.u)
    z, _ = path.as_float()
    assert np.abs(z - np.concatenate([e.x, e.lam])).max() <= 1e-9


def _lq_flow_exact(lq, z0, t):
    """Oracle: z(t) = zbar + expm(M t)(z0 - zbar) in the lambda0 = -1/2 convention."""
    from turnpike.lq_core import lq_turnpike

    tp = lq_turnpike(lq)
    zbar = np.concatenate([tp.x, tp.lam])
    return zbar + expm(build_M(lq).M * t) @ (z0 - zbar)


def test_integrate_matches_matrix_exponential(lq_scalar):
    z0 = np.array([0.0, 0.3])  # lambda0 = -1 convention
    path = integrate(lq_scalar, z0, 0.0, 2.0, 200)
    z, _ = path.as_float()
    exact = _lq_flow_exact(lq_scalar.lq, np.array([0.0, 0.15]), 2.0)
    np.testing.assert_allclose(z[-1], [exact[0], 2 * exact[1]], atol=1e-8)


def _near_turnpike(e):
    return np.concatenate([e.x, e.lam]) + np.array([0.05, -0.05, 0.1, 0.02])


def test_rk4_fourth_order(exa, exa_extremals):
    z0 = _near_turnpike(exa_extremals[0])
    ref = integrate(exa, z0, 0.0, 0.5, 3200).as_float()[0][-1]
    errs = [np.abs(integrate(exa, z0, 0.0, 0.5, s).as_float()[0][-1] - ref).max() for s in (10, 20)]
    assert errs[0] / errs[1] == pytest.approx(16.0, rel=0.2)


@pytest.mark.parametrize("name, z0", [("lq-scalar", [0.2, 1.5]), ("circle", [0.5, 0.3, 0.2, -0.4])])
def test_integration_reversible(name, z0):
    p = problems.get(name)
    z0 = np.asarray(z0)
    fwd = integrate(p, z0, 0.0, 1.0, 100).as_float()[0][-1]
    back = integrate(p, fwd, 1.0, 0.0, 100).as_float()[0][-1]
    assert np.abs(back - z0).max() <= 1e-8


def test_integration_blow_up_reports_time(exa):
    with pytest.raises(IntegrationBlowUp) as info:
        integrate(exa, np.array([1.0, 2.5, 0.0, 0.0]), 0.0, 5.0, 500)
    assert 0.0 < info.value.time < 1.0


def test_integrate_rejects_zero_steps(exa):
    with pytest.raises(ValueError):
        integrate(exa, np.zeros(4), 0.0, 1.0, 0)


# ---------------------------------------------------------------------------
# boundary residuals


def test_boundary_residual_catalogue(lq_scalar):
    traj = lq_bvp_closed_form(lq_scalar.lq, [0.0], [1.0], 5.0, 101)
    np.testing.assert_array_equal(boundary_residual(traj, FixedFixed([0.0], [1.0])), [0.0, 0.0])
    t = np.linspace(0, 1, 5)
    const = Trajectory(t=t, x=np.full((5, 1), 0.5), u=np.full((5, 1), 0.5), lam=np.full((5, 1), 1.0), method="test")
    np.testing.assert_array_equal(boundary_residual(const, Periodic()), [0.0, 0.0])
    free = Trajectory(t=t, x=np.full((5, 1), 0.5), u=np.zeros((5, 1)), lam=np.zeros((5, 1)), method="test")
    assert boundary_residual(free, FixedFree([0.5]))[1] == 0.0
    g = VectorField.parse(["x1 - 0.5"], 1, 0)
    np.testing.assert_allclose(boundary_residual(free, FixedConstrained([0.5], g), gamma=[0.0]), [0.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        boundary_residual(free, FixedConstrained([0.5], g))


# ---------------------------------------------------------------------------
# Newton engine


def test_newton_examples():
    res = newton_fd(lambda y: [y[0] - 3.0], [0.0])
    assert res.converged and res.iterations == 1 and res.root[0] == pytest.approx(3.0)
    res = newton_fd(lambda y: [y[0] ** 2 - 4.0], [3.0], ShootingConfig(tol=1e-13))
    assert abs(res.root[0] - 2.0) <= 1e-12


def test_newton_solves_lq_static_kkt(lq_scalar):
    """Unknowns (x, lambda) with u = lambda / 2: dynamics -x + u = 0 and H_x = -lambda - 2 (x - 1) = 0."""
    res = newton_fd(lambda y: [-y[0] + y[1] / 2, -y[1] - 2 * (y[0] - 1)], [0.0, 0.0])
    e = static_from_lq(lq_scalar)
    np.testing.assert_allclose(res.root, [e.x[0], e.lam[0]], atol=1e-9)


# ---------------------------------------------------------------------------
# shooting on the scalar LQ problem


def _closed_form_unit(lq, T, t):
    x, lam = LqBvp(lq, [0.0], [1.0], T).state(t)
    return x, 2 * lam


def test_classic_scalar_matches_closed_form(lq_scalar):
    res = shoot_classic(lq_scalar.with_boundary(FixedFixed([0.0], [1.0])), 5.0, [0.0])
    _assert_converged_quality(lq_scalar, res)
    x, lam = _closed_form_unit(lq_scalar.lq, 5.0, res.trajectory.t)
    assert np.abs(res.trajectory.x - x).max() <= 1e-6
    assert np.abs(res.trajectory.lam - lam).max() <= 1e-6


@pytest.mark.parametrize("T", [5.0, 10.0, 20.0, 40.0])
def test_midpoint_scalar_matches_closed_form(lq_scalar, T):
    e = static_from_lq(lq_scalar)
    res = shoot_midpoint(lq_scalar, T, e)
    _assert_converged_quality(lq_scalar, res)
    x, lam = _closed_form_unit(lq_scalar.lq, T, res.trajectory.t)
    assert np.abs(res.trajectory.x - x).max() <= 1e-6
    assert np.abs(res.trajectory.lam - lam).max() <= 1e-6
    xm, lm = _closed_form_unit(lq_scalar.lq, T, [T / 2])
    exact = np.hypot(xm[0, 0] - e.x[0], lm[0, 0] - e.lam[0])
    assert res.midpoint_distance == pytest.approx(exact, abs=1e-6)


def test_midpoint_and_classic_agree(lq_scalar):
    e = static_from_lq(lq_scalar)
    a = shoot_midpoint(lq_scalar, 6.0, e)
    b = shoot_classic(lq_scalar, 6.0, [0.0])
    assert a.converged and b.converged
    np.testing.assert_allclose(a.trajectory.t, b.trajectory.t, atol=1e-12)
    assert np.abs(a.trajectory.x - b.trajectory.x).max() <= 1e-6
    assert np.abs(a.trajectory.lam - b.trajectory.lam).max() <= 1e-6


def test_classic_from_equilibrium_data(lq_scalar):
    e = static_from_lq(lq_scalar)
    p = lq_scalar.with_boundary(FixedFixed(e.x, e.x))
    res = shoot_classic(p, 10.0, e.lam)
    assert res.converged and res.iterations <= 2


def test_fixed_free_transversality(lq_scalar):
    e = static_from_lq(lq_scalar)
    p = lq_scalar.with_boundary(FixedFree([0.0]))
    res = shoot_midpoint(p, 8.0, e)
    _assert_converged_quality(p, res)
    assert abs(res.trajectory.lam[-1, 0]) <= 1e-9


def test_fixed_constrained_multiplier():
    """x' = u, min int x^2 + u^2, g(x(T)) = x(T) - 1: lambda(T) = gamma g'(x(T)) = gamma."""
    p = ControlProblem.from_text(["u1"], "x1^2 + u1^2", 1, 1, FixedConstrained([0.0], VectorField.parse(["x1 - 1"], 1, 0)))
    e = static_from_lq(ControlProblem.from_lq(LqProblem([[0.0]], [[1.0]], [[1.0]], [[1.0]], [0.0], [0.0]), FixedFree([0.0])))
    res = shoot_midpoint(p, 4.0, e)
    assert res.converged
    assert res.trajectory.x[-1, 0] == pytest.approx(1.0, abs=1e-9)
    assert res.gamma is not None and res.gamma[0] == pytest.approx(res.trajectory.lam[-1, 0], abs=1e-9)


def test_periodic_midpoint_stays_on_turnpike(lq_scalar):
    e = static_from_lq(lq_scalar)
    p = lq_scalar.with_boundary(Periodic())
    res = shoot_midpoint(p, 6.0, e)
    assert res.converged
    assert np.abs(res.trajectory.x - e.x).max() <= 1e-8


def test_classic_rejects_periodic(lq_scalar):
    with pytest.raises(ValueError):
        shoot_classic(lq_scalar.with_boundary(Periodic()), 5.0, [0.0])


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(4.0, 30.0))
def test_midpoint_lq_random_boundary(x0, x1, T):
    p = problems.lq_scalar().with_boundary(FixedFixed([x0], [x1]))
    e = static_from_lq(p)
    res = shoot_midpoint(p, T, e)
    assert res.converged
    assert res.h_drift <= DRIFT_TOL
    x, _ = LqBvp(p.lq, [x0], [x1], T).state(res.trajectory.t)
    assert np.abs(res.trajectory.x - x).max() <= 1e-6


# ---------------------------------------------------------------------------
# the nonlinear example


def test_classic_exa_mostly_fails(exa):
    rng = np.random.default_rng(20)
    failures = 0
    for _ in range(20):
        res = shoot_classic(exa, 20.0, rng.normal(scale=5.0, size=2))
        failures += not res.converged
        if res.converged:
            _assert_converged_quality(exa, res)
    assert failures > 10


def test_midpoint_exa_near_turnpike_short_horizon(exa, exa_extremals):
    """Boundary data 1e-2 from the global turnpike and T = 1 stay inside the Newton basin."""
    e = exa_extremals[0]
    p = exa.with_boundary(FixedFixed(e.x + 0.01, e.x - 0.01))
    res = shoot_midpoint(p, 1.0, e)
    _assert_converged_quality(p, res)


def test_shooting_config_validation():
    with pytest.raises(ValueError):
        ShootingConfig(variant="multiple")
    with pytest.raises(ValueError):
        ShootingConfig(steps_per_unit=0)


def test_extremal_point_validation():
    with pytest.raises(ValueError):
        ExtremalPoint([0.0, 1.0], [0.0])
    with pytest.raises(ValueError):
        ExtremalPoint([np.nan], [0.0])
