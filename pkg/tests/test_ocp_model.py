import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import EXA_GLOBAL, EXA_LOC1, EXA_LOC2, random_lq
from turnpike import problems
from turnpike.expr import VectorField
from turnpike.lq_core import LqProblem, lq_turnpike, to_unit_costate
from turnpike.ocp_model import (
    ControlProblem,
    FixedConstrained,
    FixedFixed,
    FixedFree,
    ModelError,
    Periodic,
    boundary_rank,
    check_assumptions,
    hamiltonian,
    kkt_residual,
    linearize,
    reduced_hessian,
    static_from_lq,
    static_multistart,
    static_newton,
)

EXA_BOX = ([-3.0, -3.0], [3.0, 3.0])


def _printed(d):
    return np.concatenate([d["x"], d["u"], d["lam"]])


def _found(e):
    return np.concatenate([e.x, e.u, e.lam])


# ---------------------------------------------------------------------------
# problem construction


def test_dimension_checks():
    with pytest.raises(ModelError):
        ControlProblem.from_text(["u1"], "x1^2", 2, 1, FixedFree([0.0, 0.0]))
    with pytest.raises(ModelError):
        ControlProblem.from_text(["u1"], "u1^2", 1, 1, FixedFree([0.0]), lo=[1.0], hi=[0.0])
    with pytest.raises(ModelError):
        ControlProblem.from_text(["u1"], "u1^2", 1, 1, FixedFixed([0.0], [1.0, 2.0]))
    g = VectorField.parse(["x1", "x1 - 1"], 1, 0)
    with pytest.raises(ModelError):
        ControlProblem.from_text(["u1"], "u1^2", 1, 1, FixedConstrained([0.0], g))


# ---------------------------------------------------------------------------
# Hamiltonian and KKT residual


def test_hamiltonian_examples(exa):
    p = ControlProblem.from_text(["u1"], "u1^2", 1, 1, FixedFree([0.0]))
    assert hamiltonian(p, [0.0], [1.0], -1.0, [0.5]) == pytest.approx(0.25)
    assert hamiltonian(exa, [0.3, -0.2], [0.0, 0.0], 0.0, [1.7]) == 0.0
    g = EXA_GLOBAL
    assert hamiltonian(exa, g["x"], g["lam"], -1.0, g["u"]) == pytest.approx(-0.98451, abs=1e-4)


def test_hamiltonian_rejects_positive_multiplier(exa):
    with pytest.raises(ModelError):
        hamiltonian(exa, [0, 0], [0, 0], 1.0, [0])


def test_kkt_residual_examples(exa, lq_scalar):
    g = EXA_GLOBAL
    assert np.linalg.norm(kkt_residual(exa, g["x"], g["u"], g["lam"])) <= 1e-4
    tp = lq_turnpike(lq_scalar.lq)
    assert np.linalg.norm(kkt_residual(lq_scalar, tp.x, tp.u, to_unit_costate(tp.lam))) <= 1e-10
    p = ControlProblem.from_text(["u1"], "x1^2 + u1^2", 1, 1, FixedFree([0.0]))
    assert np.all(kkt_residual(p, [0.0], [0.0], [0.0]) == 0.0)


# ---------------------------------------------------------------------------
# static problem


@pytest.mark.parametrize(
    "guess, printed, tol",
    [((2, 2, 0, 0, 0), EXA_GLOBAL, 1e-4), ((-2, -2, 0, 0, 0), EXA_LOC1, 1e-3), ((0, 0.5, 0, 0, 0), EXA_LOC2, 1e-4)],
)
def test_static_newton_exa(exa, guess, printed, tol):
    e = static_newton(exa, guess)
    assert e.accepted and e.kkt_residual_norm <= 1e-9
    np.testing.assert_allclose(_found(e), _printed(printed), atol=tol)


def test_static_newton_guess_size(exa):
    with pytest.raises(ModelError):
        static_newton(exa, [0.0, 0.0])


def test_multistart_exa(exa_extremals):
    assert len(exa_extremals) == 3
    costs = [e.f0_value for e in exa_extremals]
    assert costs == sorted(costs)
    np.testing.assert_allclose(_found(exa_extremals[0]), _printed(EXA_GLOBAL), atol=1e-4)
    np.testing.assert_allclose(_found(exa_extremals[1]), _printed(EXA_LOC2), atol=1e-4)
    np.testing.assert_allclose(_found(exa_extremals[2]), _printed(EXA_LOC1), atol=1e-3)
    for e in exa_extremals:
        assert e.kkt_residual_norm <= 1e-9
        assert e.lam[1] == pytest.approx(2 * e.u[0], abs=1e-12)


def test_multistart_is_deterministic(exa):
    a = static_multistart(exa, EXA_BOX, 32, 5)
    b = static_multistart(exa, EXA_BOX, 32, 5)
    assert [tuple(e.x) for e in a] == [tuple(e.x) for e in b]


def test_multistart_parallel_matches_sequential(exa):
    a = static_multistart(exa, EXA_BOX, 16, 3)
    b = static_multistart(exa, EXA_BOX, 16, 3, workers=2)
    assert [tuple(e.x) for e in a] == [tuple(e.x) for e in b]


def test_multistart_needs_starts(exa):
    with pytest.raises(ModelError):
        static_multistart(exa, EXA_BOX, 0, 0)


def _cubic_scan():
    """Oracle: dense scan of (s - 1)^2 + (4 s + alpha s^3)^2 on the equilibrium curve."""
    s = np.linspace(-3, 3, 600001)
    g = (s - 1) ** 2 + (4 * s + problems.CUBIC_ALPHA * s**3) ** 2
    idx = np.where((g[1:-1] < g[:-2]) & (g[1:-1] < g[2:]))[0] + 1
    return s[idx], g[idx]


def test_multistart_cubic(cubic_extremals):
    xs = sorted(float(e.x[0]) for e in cubic_extremals)
    assert len(xs) == 3
    np.testing.assert_allclose(xs, [-1.925, 0.059, 1.961], atol=5e-3)
    locs, vals = _cubic_scan()
    np.testing.assert_allclose(xs, locs, atol=1e-4)
    glob = cubic_extremals[:2]
    assert abs(glob[0].f0_value - glob[1].f0_value) <= 1e-3
    np.testing.assert_allclose(sorted(e.f0_value for e in cubic_extremals), sorted(vals), rtol=1e-8)


def test_boundary_touching_is_rejected():
    p = ControlProblem.from_text(["-x1 + u1"], "(x1 - 2)^2 + u1^2", 1, 1, FixedFree([0.0]), lo=[-1.0], hi=[1.0])
    e = static_newton(p, [1.0, 1.0, 0.0])
    assert not e.accepted
    assert static_multistart(p, ([-3.0], [3.0]), 8, 0) == []
    assert len(static_multistart(p, ([-3.0], [3.0]), 8, 0, include_rejected=True)) >= 1


# ---------------------------------------------------------------------------
# LQ consistency


def test_static_matches_lq_turnpike_random():
    rng = np.random.default_rng(17)
    for _ in range(20):
        lq = random_lq(rng, int(rng.integers(1, 4)), int(rng.integers(1, 3)))
        p = ControlProblem.from_lq(lq, FixedFree(np.zeros(lq.n)))
        tp = lq_turnpike(lq)
        e = static_newton(p, np.zeros(2 * lq.n + lq.m))
        np.testing.assert_allclose(e.x, tp.x, atol=1e-8)
        np.testing.assert_allclose(e.u, tp.u, atol=1e-8)
        np.testing.assert_allclose(e.lam, to_unit_costate(tp.lam), atol=1e-8)


def test_static_from_lq(lq_scalar):
    e = static_from_lq(lq_scalar)
    np.testing.assert_allclose([e.x[0], e.u[0], e.lam[0]], [0.5, 0.5, 1.0], atol=1e-12)


# ---------------------------------------------------------------------------
# linearization and assumptions


def test_linearize_lq_blocks():
    lq = LqProblem([[0.0, 1.0], [-2.0, 0.3]], [[0.0], [1.0]], [[2.0, 0.5], [0.5, 1.0]], [[3.0]], [1.0, 0.0], [0.0])
    p = ControlProblem.from_lq(lq, FixedFixed([0, 0], [1, 1]))
    e = static_from_lq(p)
    d = linearize(p, e)
    np.testing.assert_allclose(d.U, 2 * lq.U, atol=1e-12)
    np.testing.assert_allclose(d.W, 2 * lq.Q, atol=1e-12)
    np.testing.assert_allclose(d.Abar, lq.A, atol=1e-12)
    rep = check_assumptions(d, p, e.x)
    assert rep.positive_definite and rep.kalman and rep.all_pass


def test_linearize_exa_global(exa, exa_extremals):
    e = exa_extremals[0]
    d = linearize(exa, e)
    ybar = e.x[1]
    np.testing.assert_allclose(d.A, [[1.0, -1.0], [-4.0, 3 * ybar**2]], atol=1e-12)
    assert d.A[1, 1] == pytest.approx(11.8126, abs=1e-3)
    np.testing.assert_array_equal(d.B, [[0.0], [1.0]])
    np.testing.assert_allclose(d.Hxu, d.Hux.T, atol=1e-10)
    np.testing.assert_allclose(d.U, d.U.T, atol=1e-10)
    np.testing.assert_allclose(d.W, d.W.T, atol=1e-10)


def test_linearize_matches_finite_differences(exa, exa_extremals):
    e = exa_extremals[1]
    h = 1e-6
    J = np.column_stack([(exa.dynamics(e.x + h * v, e.u) - exa.dynamics(e.x - h * v, e.u)) / (2 * h) for v in np.eye(2)])
    np.testing.assert_allclose(linearize(exa, e).A, J, atol=1e-6)


def test_assumptions_exa(exa, exa_extremals):
    """U = 2 everywhere; W = diag(2, 2 - 6 lam2 y) since H_xx = diag(-2, 6 lam2 y - 2) and H_xu = 0."""
    for e in exa_extremals:
        rep = check_assumptions(linearize(exa, e), exa, e.x)
        assert rep.kalman and rep.regular_boundary and rep.nu is not None
        assert rep.u_min_eig == pytest.approx(2.0)
        assert rep.w_min_eig == pytest.approx(min(2.0, 2.0 - 6.0 * e.lam[1] * e.x[1]), abs=1e-10)
    glob, loc2, loc1 = exa_extremals
    assert check_assumptions(linearize(exa, loc2), exa, loc2.x).all_pass
    assert not check_assumptions(linearize(exa, glob), exa, glob.x).positive_definite
    assert not check_assumptions(linearize(exa, loc1), exa, loc1.x).positive_definite


def test_double_integrator_kalman():
    p = ControlProblem.from_text(["x2", "u1"], "x1^2 + u1^2", 2, 1, FixedFixed([0, 0], [0, 0]))
    e = static_newton(p, [0.1, 0.1, 0.1, 0, 0])
    d = linearize(p, e)
    np.testing.assert_array_equal(d.A, [[0, 1], [0, 0]])
    assert check_assumptions(d, p, e.x).kalman


def test_boundary_rank_catalogue():
    g = VectorField.parse(["x1 + x2 - 1"], 2, 0)
    assert boundary_rank(FixedFixed([0, 0], [1, 1]), np.zeros(2), 2) == (4, 4)
    assert boundary_rank(FixedFree([0, 0]), np.zeros(2), 2) == (2, 2)
    assert boundary_rank(FixedConstrained([0, 0], g), np.zeros(2), 2) == (3, 3)
    assert boundary_rank(Periodic(), np.zeros(2), 2) == (2, 2)
    degenerate = VectorField.parse(["x1^2"], 2, 0)
    assert boundary_rank(FixedConstrained([0, 0], degenerate), np.zeros(2), 2) == (2, 3)


def test_reduced_hessian_psd_where_assumptions_pass(exa, exa_extremals, cubic, cubic_extremals):
    for p, found in ((exa, exa_extremals), (cubic, cubic_extremals)):
        for e in found:
            if check_assumptions(linearize(p, e), p, e.x).all_pass:
                assert np.linalg.eigvalsh(reduced_hessian(p, e.x, e.u, e.lam)).min() >= -1e-8


def test_assumptions_invariant_under_state_relabeling(exa, exa_extremals):
    swapped = ControlProblem.from_text(
        ["-4*x2 + x1^3 + u1", "x2 - x1"], "(x2 - 1)^2 + (x1 - 2)^2 + u1^2", 2, 1, FixedFixed([2.5, 1.0], [1.5, 3.0])
    )
    for e in exa_extremals:
        perm = [1, 0]
        e2 = static_newton(swapped, np.concatenate([e.x[perm], e.u, e.lam[perm]]))
        np.testing.assert_allclose(e2.x, e.x[perm], atol=1e-9)
        a = check_assumptions(linearize(exa, e), exa, e.x).to_dict()
        b = check_assumptions(linearize(swapped, e2), swapped, e2.x).to_dict()
        assert a.keys() == b.keys()
        for k in a:
            if isinstance(a[k], float):
                assert b[k] == pytest.approx(a[k], rel=1e-9, abs=1e-12)
            else:
                assert a[k] == b[k]


@given(st.floats(-2.5, 2.5), st.floats(-2.5, 2.5))
def test_accepted_extremals_satisfy_kkt(x1, x2):
    p = problems.exa()
    try:
        e = static_newton(p, [x1, x2, 0.0, 0.0, 0.0])
    except ModelError:
        return
    if e.accepted:
        assert np.linalg.norm(kkt_residual(p, e.x, e.u, e.lam)) <= 1e-9


def test_to_dict_round_trip(exa_extremals):
    from turnpike.ocp_model import StaticExtremal

    for e in exa_extremals:
        back = StaticExtremal.from_dict(e.to_dict())
        np.testing.assert_array_equal(back.x, e.x)
        np.testing.assert_array_equal(back.lam, e.lam)
        assert back.f0_value == e.f0_value
