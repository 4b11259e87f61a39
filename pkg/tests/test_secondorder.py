import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stogeo.errors import NumericError, ShapeError
from stogeo.geometry import Euclidean, Sphere2
from stogeo.pde import Grid, GridFunction
from stogeo.secondorder import (ClassicalHamiltonian, Lagrangian, QuadraticFamily,
                                SecondOrderCovector, SecondOrderVector, canonical_lift, d2f,
                                energies, family_from_name, hamiltonian_value, legendre,
                                legendre_inverse, o_hat, rho_nabla, solve_fiber,
                                symmetric_product, transform_vector)

floats = st.floats(-3, 3)


def test_rho_nabla_flat_identity():
    A = SecondOrderVector([1.0, -2.0], [[2.0, 0.5], [0.5, 1.0]])
    np.testing.assert_array_equal(rho_nabla(Euclidean(2), np.zeros(2), A), [1.0, -2.0])


def test_rho_nabla_sphere():
    th = 0.8
    x = np.array([th, 0.1])
    m = Sphere2()
    A = SecondOrderVector(np.zeros(2), m.inverse_metric(x))
    b = rho_nabla(m, x, A)
    np.testing.assert_allclose(b, [-0.5 / np.tan(th), 0.0], atol=1e-14)


def test_rho_nabla_zero_second_part():
    x = np.array([1.1, 0.0])
    A = SecondOrderVector([0.3, 0.4], np.zeros((2, 2)))
    np.testing.assert_array_equal(rho_nabla(Sphere2(), x, A), [0.3, 0.4])


def test_rho_nabla_shape_error():
    with pytest.raises(ShapeError):
        rho_nabla(Euclidean(2), np.zeros(2), SecondOrderVector([1.0], [[1.0]]))
    with pytest.raises(ShapeError):
        SecondOrderVector([1.0, 2.0], [[1.0]])


@settings(max_examples=50, deadline=None)
@given(st.lists(floats, min_size=12, max_size=12))
def test_affine_chart_change_commutes_with_projection(vals):
    # Affine maps have no Hessian and flat symbols stay zero, so the
    # projection commutes with the linear push-forward.
    v = np.array(vals)
    J = v[:4].reshape(2, 2) + 4 * np.eye(2)
    A = SecondOrderVector(v[4:6], v[6:10].reshape(2, 2))
    x = v[10:12]
    m = Euclidean(2)
    lhs = rho_nabla(m, J @ x, transform_vector(A, J, np.zeros((2, 2, 2))))
    rhs = J @ rho_nabla(m, x, A)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_transform_vector_ito_rule():
    # y = x^2 in 1D: y' = 2x, y'' = 2, so b_y = 2x b + a, a_y = 4x^2 a
    A = SecondOrderVector([0.5], [[2.0]])
    x = 1.5
    B = transform_vector(A, [[2 * x]], [[[2.0]]])
    assert B.first[0] == pytest.approx(2 * x * 0.5 + 0.5 * 2 * 2.0)
    assert B.second[0, 0] == pytest.approx(4 * x * x * 2.0)


def test_d2f_examples():
    c = d2f(lambda x: x[0] ** 2, [3.0])
    np.testing.assert_allclose(c.p, [6.0], atol=1e-9)
    np.testing.assert_allclose(c.o, [[2.0]], atol=1e-6)
    c = d2f(lambda x: 4.0, [1.0, 2.0])
    np.testing.assert_allclose(c.p, 0, atol=1e-12)
    np.testing.assert_allclose(c.o, 0, atol=1e-9)
    c = d2f(lambda x: x[0] * x[1], [1.0, 2.0])
    np.testing.assert_allclose(c.p, [2.0, 1.0], atol=1e-9)
    np.testing.assert_allclose(c.o, [[0.0, 1.0], [1.0, 0.0]], atol=1e-6)


def test_d2f_analytic_callbacks_and_nonfinite():
    c = d2f(None, [3.0], grad=lambda x: 2 * x, hess=lambda x: np.array([[2.0]]))
    assert c.p[0] == 6.0 and c.o[0, 0] == 2.0
    with pytest.raises(NumericError), np.errstate(all="ignore"):
        d2f(lambda x: np.log(x[0]), [0.0])


def test_symmetric_product_examples():
    np.testing.assert_array_equal(symmetric_product([1.0], [1.0]), [[1.0]])
    np.testing.assert_array_equal(symmetric_product([1.0, 0.0], [0.0, 1.0]),
                                  [[0.0, 0.5], [0.5, 0.0]])
    np.testing.assert_array_equal(symmetric_product([0.0, 0.0], [3.0, 1.0]), np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        symmetric_product([1.0], [1.0, 2.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(floats, min_size=6, max_size=6))
def test_symmetric_product_symmetric_bilinear(vals):
    w, e = np.array(vals[:3]), np.array(vals[3:])
    o = symmetric_product(w, e)
    np.testing.assert_allclose(o, o.T)
    np.testing.assert_allclose(o, symmetric_product(e, w))
    np.testing.assert_allclose(symmetric_product(2 * w, e), 2 * o, atol=1e-300)


def test_pairing_half_convention():
    c = SecondOrderCovector([1.0, 2.0], [[2.0, 0.0], [0.0, 4.0]])
    A = SecondOrderVector([1.0, 1.0], np.eye(2))
    assert c.pair(A) == pytest.approx(3.0 + 0.5 * 6.0)


def test_canonical_lift_flat_example():
    fam = QuadraticFamily(F=lambda t, x: np.sum(np.sin(x), -1), dim=2)
    Hb = canonical_lift(fam.hamiltonian(), Euclidean(2), eps=0.3)
    x, p = np.array([0.2, -0.4]), np.array([1.0, 2.0])
    o = np.array([[1.0, 0.5], [0.5, 3.0]])
    expect = 0.5 * p @ p + 0.15 * np.trace(o) + np.sum(np.sin(x))
    assert Hb(x, p, o) == pytest.approx(expect, abs=1e-14)
    np.testing.assert_allclose(Hb.dH_do(x), 0.15 * np.eye(2))


def test_canonical_lift_sphere_with_drift():
    m = Sphere2()
    b = lambda t, x: np.broadcast_to([0.1, -0.3], np.shape(x))
    F = lambda t, x: np.cos(x[..., 0])
    Hb = canonical_lift(QuadraticFamily(m, b=b, F=F).hamiltonian(), m, 1.0)
    x = np.array([1.0, 2.0])
    p = np.array([0.5, -1.0])
    o = np.array([[0.2, 0.1], [0.1, -0.4]])
    gi = m.inverse_metric(x)
    G = m.christoffel(x)
    expect = (0.5 * p @ gi @ p + 0.1 * p[0] - 0.3 * p[1] + np.cos(1.0)
              + 0.5 * sum(gi[j, k] * (o[j, k] - sum(G[i, j, k] * p[i] for i in range(2)))
                          for j in range(2) for k in range(2)))
    assert Hb(x, p, o) == pytest.approx(expect, abs=1e-13)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.2, 2.9), st.floats(-2, 2), st.floats(-2, 2))
def test_lift_reduces_at_o_hat(th, p0, p1):
    m = Sphere2()
    H0 = QuadraticFamily(m, F=lambda t, x: x[..., 0]).hamiltonian()
    Hb = canonical_lift(H0, m, 0.7)
    x, p = np.array([th, 0.3]), np.array([p0, p1])
    assert Hb(x, p, o_hat(m, x, p)) == pytest.approx(H0(x, p), abs=1e-12)


def test_canonical_lift_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        canonical_lift(QuadraticFamily().hamiltonian(), Euclidean(1), 0.0)


def test_legendre_quadratic_family():
    b = lambda t, x: np.broadcast_to([0.5], np.shape(x))
    F = lambda t, x: x[..., 0] ** 2
    fam = QuadraticFamily(b=b, F=F)
    x, v = np.array([1.5]), np.array([2.0])
    p, H = legendre(fam.lagrangian(), x, v)
    np.testing.assert_allclose(p, [1.5])
    assert H == pytest.approx(0.5 * 1.5 ** 2 + 0.5 * 1.5 + 2.25)
    p, H = legendre(QuadraticFamily(dim=2).lagrangian(), np.zeros(2), np.array([1.0, 2.0]))
    np.testing.assert_allclose(p, [1.0, 2.0])
    assert H == pytest.approx(2.5)


@settings(max_examples=60, deadline=None)
@given(st.lists(floats, min_size=4, max_size=4), st.floats(0.2, 2.9))
def test_legendre_roundtrip(vals, th):
    m = Sphere2()
    fam = QuadraticFamily(m, b=lambda t, x: np.broadcast_to([0.2, 0.1], np.shape(x)),
                          F=lambda t, x: np.sin(x[..., 1]))
    x = np.array([th, vals[0]])
    v = np.array(vals[1:3])
    p, H = legendre(fam.lagrangian(), x, v, vals[3])
    v2, L = legendre_inverse(fam.hamiltonian(), x, p, vals[3])
    np.testing.assert_allclose(v2, v, atol=1e-10)
    assert L == pytest.approx(fam.lagrangian()(vals[3], x, v), abs=1e-10)
    assert H == pytest.approx(fam.hamiltonian()(x, p, vals[3]), abs=1e-10)


def test_solve_fiber_nonquadratic():
    # L = cosh(v): p = sinh(v)
    L = Lagrangian(lambda t, x, v: np.sum(np.cosh(v)), lambda t, x, v: np.sinh(v))
    v = solve_fiber(L, np.zeros(1), np.array([np.sinh(1.3)]))
    np.testing.assert_allclose(v, [1.3], atol=1e-10)
    v, H = hamiltonian_value(L, np.zeros(1), np.array([np.sinh(0.4)]))
    assert H == pytest.approx(np.sinh(0.4) * 0.4 - np.cosh(0.4), abs=1e-10)


def test_solve_fiber_convergence_error():
    from stogeo.errors import ConvergenceError
    L = Lagrangian(lambda t, x, v: np.sum(v), lambda t, x, v: np.ones_like(v))
    with pytest.raises(ConvergenceError):
        solve_fiber(L, np.zeros(1), np.array([2.0]))


def test_energies():
    g = Grid.line(-2, 2, 64, 1.0, 4)
    S = GridFunction(g, np.tile(3.0 * g.points()[..., 0], (5, 1)), "S")
    L0 = QuadraticFamily(b=lambda t, x: np.broadcast_to([0.5], np.shape(x)),
                         F=lambda t, x: x[..., 0]).lagrangian()
    x, v = np.array([0.3]), np.array([1.2])
    E0, E = energies(L0, S, Euclidean(1), 0.0, x, v)
    w = 1.2 - 0.5
    assert E0 == pytest.approx(0.5 * w * w + w * 0.5 + 0.3)
    assert E == pytest.approx(E0, abs=1e-10)
    E0, _ = energies(QuadraticFamily().lagrangian(), S, Euclidean(1), 0.0, x, np.array([2.0]))
    assert E0 == pytest.approx(2.0)
    S2 = GridFunction(g, np.tile(g.points()[..., 0] ** 2, (5, 1)), "S")
    _, E = energies(L0, S2, Euclidean(1), 0.0, x, v)
    assert E - E0 != 0


def test_family_registry():
    assert family_from_name("free").F(0.0, np.array([2.0])) == 0
    assert family_from_name("harmonic").F(0.0, np.array([2.0])) == 2.0
    assert family_from_name("euclidean-harmonic").F(0.0, np.array([2.0])) == -2.0
    np.testing.assert_allclose(family_from_name("harmonic").grad_F(0.0, np.array([2.0])), [2.0])
    with pytest.raises(ValueError):
        family_from_name("anharmonic")


def test_grad_F_finite_difference_fallback():
    fam = QuadraticFamily(F=lambda t, x: np.sin(x[..., 0]) * x[..., 1], dim=2)
    x = np.array([0.3, 2.0])
    np.testing.assert_allclose(fam.grad_F(0.0, x), [np.cos(0.3) * 2.0, np.sin(0.3)], atol=1e-10)


def test_classical_hamiltonian_fd_dH_dp():
    H = ClassicalHamiltonian(lambda x, p, t: np.sum(p ** 4))
    np.testing.assert_allclose(H.dH_dp(np.zeros(1), np.array([1.5])), [4 * 1.5 ** 3], rtol=1e-8)
