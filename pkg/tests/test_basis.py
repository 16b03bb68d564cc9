import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lagix.basis import (PenaltyBlock, alpha_hessian, alpha_jacobian,
                         alpha_star_from_alpha, alpha_values, basis_gram,
                         basis_integrals, beta_w_values, bspline_basis,
                         build_penalty, build_tensor_penalty, evaluate_basis,
                         reparameterize_alpha, reparameterize_w, w_hessian,
                         w_jacobian, w_star_from_w)


def test_partition_of_unity():
    basis = bspline_basis(0.0, 1.0, 12)
    x = np.linspace(0.0, 1.0, 1000)
    B = evaluate_basis(basis, x)
    assert np.all(np.abs(B.sum(axis=1) - 1.0) < 1e-12)
    assert np.all(B >= -1e-14)


def test_open_boundary_value():
    basis = bspline_basis(0.0, 1.0, 8)
    left = evaluate_basis(basis, 0.0)
    np.testing.assert_allclose(left, np.eye(8)[0], atol=1e-14)
    right = evaluate_basis(basis, 1.0)
    np.testing.assert_allclose(right, np.eye(8)[-1], atol=1e-14)


def test_derivative_matches_finite_difference():
    basis = bspline_basis(0.0, 1.0, 10)
    h = 1e-6
    for x in (0.5, 0.37, 0.91):
        d1 = evaluate_basis(basis, x, 1)
        fd = (evaluate_basis(basis, x + h) - evaluate_basis(basis, x - h)) / (2 * h)
        np.testing.assert_allclose(d1, fd, atol=1e-5)


def test_domain_and_order_errors():
    basis = bspline_basis(0.0, 1.0, 8)
    with pytest.raises(ValueError):
        evaluate_basis(basis, 1.5)
    with pytest.raises(ValueError):
        evaluate_basis(basis, 0.5, 4)


def test_penalty_null_space():
    basis = bspline_basis(0.0, 2.0, 10)
    S = build_penalty(basis, 2).matrix
    const = np.ones(10)
    assert abs(const @ S @ const) < 1e-12
    # Greville ordinates give the coefficients of the identity function.
    k, deg = basis.knots, basis.degree
    greville = np.array([k[q + 1:q + 1 + deg].mean() for q in range(10)])
    assert abs(greville @ S @ greville) < 1e-10


def test_penalty_matches_trapezoid_quadrature():
    rng = np.random.default_rng(3)
    basis = bspline_basis(0.0, 1.0, 10)
    S = build_penalty(basis, 2).matrix
    beta = rng.normal(size=10)
    x = np.linspace(0.0, 1.0, 10_001)
    second = evaluate_basis(basis, x, 2) @ beta
    oracle = np.trapezoid(second**2, x)
    np.testing.assert_allclose(beta @ S @ beta, oracle, rtol=1e-6)


def test_gram_and_integrals_quadrature_oracle():
    basis = bspline_basis(0.0, 15.0, 7)
    x = np.linspace(0.0, 15.0, 20_001)
    B = evaluate_basis(basis, x)
    np.testing.assert_allclose(basis_integrals(basis), np.trapezoid(B, x, axis=0),
                               rtol=1e-7)
    rng = np.random.default_rng(4)
    b = rng.normal(size=7)
    curve = B @ b
    np.testing.assert_allclose(b @ basis_gram(basis) @ b,
                               np.trapezoid(curve**2, x), rtol=1e-7)


def test_tensor_penalty_cases():
    Z = PenaltyBlock(np.zeros((3, 3)))
    assert not build_tensor_penalty(Z, PenaltyBlock(np.zeros((2, 2))), 0.0, 0.0).any()
    I3, I2 = PenaltyBlock(np.eye(3)), PenaltyBlock(np.eye(2))
    np.testing.assert_allclose(build_tensor_penalty(I3, I2, 2.0, 3.0),
                               5.0 * np.eye(6))
    rng = np.random.default_rng(5)
    A = rng.normal(size=(4, 4))
    Sx = PenaltyBlock(A @ A.T)
    Bm = rng.normal(size=(4, 4))
    Sl = PenaltyBlock(Bm @ Bm.T)
    a, b = rng.normal(size=4), rng.normal(size=4)
    beta = np.kron(a, b)  # second index fastest
    T = build_tensor_penalty(Sx, Sl, 1.7, 0.4)
    expected = 1.7 * (a @ Sx.matrix @ a) * (b @ b) + 0.4 * (a @ a) * (b @ Sl.matrix @ b)
    np.testing.assert_allclose(beta @ T @ beta, expected, rtol=1e-12)


def test_cyclic_basis_periodic():
    basis = bspline_basis(0.0, 12.0, 8, kind="cyclic")
    eps = 1e-7
    for order in (0, 1, 2):
        a = evaluate_basis(basis, eps, order)
        b = evaluate_basis(basis, 12.0 - eps, order)
        np.testing.assert_allclose(a, b, atol=1e-4)
    x = np.linspace(0.0, 12.0, 500)
    B = evaluate_basis(basis, x)
    np.testing.assert_allclose(B.sum(axis=1), 1.0, atol=1e-12)


# -- index-weight reparameterization ----------------------------------------


def test_alpha_special_case_pole():
    w = reparameterize_alpha(np.zeros(2), np.array([1.0, 0.0, 0.0]))
    np.testing.assert_allclose(w.B_alpha, np.eye(3), atol=1e-14)
    np.testing.assert_allclose(w.alpha, [1.0, 0.0, 0.0], atol=1e-14)


def test_alpha_hand_value_ones_direction():
    w = reparameterize_alpha(np.zeros(2), np.ones(3))
    np.testing.assert_allclose(w.alpha, np.ones(3) / np.sqrt(3.0), atol=1e-12)
    np.testing.assert_allclose(w.B_alpha[:, 0], np.ones(3))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=2))
def test_alpha_constraints_hold(alpha_star):
    w = reparameterize_alpha(np.array(alpha_star), np.ones(3))
    assert abs(w.alpha @ w.alpha - 1.0) < 1e-12
    assert w.alpha.sum() > 0


def test_alpha_jacobian_tangency_and_fd():
    rng = np.random.default_rng(11)
    for c in (np.ones(3), np.array([1.0, 0.0, 0.0]), np.array([2.0, -1.0, 0.5])):
        a_star = rng.normal(size=2)
        w = reparameterize_alpha(a_star, c)
        J = alpha_jacobian(w)
        np.testing.assert_allclose(w.alpha @ J, 0.0, atol=1e-10)
        h = 1e-6
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            fd = (reparameterize_alpha(a_star + e, c).alpha
                  - reparameterize_alpha(a_star - e, c).alpha) / (2 * h)
            np.testing.assert_allclose(J[:, j], fd, rtol=1e-5, atol=1e-8)


def test_alpha_hessian_fd():
    rng = np.random.default_rng(12)
    a_star = rng.normal(size=3)
    c = np.array([1.0, 1.0, 1.0, 1.0])
    H = alpha_hessian(reparameterize_alpha(a_star, c))
    h = 1e-5
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        Jp = alpha_jacobian(reparameterize_alpha(a_star + e, c))
        Jm = alpha_jacobian(reparameterize_alpha(a_star - e, c))
        np.testing.assert_allclose(H[:, :, j], (Jp - Jm) / (2 * h),
                                   rtol=1e-4, atol=1e-7)


def test_alpha_inversion_surjective():
    rng = np.random.default_rng(13)
    c = np.ones(3)
    for _ in range(100):
        a = rng.normal(size=3)
        a /= np.linalg.norm(a)
        if a.sum() <= 1e-6:
            a = -a
        a_star = alpha_star_from_alpha(a, c)
        np.testing.assert_allclose(reparameterize_alpha(a_star, c).alpha, a,
                                   atol=1e-8)


# -- lag-weight reparameterization -------------------------------------------


def _w_setup(d=6, L=15.0):
    basis = bspline_basis(0.0, L, d)
    return basis, basis_gram(basis), basis_integrals(basis)


def test_w_constraints_hold():
    basis, gram, m = _w_setup()
    rng = np.random.default_rng(21)
    for _ in range(50):
        coefs = reparameterize_w(rng.normal(size=5, scale=3.0), gram, m)
        assert abs(coefs.beta_w @ gram @ coefs.beta_w - 1.0) < 1e-10
        assert m @ coefs.beta_w > 0
    at_zero = reparameterize_w(np.zeros(5), gram, m)
    assert abs(at_zero.beta_w @ gram @ at_zero.beta_w - 1.0) < 1e-12
    assert m @ at_zero.beta_w > 0


def test_w_jacobian_and_hessian_fd():
    _, gram, m = _w_setup()
    rng = np.random.default_rng(22)
    b_star = rng.normal(size=5)
    coefs = reparameterize_w(b_star, gram, m)
    J = w_jacobian(coefs)
    H = w_hessian(coefs)
    h = 1e-6
    for j in range(5):
        e = np.zeros(5)
        e[j] = h
        plus = reparameterize_w(b_star + e, gram, m)
        minus = reparameterize_w(b_star - e, gram, m)
        np.testing.assert_allclose(J[:, j], (plus.beta_w - minus.beta_w) / (2 * h),
                                   rtol=1e-5, atol=1e-8)
        np.testing.assert_allclose(H[:, :, j],
                                   (w_jacobian(plus) - w_jacobian(minus)) / (2 * h),
                                   rtol=1e-4, atol=1e-6)


def test_w_inversion_round_trip():
    _, gram, m = _w_setup()
    rng = np.random.default_rng(23)
    b_star = rng.normal(size=5)
    coefs = reparameterize_w(b_star, gram, m)
    np.testing.assert_allclose(w_star_from_w(coefs.beta_w, gram, m), b_star,
                               atol=1e-10)


def test_batch_charts_match_scalar_maps():
    _, gram, m = _w_setup()
    rng = np.random.default_rng(24)
    c = np.ones(4)
    V_a = rng.normal(size=(30, 3))
    V_w = rng.normal(size=(30, 5))
    A = alpha_values(V_a, c)
    W = beta_w_values(V_w, gram, m)
    for b in range(30):
        np.testing.assert_allclose(A[b], reparameterize_alpha(V_a[b], c).alpha,
                                   atol=1e-13)
        np.testing.assert_allclose(W[b],
                                   reparameterize_w(V_w[b], gram, m).beta_w,
                                   atol=1e-13)
