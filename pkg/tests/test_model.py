import numpy as np
import pytest

from lagix.basis import reparameterize_alpha, reparameterize_w
from lagix.exposure import ace_integral
from lagix.model import Workspace, build_workspace, nb_loglik

from conftest import make_data, make_spec


def random_point(ws, rng, scale=0.3):
    phi = scale * rng.normal(size=ws.layout.n_phi)
    gamma = scale * rng.normal(size=ws.layout.n_gamma)
    lam = np.exp(rng.normal(size=ws.layout.n_lambda))
    return phi, gamma, lam


# -- negative binomial -------------------------------------------------------


def test_nb_closed_forms():
    assert nb_loglik(np.array([0]), np.array([1.0]), 1.0) == pytest.approx(np.log(0.5))
    mu, y = 3.0, 2.0
    poisson = y * np.log(mu) - mu - np.log(2.0)
    assert nb_loglik(np.array([y]), np.array([mu]), 1e8) == pytest.approx(poisson, abs=1e-6)
    with pytest.raises(ValueError):
        nb_loglik(np.array([1]), np.array([np.nan]), 1.0)
    with pytest.raises(ValueError):
        nb_loglik(np.array([1]), np.array([1.0]), -1.0)


def test_nb_monte_carlo_moments():
    rng = np.random.default_rng(7)
    mu, theta = 5.0, 8.0
    # NB2 as gamma-mixed Poisson
    lam = rng.gamma(shape=theta, scale=mu / theta, size=1_000_000)
    draws = rng.poisson(lam)
    assert draws.mean() == pytest.approx(mu, rel=0.02)
    assert draws.var() == pytest.approx(mu + mu**2 / theta, rel=0.02)
    # and the log-mass is a proper distribution over a generous support
    ks = np.arange(0, 400)
    masses = np.exp([nb_loglik(np.array([k]), np.array([mu]), theta) for k in ks])
    assert masses.sum() == pytest.approx(1.0, abs=1e-10)
    assert (ks * masses).sum() == pytest.approx(mu, abs=1e-8)


# -- predictor assembly ------------------------------------------------------


def test_zero_coefficients_give_offset():
    rng = np.random.default_rng(1)
    data = make_data(rng)
    for structure in ("si-ace", "si-drf", "add-ace", "add-drf"):
        ws = build_workspace(make_spec(structure), data)
        eta = ws.linear_predictor(np.zeros(ws.layout.n_phi),
                                  np.zeros(ws.layout.n_gamma))
        np.testing.assert_allclose(eta, ws.offset, atol=1e-12)


def test_si_ace_predictor_composes_exposure_oracle():
    rng = np.random.default_rng(2)
    data = make_data(rng)
    ws = build_workspace(make_spec("si-ace"), data)
    phi, gamma, _ = random_point(ws, rng)
    eta = ws.linear_predictor(phi, gamma)

    alpha = ws.alpha_value(phi)
    sl_w = ws.layout.phi_slice("w_star")
    ww = reparameterize_w(phi[sl_w], ws.w_gram, ws.w_integrals)
    gsl = ws.layout.gamma_slice
    for i in rng.choice(ws.n, size=6, replace=False):
        g, t = ws.groups[i], ws.times[i]
        procs = [data.processes[g][name] for name in ws.exposure_names]

        def index(u):
            return sum(a * p(u) for a, p in zip(alpha, procs))

        EL = ace_integral(index, ww, ws.w_basis, float(t), ws.spec.L)
        manual = (gamma[gsl("intercept")][0]
                  + ws.f_curve(gamma, np.array([EL]))[0]
                  + ws.h_curve(gamma, "time", np.array([ws.times[i]]))[0]
                  + gamma[gsl("linear:temp")][0] * ws.data.covariates["temp"][ws.kept_rows][i]
                  + gamma[gsl("ranef:g")][int(g)]
                  + ws.offset[i])
        assert eta[i] == pytest.approx(manual, abs=1e-10)


def test_additive_matches_single_index_with_one_exposure():
    rng = np.random.default_rng(3)
    data = make_data(rng, M=1)
    for pair in (("si-ace", "add-ace"), ("si-drf", "add-drf")):
        with pytest.warns(UserWarning):
            ws_si = build_workspace(make_spec(pair[0], M=1), data)
        ws_add = build_workspace(make_spec(pair[1], M=1), data)
        assert ws_si.layout.n_phi == ws_add.layout.n_phi
        phi = 0.25 * rng.normal(size=ws_si.layout.n_phi)
        gamma = 0.25 * rng.normal(size=ws_si.layout.n_gamma)
        np.testing.assert_allclose(ws_si.linear_predictor(phi, gamma),
                                   ws_add.linear_predictor(phi, gamma),
                                   atol=1e-10)


def test_drop_rows_without_full_lag_window():
    rng = np.random.default_rng(4)
    data = make_data(rng, start=-5)  # record starts too late for early rows
    ws = build_workspace(make_spec("si-ace"), data)
    assert ws.dropped_rows == 2 * 10  # lookback 15, record starts at -5
    assert np.all(ws.times - 15.0 >= -5.0 - 1e-9)


# -- penalized likelihood ----------------------------------------------------


def test_penalized_loglik_reductions():
    rng = np.random.default_rng(5)
    data = make_data(rng)
    ws = build_workspace(make_spec("si-drf"), data)
    phi, gamma, lam = random_point(ws, rng)
    theta = 6.0
    unpen = ws.loglik(phi, gamma, theta)
    assert ws.penalized_loglik(phi, gamma, np.zeros_like(lam), theta) \
        == pytest.approx(unpen, rel=1e-12)
    assert ws.penalty_value(np.zeros(ws.layout.n_phi),
                            np.zeros(ws.layout.n_gamma), lam) == 0.0
    # independent reassembly of the quadratic form from the block list
    u = np.concatenate([phi, gamma])
    direct = 0.0
    for p in ws.layout.penalties:
        piece = u[p.start:p.start + p.size]
        for k, mat in p.components:
            direct += 0.5 * lam[k] * piece @ mat @ piece
    S = ws.penalty_matrix(lam)
    assert 0.5 * u @ S @ u == pytest.approx(direct, rel=1e-12)
    assert ws.penalized_loglik(phi, gamma, lam, theta) \
        == pytest.approx(unpen - direct, rel=1e-12)


def test_penalty_matrix_tensor_structure():
    rng = np.random.default_rng(6)
    data = make_data(rng)
    ws = build_workspace(make_spec("si-drf"), data)
    (pen,) = [p for p in ws.layout.penalties if p.label == "pen_psi[0]"]
    kx, Sx_comp = pen.components[0]
    kl, Sl_comp = pen.components[1]
    lam = np.exp(rng.normal(size=ws.layout.n_lambda))
    np.testing.assert_allclose(
        ws.penalty_matrix(lam)[pen.start:pen.start + pen.size,
                               pen.start:pen.start + pen.size],
        lam[kx] * Sx_comp + lam[kl] * Sl_comp, atol=1e-12)
    # eigenvalues of the block are pairwise sums of the factor eigenvalues
    ex, el = pen._tensor
    pair = np.sort((lam[kx] * ex[:, None] + lam[kl] * el[None, :]).ravel())
    eig = np.sort(np.linalg.eigvalsh(lam[kx] * Sx_comp + lam[kl] * Sl_comp))
    np.testing.assert_allclose(eig, pair, atol=1e-8 * pair.max())


def test_penalty_logdet_matches_eigendecomposition():
    rng = np.random.default_rng(7)
    data = make_data(rng)
    for structure in ("si-ace", "si-drf"):
        ws = build_workspace(make_spec(structure), data)
        log_lam = rng.normal(size=ws.layout.n_lambda)
        val, grad, null_dim = ws.penalty_logdet(log_lam)
        S = ws.penalty_matrix(np.exp(log_lam))
        eig = np.linalg.eigvalsh(S)
        tol = 1e-9 * eig.max()
        assert val == pytest.approx(np.sum(np.log(eig[eig > tol])), rel=1e-8)
        assert null_dim == int(np.sum(eig <= tol))
        h = 1e-6
        for k in range(ws.layout.n_lambda):
            e = np.zeros(ws.layout.n_lambda)
            e[k] = h
            fd = (ws.penalty_logdet(log_lam + e)[0]
                  - ws.penalty_logdet(log_lam - e)[0]) / (2 * h)
            assert grad[k] == pytest.approx(fd, abs=1e-5)


# -- derivative oracles -------------------------------------------------------


def fd_gradient(f, x, h=1e-6):
    g = np.empty(x.size)
    for j in range(x.size):
        e = np.zeros(x.size)
        e[j] = h * max(1.0, abs(x[j]))
        g[j] = (f(x + e) - f(x - e)) / (2 * e[j])
    return g


def rel_err(a, b):
    scale = max(1e-6, float(np.max(np.abs(b))))
    return float(np.max(np.abs(a - b))) / scale


@pytest.mark.parametrize("structure", ["si-ace", "si-drf", "add-ace", "add-drf"])
def test_gradient_and_hessian_finite_differences(structure):
    rng = np.random.default_rng(8)
    data = make_data(rng, n_per_group=50)
    ws = build_workspace(make_spec(structure), data)
    theta = 5.0
    for rep in range(3):
        phi, gamma, lam = random_point(ws, rng, scale=0.25)
        u = np.concatenate([phi, gamma])
        n_phi = ws.layout.n_phi

        def value(uvec):
            return ws.penalized_loglik(uvec[:n_phi], uvec[n_phi:], lam, theta)

        d = ws.derivatives(phi, gamma, lam, theta)
        assert np.max(np.abs(d["H"] - d["H"].T)) < 1e-8
        assert rel_err(d["grad"], fd_gradient(value, u)) < 1e-5

        def grad_vec(uvec):
            return ws.derivatives(uvec[:n_phi], uvec[n_phi:], lam, theta)["grad"]

        H_fd = np.empty_like(d["H"])
        h = 1e-5
        for j in range(u.size):
            e = np.zeros(u.size)
            e[j] = h * max(1.0, abs(u[j]))
            H_fd[:, j] = (grad_vec(u + e) - grad_vec(u - e)) / (2 * e[j])
        assert rel_err(d["H"], 0.5 * (H_fd + H_fd.T)) < 1e-3


@pytest.mark.parametrize("structure", ["si-ace", "si-drf"])
def test_extended_derivatives_and_scores(structure):
    rng = np.random.default_rng(9)
    data = make_data(rng, n_per_group=40)
    ws = build_workspace(make_spec(structure), data)
    phi, gamma, _ = random_point(ws, rng, scale=0.2)
    theta = 4.0
    ext = ws.extended_derivatives(phi, gamma, theta)
    p = ws.layout.n_coef

    uext = np.concatenate([phi, gamma, [theta]])

    def value(v):
        return ws.loglik(v[:ws.layout.n_phi], v[ws.layout.n_phi:p], v[p])

    assert rel_err(ext["grad"], fd_gradient(value, uext)) < 1e-5
    np.testing.assert_allclose(ext["scores"].sum(axis=0), ext["grad"],
                               rtol=1e-10, atol=1e-10)

    def grad_vec(v):
        return ws.extended_derivatives(v[:ws.layout.n_phi],
                                       v[ws.layout.n_phi:p], v[p])["grad"]

    H_fd = np.empty_like(ext["H"])
    h = 1e-5
    for j in range(uext.size):
        e = np.zeros(uext.size)
        e[j] = h * max(1.0, abs(uext[j]))
        H_fd[:, j] = (grad_vec(uext + e) - grad_vec(uext - e)) / (2 * e[j])
    assert rel_err(ext["H"], 0.5 * (H_fd + H_fd.T)) < 1e-3


def test_row_subset_derivatives_sum_to_full():
    rng = np.random.default_rng(10)
    data = make_data(rng, n_per_group=30)
    ws = build_workspace(make_spec("si-ace"), data)
    phi, gamma, _ = random_point(ws, rng, scale=0.2)
    theta = 4.0
    full = ws.extended_derivatives(phi, gamma, theta)
    rows_a = np.arange(0, ws.n, 2)
    rows_b = np.arange(1, ws.n, 2)
    ga = ws.extended_derivatives(phi, gamma, theta, rows=rows_a)
    gb = ws.extended_derivatives(phi, gamma, theta, rows=rows_b)
    np.testing.assert_allclose(ga["grad"] + gb["grad"], full["grad"], rtol=1e-9)
    np.testing.assert_allclose(ga["H"] + gb["H"], full["H"], rtol=1e-8, atol=1e-10)
