"""Sampling-based inference, the exposure-reduction estimand, and AIC.

Confidence intervals come from joint Gaussian draws of the unconstrained
(phi, gamma) around the penalized optimum with covariance H^-1, mapped
through the constraint reparameterizations and summarized by pointwise
quantiles. The estimand is the relative reduction in total expected counts
under a proportional cut of the exposures. Model choice uses an AIC built
for misspecified penalized fits, in a conditional form at fixed smoothing
parameters and an adjusted form that propagates smoothing-parameter
uncertainty into the covariance of the estimator.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import basis as bas
from .fit import FitOptions, FitResult, _Engine, laml_gradient
from .model import Workspace


class InferenceError(RuntimeError):
    """A post-fit computation could not be completed."""


# ---------------------------------------------------------------------------
# Posterior sampling
# ---------------------------------------------------------------------------


@dataclass
class PosteriorDraws:
    """Joint Gaussian draws of the unconstrained (phi, gamma).

    Each draw maps through the same reparameterizations as the estimate,
    so every constrained view (index weights on the unit sphere, lag
    weights with unit squared integral) satisfies its constraints exactly.
    """

    R: int
    draws: np.ndarray
    mean: np.ndarray
    theta: float
    seed: int
    workspace: Workspace | None = None

    @property
    def n_phi(self) -> int:
        return self._ws().layout.n_phi if self.workspace is not None else 0

    def phi_draws(self) -> np.ndarray:
        return self.draws[:, :self.n_phi]

    def gamma_draws(self) -> np.ndarray:
        return self.draws[:, self.n_phi:]

    def alpha_draws(self) -> np.ndarray:
        """Per-draw index weights, shape (R, M)."""
        ws = self._ws()
        return np.stack([ws.alpha_value(p) for p in self.phi_draws()])

    def w_draws(self, m: int = 0) -> np.ndarray:
        """Per-draw lag-weight spline coefficients, shape (R, d_w)."""
        ws = self._ws()
        label = "w_star" if ws.spec.structure == "si-ace" else f"w_star[{m}]"
        sl = ws.layout.phi_slice(label)
        out = [bas.reparameterize_w(p[sl], ws.w_gram, ws.w_integrals).beta_w
               for p in self.phi_draws()]
        return np.stack(out)

    def _ws(self) -> Workspace:
        if self.workspace is None:
            raise InferenceError("these draws carry no workspace, so "
                                 "constrained views are unavailable")
        return self.workspace


def sample_posterior(fit: FitResult, R: int = 1000, *,
                     seed: int) -> PosteriorDraws:
    """Draw R samples of (phi, gamma) from N((phi_hat, gamma_hat), H^-1).

    One child seed per draw makes the result independent of how draws are
    scheduled across workers; theta stays fixed at its estimate.
    """
    if R < 1:
        raise ValueError("R must be a positive integer")
    mean = np.concatenate([np.asarray(fit.phi, float),
                           np.asarray(fit.gamma, float)])
    H = np.asarray(fit.H, dtype=float)
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:
        raise InferenceError(
            "the reported Hessian is not positive definite, so the "
            "sampling covariance cannot be factorized") from exc
    dim = mean.size
    Z = np.empty((R, dim))
    for r, child in enumerate(np.random.SeedSequence(seed).spawn(R)):
        Z[r] = np.random.default_rng(child).standard_normal(dim)
    # x = mean + L^-T z has covariance (L L^T)^-1 = H^-1
    draws = mean + solve_triangular(L, Z.T, lower=True, trans="T").T
    return PosteriorDraws(R=R, draws=draws, mean=mean, theta=float(fit.theta),
                          seed=seed, workspace=fit.workspace)


@dataclass
class FunctionCI:
    """Pointwise equal-tailed interval for one fitted function."""

    grid: np.ndarray
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float


def function_ci(draws: PosteriorDraws, which: str, grid, m: int = 0,
                term: str | None = None, lag: float | None = None,
                level: float = 0.95) -> FunctionCI:
    """Quantile interval for a fitted curve across the draws.

    which selects the curve: "f" (association), "w" (lag weights), "psi"
    (lag-response surface cut at a fixed lag, with grid on the exposure
    axis), or "h" (a covariate smooth named by term).
    """
    ws = draws._ws()
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    n_phi = ws.layout.n_phi

    def curve(vec):
        phi, gamma = vec[:n_phi], vec[n_phi:]
        if which == "f":
            return ws.f_curve(gamma, grid, m)
        if which == "w":
            return ws.w_curve(phi, grid, m)
        if which == "psi":
            if lag is None:
                raise ValueError("a psi slice needs the lag to cut at")
            return ws.psi_surface(gamma, grid, np.array([float(lag)]),
                                  m).ravel()
        if which == "h":
            if term is None:
                raise ValueError("covariate smooths are selected by term")
            return ws.h_curve(gamma, term, grid)
        raise ValueError(f"unknown function kind {which!r}")

    estimate = curve(draws.mean)
    values = np.stack([curve(v) for v in draws.draws])
    lo, hi = np.quantile(values, [(1 - level) / 2, (1 + level) / 2], axis=0)
    return FunctionCI(grid=grid, estimate=estimate, lower=lo, upper=hi,
                      level=level)


# ---------------------------------------------------------------------------
# Relative-reduction estimand
# ---------------------------------------------------------------------------


@dataclass
class EstimandResult:
    """Relative reduction in total expected counts, with its interval."""

    delta: float
    lower: float | None
    upper: float | None
    alpha_red: float
    subset: tuple | None
    exposure: str | None
    level: float
    draw_values: np.ndarray | None = None


def _subset_rows(ws: Workspace, subset) -> np.ndarray:
    if subset is None:
        mask = np.ones(ws.n, dtype=bool)
    else:
        kind, val = subset
        if kind == "group":
            mask = ws.groups == val
        elif kind == "time":
            lo, hi = val
            mask = (ws.times >= lo) & (ws.times <= hi)
        else:
            raise ValueError("subset must be None, ('group', id) or "
                             "('time', (lo, hi))")
    if not np.any(mask):
        raise ValueError("the subset selects no observations")
    return np.flatnonzero(mask)


def delta_estimand(fit: FitResult, alpha_red: float = 0.10, subset=None,
                   exposure: str | int | None = None,
                   draws: PosteriorDraws | None = None,
                   level: float = 0.95) -> EstimandResult:
    """Delta = 1 - sum mu_hat((1-alpha_red) x) / sum mu_hat(x) over a subset.

    All lags feeding a subset observation use the reduced exposures;
    exposure picks a single one to reduce (by name or position) while the
    others stay at observed levels. Supplying draws adds a quantile
    interval from per-draw recomputation.
    """
    if not 0.0 <= alpha_red < 1.0:
        raise ValueError("alpha_red must lie in [0, 1)")
    ws = fit.workspace
    rows = _subset_rows(ws, subset)
    scale = np.ones(ws.spec.M)
    name = None
    if exposure is None:
        scale[:] = 1.0 - alpha_red
    else:
        j = ws.exposure_names.index(exposure) if isinstance(exposure, str) \
            else int(exposure)
        scale[j] = 1.0 - alpha_red
        name = ws.exposure_names[j]
    scale = tuple(scale)
    n_phi = ws.layout.n_phi

    def value(vec):
        phi, gamma = vec[:n_phi], vec[n_phi:]
        base = np.exp(ws.linear_predictor(phi, gamma, rows=rows))
        red = np.exp(ws.linear_predictor(phi, gamma, scale=scale, rows=rows))
        return 1.0 - red.sum() / base.sum()

    point = float(value(np.concatenate([fit.phi, fit.gamma])))
    lower = upper = None
    vals = None
    if draws is not None:
        vals = np.array([value(v) for v in draws.draws])
        lo, hi = np.quantile(vals, [(1 - level) / 2, (1 + level) / 2])
        lower, upper = float(lo), float(hi)
    return EstimandResult(delta=point, lower=lower, upper=upper,
                          alpha_red=alpha_red, subset=subset, exposure=name,
                          level=level, draw_values=vals)


# ---------------------------------------------------------------------------
# AIC for misspecified penalized fits
# ---------------------------------------------------------------------------


def _aic_pieces(fit: FitResult):
    """(I_hat + S_lambda over u, K_hat, trace term) at u = (phi, gamma,
    theta); the penalty gets a zero row and column for theta."""
    ws = fit.workspace
    ext = ws.extended_derivatives(fit.phi, fit.gamma, fit.theta)
    info = -ext["H"]
    K = ext["scores"].T @ ext["scores"]
    p = ws.layout.n_coef
    A = info.copy()
    A[:p, :p] += ws.penalty_matrix(fit.lam)
    eigs = np.linalg.eigvalsh((A + A.T) / 2)
    if eigs.min() <= 1e-12 * max(abs(eigs.max()), 1.0):
        raise InferenceError("the penalized information matrix is singular")
    trace = float(np.trace(np.linalg.solve(A, K)))
    return A, K, trace


def conditional_aic(fit: FitResult) -> float:
    """-2 l(u_hat) + tr[(I_hat + S_lambda)^-1 K_hat] at fixed smoothing.

    u = (phi, gamma, theta); I_hat is the observed information of the
    unpenalized log-likelihood and K_hat the sum of per-observation score
    outer products, so the trace stays valid when the model class does
    not contain the truth.
    """
    _, _, trace = _aic_pieces(fit)
    return -2.0 * float(fit.loglik) + trace


def _laml_neg_hessian_fd(ws: Workspace, rho: np.ndarray, opts: FitOptions,
                         h: float) -> np.ndarray:
    n = rho.size
    H = np.empty((n, n))
    for k in range(n):
        up, dn = rho.copy(), rho.copy()
        up[k] += h
        dn[k] -= h
        gu = laml_gradient(ws, up[:-1], up[-1], opts)
        gd = laml_gradient(ws, dn[:-1], dn[-1], opts)
        H[k] = (gu - gd) / (2.0 * h)
    return -(H + H.T) / 2.0


def _u_sensitivity(fit: FitResult) -> np.ndarray:
    """du_hat/d rho for u = (phi, gamma, theta) and rho = (log lambda,
    log theta), from the stationarity of the penalized log-likelihood."""
    ws = fit.workspace
    p = ws.layout.n_coef
    lam = fit.lam
    u = np.concatenate([fit.phi, fit.gamma])
    ext = ws.extended_derivatives(fit.phi, fit.gamma, fit.theta)
    J = np.zeros((p + 1, lam.size + 1))
    for k in range(lam.size):
        S_k = np.zeros((p, p))
        for pen in ws.layout.penalties:
            sl = slice(pen.start, pen.start + pen.size)
            for kk, mat in pen.components:
                if kk == k:
                    S_k[sl, sl] += mat
        J[:p, k] = -lam[k] * np.linalg.solve(fit.H, S_k @ u)
    cross = ext["H"][:p, p]
    J[:p, -1] = fit.theta * np.linalg.solve(fit.H, cross)
    J[p, -1] = fit.theta
    return J


def _psd_root_fixed_order(K: np.ndarray, order: np.ndarray) -> np.ndarray:
    """Root W with W^T W = K from an unpivoted LDL pass in a frozen row
    order, so the factor varies smoothly with K under finite differences."""
    Kp = K[np.ix_(order, order)]
    n = Kp.shape[0]
    C = np.eye(n)
    d = np.zeros(n)
    tol = 1e-12 * max(float(np.max(np.diag(Kp))), 1.0)
    for j in range(n):
        v = C[j, :j] * d[:j]
        d[j] = Kp[j, j] - C[j, :j] @ v
        if d[j] <= tol:
            # a vanished pivot in a PSD matrix zeroes its whole column
            d[j] = 0.0
            continue
        C[j + 1:, j] = (Kp[j + 1:, j] - C[j + 1:, :j] @ v) / d[j]
    W = np.sqrt(d)[:, None] * C.T
    out = np.zeros_like(W)
    out[:, order] = W
    return out


def _r_factor(ws: Workspace, phi, gamma, theta, lam, order) -> np.ndarray:
    ext = ws.extended_derivatives(phi, gamma, theta)
    K = ext["scores"].T @ ext["scores"]
    p = ws.layout.n_coef
    A = -ext["H"]
    A[:p, :p] += ws.penalty_matrix(lam)
    W = _psd_root_fixed_order(K, order)
    return np.linalg.solve(A, W.T).T


def adjusted_aic(fit: FitResult, options: FitOptions | None = None,
                 fd_step: float = 1e-3, laml_hessian=None,
                 return_parts: bool = False):
    """Conditional AIC plus the trace contribution of smoothing-parameter
    uncertainty.

    The estimator covariance gains J V J^T, with J = du_hat/d rho by
    implicit differentiation and V the inverse curvature of the marginal
    criterion over rho = (log lambda, log theta), plus a term built from
    the derivative of the factor R satisfying R^T R = (I+S)^-1 K (I+S)^-1.
    That derivative is taken by central differences with the factor's
    elimination order frozen at rho_hat.
    """
    ws = fit.workspace
    opts = options or FitOptions()
    A, K, base_trace = _aic_pieces(fit)
    cond = -2.0 * float(fit.loglik) + base_trace
    if fit.diagnostics.get("phi_at_bound"):
        warnings.warn("index coefficients sit at the chart bound; the "
                      "sensitivity step of the adjusted AIC assumes an "
                      "interior optimum", stacklevel=2)
    rho = np.concatenate([fit.log_lambda, [np.log(fit.theta)]])

    if laml_hessian is None:
        laml_hessian = _laml_neg_hessian_fd(ws, rho, opts, fd_step)
    laml_hessian = (np.asarray(laml_hessian, dtype=float)
                    + np.asarray(laml_hessian, dtype=float).T) / 2.0
    eigs = np.linalg.eigvalsh(laml_hessian)
    if eigs.min() <= 0.0:
        raise InferenceError(
            "the marginal-likelihood curvature is not positive definite; "
            "falling back to the conditional AIC is recommended",
            {"conditional_aic": cond})
    V_rho = np.linalg.inv(laml_hessian)

    J = _u_sensitivity(fit)
    V1 = J @ V_rho @ J.T

    order = np.argsort(-np.diag(K), kind="stable")
    dR = []
    for k in range(rho.size):
        up, dn = rho.copy(), rho.copy()
        up[k] += fd_step
        dn[k] -= fd_step
        parts = []
        for r in (up, dn):
            _, state = _Engine(ws, opts).laml_at(r)
            parts.append(_r_factor(ws, state["phi"], state["gamma"],
                                   state["theta"], np.exp(r[:-1]), order))
        dR.append((parts[0] - parts[1]) / (2.0 * fd_step))
    V2 = np.zeros_like(V1)
    for k in range(rho.size):
        for l in range(rho.size):
            V2 += V_rho[k, l] * (dR[k].T @ dR[l])

    value = cond + float(np.trace((V1 + V2) @ A))
    if return_parts:
        return value, {"conditional": cond, "V_prime": V1, "V_dprime": V2,
                       "V_rho": V_rho, "J": J}
    return value
