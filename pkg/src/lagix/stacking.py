"""Combine fitted models: one-step leave-one-out, weights, mixtures.

Stacking weights maximize the summed log of the mixture of leave-one-out
predictive densities over the simplex. Refitting n times is avoided with a
one-step Newton update from the full-data optimum; each left-out density
is then a Monte Carlo average of the negative binomial mass over draws
from the Gaussian pseudo-posterior of that reduced fit. Smoothing
parameters and the dispersion stay fixed at their full-data estimates
throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln

from .fit import FitResult
from .inference import EstimandResult

DENSITY_FLOOR = 1e-300


class StackingError(RuntimeError):
    """A leave-one-out update or weight optimization failed."""


# ---------------------------------------------------------------------------
# One-step leave-one-out
# ---------------------------------------------------------------------------


def loo_onestep(fit: FitResult, s: int):
    """One-step Newton approximation to the fit without kept observation s.

    Returns (u_minus, H_minus) for u = (phi, gamma): the deflated Hessian
    H_minus = H - I_s subtracts observation s's information from the
    full-data negative penalized Hessian, and a single Newton step from
    the optimum removes its score.
    """
    ws = fit.workspace
    d_s = ws.derivatives(fit.phi, fit.gamma, np.zeros(ws.layout.n_lambda),
                         fit.theta, rows=np.array([s]))
    g_s = d_s["grad"]
    I_s = -d_s["H"]
    H_minus = fit.H - I_s
    u_hat = np.concatenate([fit.phi, fit.gamma])
    try:
        step = np.linalg.solve(H_minus, g_s)
    except np.linalg.LinAlgError as exc:
        raise StackingError(
            f"deflated Hessian is singular at observation {s}") from exc
    if not np.all(np.isfinite(step)):
        raise StackingError(
            f"deflated Hessian is singular at observation {s}")
    return u_hat - step, H_minus


def _nb_mass(y: float, mu: np.ndarray, theta: float) -> np.ndarray:
    """Negative binomial mass of a single count at a vector of means."""
    ll = (gammaln(y + theta) - gammaln(theta) - gammaln(y + 1.0)
          + theta * np.log(theta / (theta + mu))
          + y * np.log(mu / (theta + mu)))
    return np.exp(ll)


def loo_density(fit: FitResult, s: int, B: int = 500, *, seed,
                pseudo=None) -> float:
    """Monte Carlo leave-one-out predictive density of observation s.

    Averages the negative binomial mass of Y_s over B draws from the
    Gaussian pseudo-posterior N(u_minus, H_minus^-1) of the one-step
    reduced fit (or a supplied (u_minus, H_minus) pair). Values are
    clamped below at DENSITY_FLOOR.
    """
    ws = fit.workspace
    u_minus, H_minus = loo_onestep(fit, s) if pseudo is None else pseudo
    try:
        L = np.linalg.cholesky(H_minus)
    except np.linalg.LinAlgError as exc:
        raise StackingError(
            f"deflated Hessian is not positive definite at observation {s}"
        ) from exc
    ss = seed if isinstance(seed, np.random.SeedSequence) \
        else np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss)
    Z = rng.standard_normal((B, u_minus.size))
    draws = u_minus + solve_triangular(L, Z.T, lower=True, trans="T").T
    y_s = float(ws.y[s])
    eta = np.clip(ws.eta_row_draws(draws, s), -345.0, 345.0)
    mass = _nb_mass(y_s, np.exp(eta), fit.theta)
    return max(float(mass.mean()), DENSITY_FLOOR)


@dataclass
class LooDensityMatrix:
    """Leave-one-out predictive densities, observations by models."""

    values: np.ndarray            # (n, K), strictly positive
    rows: np.ndarray              # original data row index per matrix row
    methods: np.ndarray           # (n, K) entry tags
    B: int
    seed: int
    diagnostics: dict = field(default_factory=dict)


def _exact_loo_refit(fit: FitResult, s: int, max_iter: int = 50):
    """Damped Newton refit of (phi, gamma) without kept observation s.

    Used when the one-step deflation fails: the reduced penalized
    objective is re-optimized from the full-data coefficients, giving an
    exact (u_minus, H_minus) pair for the density draw.
    """
    ws = fit.workspace
    rows = np.delete(np.arange(ws.n), s)
    lam = fit.lam
    n_phi = ws.layout.n_phi
    u = np.concatenate([fit.phi, fit.gamma])
    d = ws.derivatives(u[:n_phi], u[n_phi:], lam, fit.theta, rows=rows)
    for _ in range(max_iter):
        g = d["grad"]
        if d["H"] is None or not np.all(np.isfinite(g)):
            raise StackingError(
                f"leave-one-out refit failed at observation {s}")
        if np.max(np.abs(g)) < 1e-8 * (1.0 + abs(d["L_pen"])):
            break
        H = -d["H"]
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError as exc:
            raise StackingError(
                f"leave-one-out refit failed at observation {s}") from exc
        t = 1.0
        moved = False
        for _ in range(30):
            cand = u + t * step
            d_new = ws.derivatives(cand[:n_phi], cand[n_phi:], lam,
                                   fit.theta, rows=rows)
            if d_new["L_pen"] >= d["L_pen"] - 1e-12:
                u, d, moved = cand, d_new, True
                break
            t *= 0.5
        if not moved:
            break
    H_minus = -d["H"]
    return u, 0.5 * (H_minus + H_minus.T)


def _clamp_pd(H: np.ndarray) -> np.ndarray:
    """Clip the spectrum to a positive floor.

    Last resort for reduced fits with genuinely flat or indefinite
    directions: the clamped matrix draws a wide but proper Gaussian in
    those directions instead of failing."""
    vals, vecs = np.linalg.eigh(H)
    floor = 1e-8 * max(float(vals.max()), 1.0)
    return (vecs * np.maximum(vals, floor)) @ vecs.T


def loo_density_matrix(fits, B: int = 500, *, seed) -> LooDensityMatrix:
    """Density matrix over the observations kept by every model.

    Rows follow ascending original data order; each entry draws from a
    seed derived from (seed, original row), so the result is identical
    for any scheduling or model ordering. Entries whose one-step update
    yields an indefinite deflated Hessian fall back to an exact
    leave-one-out refit, recorded per entry in `methods`.
    """
    fits = list(fits)
    if not fits:
        raise ValueError("need at least one fitted model")
    common = fits[0].workspace.kept_rows
    for f in fits[1:]:
        common = np.intersect1d(common, f.workspace.kept_rows)
    if common.size == 0:
        raise StackingError("the models share no completely observed rows")
    values = np.empty((common.size, len(fits)))
    methods = np.full((common.size, len(fits)), "one-step", dtype=object)
    clamped = 0
    refits = 0
    for k, f in enumerate(fits):
        pos = {orig: i for i, orig in enumerate(f.workspace.kept_rows)}
        for i, orig in enumerate(common):
            child = np.random.SeedSequence(entropy=(int(seed), int(orig)))
            s = pos[int(orig)]
            try:
                values[i, k] = loo_density(f, s, B, seed=child)
            except StackingError:
                u_m, H_m = _exact_loo_refit(f, s)
                child = np.random.SeedSequence(entropy=(int(seed), int(orig)))
                try:
                    values[i, k] = loo_density(f, s, B, seed=child,
                                               pseudo=(u_m, H_m))
                    methods[i, k] = "refit"
                except StackingError:
                    child = np.random.SeedSequence(
                        entropy=(int(seed), int(orig)))
                    values[i, k] = loo_density(f, s, B, seed=child,
                                               pseudo=(u_m, _clamp_pd(H_m)))
                    methods[i, k] = "refit-clamped"
                refits += 1
            if values[i, k] <= DENSITY_FLOOR:
                clamped += 1
    dropped = max(f.workspace.kept_rows.size for f in fits) - common.size
    return LooDensityMatrix(values=values, rows=common.copy(),
                            methods=methods, B=B, seed=seed,
                            diagnostics={"clamped": clamped,
                                         "refit_rows": refits,
                                         "rows_dropped_for_alignment":
                                             int(dropped)})


# ---------------------------------------------------------------------------
# Weight optimization
# ---------------------------------------------------------------------------


@dataclass
class StackingResult:
    """Simplex weights maximizing the stacked leave-one-out objective."""

    xi: np.ndarray
    objective: float
    trace: list
    diagnostics: dict = field(default_factory=dict)


def optimize_weights(densities, tol: float = 1e-10,
                     max_iter: int = 10_000) -> StackingResult:
    """Maximize sum_s log sum_k xi_k p_sk over the simplex.

    Multiplicative updates xi_k <- xi_k * mean_s[p_sk / mix_s] from a
    uniform start: monotone for this concave objective, and exactly
    renormalized every iteration.
    """
    P = densities.values if isinstance(densities, LooDensityMatrix) \
        else np.asarray(densities, dtype=float)
    if P.ndim != 2 or P.shape[0] < 1:
        raise ValueError("densities must be an observations-by-models matrix")
    if not np.all(np.isfinite(P)) or np.any(P <= 0):
        raise StackingError("densities must be strictly positive and finite")
    n, K = P.shape
    if K == 1:
        obj = float(np.log(P[:, 0]).sum())
        return StackingResult(xi=np.ones(1), objective=obj, trace=[obj],
                              diagnostics={"iterations": 0,
                                           "converged": True})
    xi = np.full(K, 1.0 / K)
    trace = []
    prev = -np.inf
    converged = False
    for it in range(max_iter):
        mix = P @ xi
        obj = float(np.log(mix).sum())
        trace.append(obj)
        if obj - prev < tol and it > 0:
            converged = True
            break
        prev = obj
        xi = xi * (P / mix[:, None]).mean(axis=0)
        xi = xi / xi.sum()
    mix = P @ xi
    return StackingResult(xi=xi, objective=float(np.log(mix).sum()),
                          trace=trace,
                          diagnostics={"iterations": len(trace),
                                       "converged": converged})


# ---------------------------------------------------------------------------
# Stacked estimand
# ---------------------------------------------------------------------------


def stacked_estimand(results, xi, *, seed, R: int | None = None,
                     level: float = 0.95) -> EstimandResult:
    """Mixture posterior of the estimand: model k with probability xi_k,
    then one of model k's draws.

    results holds per-model EstimandResult objects carrying draw_values
    (or plain draw arrays). A degenerate weight vector returns that
    model's draws unchanged.
    """
    arrays = []
    alpha_red = None
    for r in results:
        vals = r.draw_values if isinstance(r, EstimandResult) else \
            np.asarray(r, dtype=float)
        if vals is None or np.size(vals) == 0:
            raise ValueError("every model needs a non-empty set of draws")
        arrays.append(np.asarray(vals, dtype=float))
        if isinstance(r, EstimandResult):
            alpha_red = r.alpha_red if alpha_red in (None, r.alpha_red) \
                else np.nan
    xi = np.asarray(xi, dtype=float)
    if xi.size != len(arrays) or np.any(xi < -1e-12):
        raise ValueError("weights must be a non-negative vector, one per "
                         "model")
    xi = np.clip(xi, 0.0, None)
    xi = xi / xi.sum()
    top = int(np.argmax(xi))
    if xi[top] >= 1.0 - 1e-12:
        mix = arrays[top].copy()
    else:
        R = R or max(a.size for a in arrays)
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        ks = rng.choice(xi.size, size=R, p=xi)
        mix = np.empty(R)
        for k, a in enumerate(arrays):
            sel = ks == k
            cnt = int(sel.sum())
            if cnt:
                mix[sel] = a[rng.integers(0, a.size, size=cnt)]
    lo, hi = np.quantile(mix, [(1 - level) / 2, (1 + level) / 2])
    return EstimandResult(delta=float(mix.mean()), lower=float(lo),
                          upper=float(hi),
                          alpha_red=np.nan if alpha_red is None else alpha_red,
                          subset=None, exposure=None, level=level,
                          draw_values=mix)
