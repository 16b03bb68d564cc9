"""Nested penalized-likelihood fitting.

Three levels: a damped Newton solve for the outer coefficients γ at fixed φ
(the predictor is linear in γ, so this problem is strictly concave), an
eigenvalue-safeguarded Newton on the profile objective Q(φ) = ℒ(φ, γ̂(φ)),
and BFGS over ρ = (log λ, log θ) maximizing the Laplace-approximate marginal
likelihood

    LAML(ρ) = ℒ(û) − ½ log det 𝓗 + ½ log|S^λ|₊ + M_p log(2π)/2,

with 𝓗 the negative Hessian of ℒ over (φ, γ) at the profiled optimum û,
|S^λ|₊ the product of positive penalty eigenvalues and M_p the number of
zero ones. The LAML gradient is available in two modes: "auto" uses the
envelope identity plus implicit differentiation of the stationarity
condition (third-derivative contractions by directional differencing of the
Hessian), "fd" re-profiles under central differences; the two must agree.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, eigh
from scipy.optimize import minimize

from .model import ModelData, ModelSpec, Workspace, build_workspace


class FitError(RuntimeError):
    """Raised when a fitting stage fails to converge."""

    def __init__(self, stage: str, message: str, diagnostics: dict | None = None):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.diagnostics = diagnostics or {}


@dataclass
class FitOptions:
    max_inner: int = 200
    max_middle: int = 200
    max_outer: int = 200
    max_halvings: int = 50
    inner_tol: float = 1e-10     # sup-norm scale for the γ gradient
    middle_tol: float = 1e-9     # sup-norm scale for the φ gradient
    outer_gtol: float = 1e-4
    max_step: float = 5.0        # trust radius for the middle Newton step
    phi_bound: float = 20.0      # box bound on the index coordinates
    gradient_mode: str = "auto"  # "auto" | "fd"
    fd_step: float = 1e-4
    init_log_lambda: float = 0.0


@dataclass
class FitResult:
    spec: ModelSpec
    workspace: Workspace
    phi: np.ndarray
    gamma: np.ndarray
    log_lambda: np.ndarray
    theta: float
    H: np.ndarray                 # negative Hessian of ℒ over (φ, γ), PD
    laml: float
    loglik: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def lam(self) -> np.ndarray:
        return np.exp(self.log_lambda)

    @property
    def coefficients(self) -> np.ndarray:
        return np.concatenate([self.phi, self.gamma])


def _sup(x) -> float:
    return float(np.max(np.abs(x))) if np.size(x) else 0.0


def _solve_pd(A: np.ndarray, b: np.ndarray, clip_scale: float = 1e-8):
    """Solve A x = b for symmetric A forced positive definite. Returns the
    solution and whether eigenvalue clipping was needed."""
    try:
        c = cho_factor(A, lower=True)
        return cho_solve(c, b), False
    except np.linalg.LinAlgError:
        w, V = eigh(A)
        floor = clip_scale * max(float(w.max()), 1e-12)
        w = np.maximum(w, floor)
        Vtb = V.T @ b
        scale = w[:, None] if Vtb.ndim == 2 else w
        return V @ (Vtb / scale), True


class _Engine:
    """Carries the workspace, options and warm-start state through the
    nested optimization."""

    def __init__(self, ws: Workspace, opts: FitOptions):
        self.ws = ws
        self.opts = opts
        self.state_phi = np.zeros(ws.layout.n_phi)
        self.state_gamma = self._initial_gamma()
        # fixed start set for the index coordinates: the profile objective
        # can hold several local maxima, and the flat start occasionally
        # sits on a basin boundary where Newton picks sides chaotically
        n_phi = ws.layout.n_phi
        self.phi_starts = [np.zeros(n_phi)]
        if n_phi:
            srng = np.random.default_rng(20210607)
            self.phi_starts += [0.7 * srng.standard_normal(n_phi)
                                for _ in range(2)]
        self.counters = {"inner_iterations": 0, "middle_iterations": 0,
                         "outer_evaluations": 0, "hessian_clips": 0,
                         "logdet_clips": 0}

    def _initial_gamma(self) -> np.ndarray:
        g = np.zeros(self.ws.layout.n_gamma)
        mean_y = max(float(self.ws.y.mean()), 1e-3)
        g[0] = np.log(mean_y) - float(self.ws.offset.mean())
        return g

    def initial_theta(self) -> float:
        y = self.ws.y
        m, v = float(y.mean()), float(y.var())
        return m**2 / max(v - m, 0.1 * m)

    # -- inner Newton over γ -------------------------------------------------

    def inner(self, phi, lam, theta, gamma0=None):
        ws, opts = self.ws, self.opts
        gamma = (self.state_gamma if gamma0 is None else gamma0).copy()
        d = ws.derivatives(phi, gamma, lam, theta, need="gamma")
        value = d["L_pen"]
        if not np.isfinite(value):
            gamma = self._initial_gamma()
            d = ws.derivatives(phi, gamma, lam, theta, need="gamma")
            value = d["L_pen"]
        prev_value = -np.inf
        for it in range(opts.max_inner):
            self.counters["inner_iterations"] += 1
            grad = d["grad_gamma"]
            if _sup(grad) <= opts.inner_tol * (1.0 + abs(value)):
                break
            # value plateau at arithmetic resolution (weakly identified
            # directions at tiny smoothing can stall short of the gradient
            # tolerance; the optimum is reached to machine precision)
            if value - prev_value <= 8e-16 * (1.0 + abs(value)):
                break
            prev_value = value
            step, clipped = _solve_pd(-d["H_gg"], grad)
            if clipped:
                self.counters["hessian_clips"] += 1
            slope = float(grad @ step)
            if slope <= 0.0:
                step = grad.copy()
                slope = float(grad @ grad)
            accepted = False
            t = 1.0
            for _ in range(opts.max_halvings):
                cand = gamma + t * step
                d_new = ws.derivatives(phi, cand, lam, theta, need="gamma")
                if (np.isfinite(d_new["L_pen"])
                        and d_new["L_pen"] >= value + 1e-4 * t * slope - 1e-12):
                    gamma, d, value = cand, d_new, d_new["L_pen"]
                    accepted = True
                    break
                t *= 0.5
            if not accepted:
                # no improving step at line-search resolution
                break
        else:
            raise FitError("inner", "no convergence in max_inner iterations",
                           {"grad_sup": _sup(d["grad_gamma"])})
        return gamma, value

    # -- middle Newton over φ --------------------------------------------------

    def _projected_grad(self, phi, grad_q):
        """Zero the outward gradient components at active box bounds."""
        bound = self.opts.phi_bound
        out = grad_q.copy()
        out[(phi >= bound - 1e-9) & (grad_q > 0)] = 0.0
        out[(phi <= -bound + 1e-9) & (grad_q < 0)] = 0.0
        return out

    def profile(self, lam, theta, phi0=None, gamma0=None):
        """Maximize Q(φ) = ℒ(φ, γ̂(φ)); returns (φ̂, γ̂, full derivative
        bundle at the optimum).

        With no explicit start this runs the Newton ascent from every
        member of the fixed start set and keeps the best profile value:
        single-index likelihoods are multimodal in the index parameters,
        and the estimate is the global penalized optimum."""
        if phi0 is not None or self.ws.layout.n_phi == 0:
            return self._profile_one(lam, theta, phi0, gamma0)
        best = None
        err = None
        for start in self.phi_starts:
            try:
                cand = self._profile_one(lam, theta, start, gamma0)
            except FitError as e:
                err = e
                continue
            if best is None or cand[2]["L_pen"] > best[2]["L_pen"]:
                best = cand
        if best is None:
            raise err
        self.state_phi, self.state_gamma = best[0].copy(), best[1].copy()
        return best

    def _profile_one(self, lam, theta, phi0=None, gamma0=None):
        """One bounded Newton ascent on Q(φ) from a given start.

        The box |φ_j| ≤ phi_bound exists because the unit-sphere charts
        compress: far out in chart coordinates the map flattens, the joint
        Hessian degenerates and the Laplace criterion diverges. Every
        practically distinct index sits well inside the box; at an active
        bound convergence is declared on the projected gradient."""
        ws, opts = self.ws, self.opts
        phi = (self.state_phi if phi0 is None else phi0).copy()
        phi = np.clip(phi, -opts.phi_bound, opts.phi_bound)
        gamma, value = self.inner(phi, lam, theta, gamma0)
        n_phi = ws.layout.n_phi
        if n_phi == 0:
            d = ws.derivatives(phi, gamma, lam, theta)
            self.state_phi, self.state_gamma = phi, gamma
            return phi, gamma, d
        prev_value = -np.inf
        for it in range(opts.max_middle):
            self.counters["middle_iterations"] += 1
            d = ws.derivatives(phi, gamma, lam, theta)
            grad_full = d["grad"][:n_phi]
            grad_q = self._projected_grad(phi, grad_full)
            if _sup(grad_q) <= opts.middle_tol * (1.0 + abs(value)):
                break
            # value plateau at arithmetic resolution
            if value - prev_value <= 8e-16 * (1.0 + abs(value)):
                break
            prev_value = value
            # projected Newton: freeze coordinates pressed against a bound
            free = grad_q != 0.0
            free |= (np.abs(phi) < opts.phi_bound - 1e-9)
            if not np.any(free):
                break
            H = d["H"]
            Hgg = -H[n_phi:, n_phi:]
            sol, clipped = _solve_pd(Hgg, H[n_phi:, :n_phi])
            H_q = -(H[:n_phi, :n_phi] + H[:n_phi, n_phi:] @ sol)
            Hf = H_q[np.ix_(free, free)]
            gf = grad_q[free]
            # Hf approximates the negative profile Hessian; it can be
            # indefinite away from the optimum, so invert absolute
            # eigenvalues with a floor (keeps an ascent direction), and
            # clamp each eigendirection move so flat directions crawl
            # without shrinking the well-conditioned ones
            w, V = eigh(Hf)
            w_abs = np.abs(w)
            floor = 1e-8 * max(float(w_abs.max()), 1e-12)
            if np.any(w < floor):
                self.counters["hessian_clips"] += 1
            w_abs = np.maximum(w_abs, floor)
            s_eig = np.clip((V.T @ gf) / w_abs, -opts.max_step, opts.max_step)
            step = np.zeros(n_phi)
            step[free] = V @ s_eig
            slope = float(grad_q @ step)
            if slope <= 0.0:
                step = np.zeros(n_phi)
                step[free] = gf
                slope = float(gf @ gf)
            failed = slope == 0.0
            if not failed:
                t = 1.0
                for _ in range(opts.max_halvings):
                    cand = np.clip(phi + t * step, -opts.phi_bound,
                                   opts.phi_bound)
                    try:
                        g_cand, v_cand = self.inner(cand, lam, theta, gamma)
                    except FitError:
                        v_cand = -np.inf
                    # Armijo test; plateau moves must count as failures or
                    # zero-length steps get accepted forever
                    if (np.isfinite(v_cand)
                            and v_cand >= value + 1e-4 * t * slope - 1e-12):
                        phi, gamma, value = cand, g_cand, v_cand
                        break
                    t *= 0.5
                else:
                    failed = True
            if failed:
                # no improving step exists at line-search resolution
                break
        else:
            raise FitError("middle", "no convergence in max_middle iterations",
                           {"grad_sup": _sup(grad_q)})
        d = ws.derivatives(phi, gamma, lam, theta)
        self.state_phi, self.state_gamma = phi.copy(), gamma.copy()
        return phi, gamma, d

    # -- LAML ------------------------------------------------------------------

    def _logdet_H(self, H_neg: np.ndarray) -> float:
        try:
            c = cho_factor(H_neg, lower=True)
            return 2.0 * float(np.sum(np.log(np.diag(c[0]))))
        except np.linalg.LinAlgError:
            self.counters["logdet_clips"] += 1
            w = np.linalg.eigvalsh(H_neg)
            w = np.maximum(w, 1e-10 * max(float(w.max()), 1e-12))
            return float(np.sum(np.log(w)))

    def laml_at(self, rho: np.ndarray, start: str = "multi"):
        """rho = (log λ_1..K, log θ). Returns (value, state dict).

        start="multi" profiles from the fixed start set, making the
        criterion a pure function of rho; external callers (finite
        differences, re-profiles) rely on that. start="state" continues
        from the engine's current profile optimum: inside one outer
        trajectory rho moves continuously and the warm solve lands in the
        same basin at a fraction of the iterations, with a multistart
        fallback if it fails outright."""
        ws = self.ws
        log_lam = rho[:-1]
        theta = float(np.exp(np.clip(rho[-1], -600.0, 600.0)))
        lam = np.exp(np.clip(log_lam, -690.0, 690.0))
        if start == "state":
            try:
                phi, gamma, d = self.profile(lam, theta,
                                             phi0=self.state_phi,
                                             gamma0=self.state_gamma)
            except FitError:
                start = "multi"
        if start == "multi":
            self.state_phi = np.zeros(ws.layout.n_phi)
            self.state_gamma = self._initial_gamma()
            phi, gamma, d = self.profile(lam, theta)
        H_neg = -d["H"]
        logdet_pen, logdet_grad, null_dim = ws.penalty_logdet(log_lam)
        value = (d["L_pen"] - 0.5 * self._logdet_H(H_neg)
                 + 0.5 * logdet_pen + 0.5 * null_dim * np.log(2.0 * np.pi))
        state = {"phi": phi, "gamma": gamma, "d": d, "H_neg": H_neg,
                 "lam": lam, "theta": theta, "log_lam": log_lam,
                 "logdet_pen_grad": logdet_grad}
        return float(value), state

    def laml_gradient_at(self, rho: np.ndarray, state=None):
        if self.opts.gradient_mode == "fd":
            return self._laml_gradient_fd(rho)
        if state is not None and state["phi"].size:
            if np.any(np.abs(state["phi"]) >= self.opts.phi_bound - 1e-9):
                # chart bound active: interior stationarity fails and the
                # implicit-differentiation identities with it
                return self._laml_gradient_fd(rho)
        return self._laml_gradient_auto(rho, state)

    def _laml_gradient_fd(self, rho: np.ndarray) -> np.ndarray:
        # difference quotients need profile solves far tighter than the
        # step, else warm-start termination bias leaks into the quotient
        h = self.opts.fd_step
        saved = (self.opts.inner_tol, self.opts.middle_tol)
        self.opts.inner_tol = min(saved[0], 1e-12)
        self.opts.middle_tol = min(saved[1], 1e-11)
        try:
            g = np.empty(rho.size)
            for k in range(rho.size):
                e = np.zeros(rho.size)
                e[k] = h
                vp, _ = self.laml_at(rho + e)
                vm, _ = self.laml_at(rho - e)
                g[k] = (vp - vm) / (2.0 * h)
        finally:
            self.opts.inner_tol, self.opts.middle_tol = saved
        return g

    def _laml_gradient_auto(self, rho: np.ndarray, state=None) -> np.ndarray:
        ws = self.ws
        if state is None:
            _, state = self.laml_at(rho)
        phi, gamma = state["phi"], state["gamma"]
        lam, theta = state["lam"], state["theta"]
        u = np.concatenate([phi, gamma])
        n_rho = rho.size
        H_neg = state["H_neg"]
        A = 0.5 * (H_neg + H_neg.T)
        try:
            c = cho_factor(A, lower=True)
        except np.linalg.LinAlgError:
            self.counters["logdet_clips"] += 1
            w, V = eigh(A)
            w = np.maximum(w, 1e-10 * max(float(w.max()), 1e-12))
            A = V @ (w[:, None] * V.T)
            c = cho_factor(A, lower=True)
        H_inv = cho_solve(c, np.eye(H_neg.shape[0]))

        ext = ws.extended_derivatives(phi, gamma, theta)
        p = ws.layout.n_coef

        grad = np.empty(n_rho)
        # per-λ penalty application S_j u and envelope terms
        for k in range(n_rho - 1):
            Sj_u = np.zeros(p)
            quad = 0.0
            for pen in ws.layout.penalties:
                sl = slice(pen.start, pen.start + pen.size)
                for idx, mat in pen.components:
                    if idx == k:
                        Sj_u[sl] += mat @ u[sl]
                        quad += float(u[sl] @ mat @ u[sl])
            envelope = -0.5 * lam[k] * quad
            # d𝓗/dρ_k at fixed u is λ_k S_j; add the u-motion term by a
            # directional difference of the Hessian along v = dû/dρ_k
            b = -lam[k] * Sj_u
            v = cho_solve(c, b)
            dH = self._lam_partial(k, lam, p)
            dH += self._directional_hessian(phi, gamma, lam, theta, v)
            tr = float(np.sum(H_inv * dH))
            grad[k] = envelope - 0.5 * tr + 0.5 * state["logdet_pen_grad"][k]

        # θ coordinate
        dtheta_env = theta * float(ext["grad"][p])
        b_theta = theta * ext["H"][:p, p]
        v = cho_solve(c, b_theta)
        dH = self._theta_partial(phi, gamma, lam, theta)
        dH += self._directional_hessian(phi, gamma, lam, theta, v)
        grad[-1] = dtheta_env - 0.5 * float(np.sum(H_inv * dH))
        return grad

    def _lam_partial(self, k: int, lam: np.ndarray, p: int) -> np.ndarray:
        out = np.zeros((p, p))
        for pen in self.ws.layout.penalties:
            sl = slice(pen.start, pen.start + pen.size)
            for idx, mat in pen.components:
                if idx == k:
                    out[sl, sl] += lam[k] * mat
        return out

    def _theta_partial(self, phi, gamma, lam, theta, h=1e-4) -> np.ndarray:
        """∂𝓗/∂log θ at fixed u, by central difference in log θ."""
        Hp = -self.ws.derivatives(phi, gamma, lam, theta * np.exp(h))["H"]
        Hm = -self.ws.derivatives(phi, gamma, lam, theta * np.exp(-h))["H"]
        return (Hp - Hm) / (2.0 * h)

    def _directional_hessian(self, phi, gamma, lam, theta, v, h=1e-6):
        """Directional derivative of 𝓗 along v in u-space."""
        norm = float(np.linalg.norm(v))
        if norm == 0.0:
            return np.zeros((v.size, v.size))
        n_phi = self.ws.layout.n_phi
        step = h * max(1.0, float(np.linalg.norm(np.concatenate([phi, gamma])))) / norm
        dv = step * v
        Hp = -self.ws.derivatives(phi + dv[:n_phi], gamma + dv[n_phi:], lam, theta)["H"]
        Hm = -self.ws.derivatives(phi - dv[:n_phi], gamma - dv[n_phi:], lam, theta)["H"]
        return (Hp - Hm) / (2.0 * step)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def inner_profile(ws: Workspace, phi, lam, theta, gamma0=None,
                  options: FitOptions | None = None):
    """γ̂(φ), the profile value Q(φ), and dγ̂/dφ by implicit differentiation."""
    eng = _Engine(ws, options or FitOptions())
    phi = np.asarray(phi, dtype=float)
    gamma, value = eng.inner(phi, np.asarray(lam, float), theta, gamma0)
    d = ws.derivatives(phi, gamma, np.asarray(lam, float), theta)
    n_phi = ws.layout.n_phi
    Hgg = -d["H"][n_phi:, n_phi:]
    dgamma_dphi, _ = _solve_pd(Hgg, d["H"][n_phi:, :n_phi])
    return gamma, value, dgamma_dphi


def outer_phi(ws: Workspace, lam, theta, options: FitOptions | None = None):
    """φ̂ maximizing the profile objective at fixed (λ, θ)."""
    eng = _Engine(ws, options or FitOptions())
    phi, _, _ = eng.profile(np.asarray(lam, float), theta)
    return phi


def laml(ws: Workspace, log_lambda, log_theta, options: FitOptions | None = None):
    eng = _Engine(ws, options or FitOptions())
    rho = np.concatenate([np.asarray(log_lambda, float).ravel(),
                          [float(log_theta)]])
    value, _ = eng.laml_at(rho)
    return value


def laml_gradient(ws: Workspace, log_lambda, log_theta,
                  options: FitOptions | None = None):
    eng = _Engine(ws, options or FitOptions())
    rho = np.concatenate([np.asarray(log_lambda, float).ravel(),
                          [float(log_theta)]])
    value, state = eng.laml_at(rho)
    return eng.laml_gradient_at(rho, state)


LOG_LAMBDA_RANGE = (-15.0, 15.0)
LOG_THETA_RANGE = (-3.0, 10.0)


def _project_rho_grad(rho, grad, bounds):
    """Zero gradient components that push past an active box bound."""
    out = np.asarray(grad, dtype=float).copy()
    for j, (lo, hi) in enumerate(bounds):
        if rho[j] >= hi - 1e-9 and out[j] > 0:
            out[j] = 0.0
        if rho[j] <= lo + 1e-9 and out[j] < 0:
            out[j] = 0.0
    return out


def fit_model(spec: ModelSpec | Workspace, data: ModelData | None = None,
              options: FitOptions | None = None) -> FitResult:
    """Full nested fit: bounded quasi-Newton on (log λ, log θ), profile
    solves inside. The box on ρ exists because smoothing parameters for
    effectively null terms diverge (the criterion approaches its supremum
    as λ → ∞): e^15 is already indistinguishable from infinite smoothing,
    and at an active bound the projected gradient is the right optimality
    measure."""
    opts = options or FitOptions()
    ws = spec if isinstance(spec, Workspace) else build_workspace(spec, data)
    eng = _Engine(ws, opts)

    rho0 = np.concatenate([np.full(ws.layout.n_lambda, opts.init_log_lambda),
                           [np.log(eng.initial_theta())]])
    bounds = ([LOG_LAMBDA_RANGE] * ws.layout.n_lambda + [LOG_THETA_RANGE])
    rho0 = np.clip(rho0, [b[0] for b in bounds], [b[1] for b in bounds])
    cache: dict = {}
    warmed = False

    def evaluate(rho):
        nonlocal warmed
        key = rho.tobytes()
        if key not in cache:
            if len(cache) > 6:
                cache.clear()
            eng.counters["outer_evaluations"] += 1
            # first evaluation fixes the basin by multistart; the rest of
            # the trajectory continues that profile optimum
            cache[key] = eng.laml_at(rho, start="state" if warmed
                                     else "multi")
            warmed = True
        return cache[key]

    def fun(rho):
        value, _ = evaluate(rho)
        return -value

    def jac(rho):
        _, state = evaluate(rho)
        return -eng.laml_gradient_at(rho, state)

    res = minimize(fun, rho0, method="L-BFGS-B", jac=jac, bounds=bounds,
                   options={"gtol": opts.outer_gtol, "ftol": 1e-12,
                            "maxiter": opts.max_outer, "maxls": 60})
    rho_hat = res.x
    # the reported optimum never depends on the warm path: re-profile by
    # multistart at the accepted rho
    value, state = eng.laml_at(rho_hat)
    grad_sup = _sup(_project_rho_grad(rho_hat, res.jac, bounds))
    if not res.success and grad_sup > 1e-2:
        raise FitError("outer", f"smoothing optimization failed: {res.message}",
                       {"grad_sup": grad_sup, "iterations": res.nit})

    phi, gamma, d = state["phi"], state["gamma"], state["d"]
    theta = state["theta"]
    lam = state["lam"]
    n_phi = ws.layout.n_phi

    def joint_grad_sup(dd, ph):
        g = dd["grad"].copy()
        g[:n_phi] = eng._projected_grad(ph, g[:n_phi])
        return _sup(g)

    # enforce the stationarity invariant at the reported estimates
    scale = 1.0 + abs(d["L_pen"])
    if joint_grad_sup(d, phi) > 1e-6 * scale:
        phi, gamma, d = eng.profile(lam, theta, phi, gamma)
        if joint_grad_sup(d, phi) > 1e-6 * scale:
            raise FitError("final", "stationarity tolerance not met",
                           {"grad_sup": joint_grad_sup(d, phi)})
    phi_at_bound = bool(np.any(np.abs(phi) >= opts.phi_bound - 1e-9))
    if phi_at_bound:
        warnings.warn("index coefficients stopped at the chart bound: the "
                      "exposure effect is too weak to identify the index",
                      stacklevel=2)

    H_neg = -d["H"]
    w, V = eigh(H_neg)
    ridged = False
    if w.min() <= 0:
        ridged = True
        w = np.maximum(w, 1e-10 * max(float(w.max()), 1e-12))
        H_neg = V @ (w[:, None] * V.T)
    if w.min() < 1e-12 * w.max():
        warnings.warn("near-singular joint Hessian: some directions are "
                      "unidentified (possibly a degenerate exposure)",
                      stacklevel=2)
    loglik = ws.loglik(phi, gamma, theta)
    diagnostics = dict(eng.counters)
    diagnostics.update({
        "outer_iterations": int(res.nit),
        "outer_grad_sup": grad_sup,
        "final_grad_sup": joint_grad_sup(d, phi),
        "dropped_rows": ws.dropped_rows,
        "hessian_ridged": ridged,
        "outer_success": bool(res.success),
        "rho_at_bound": bool(np.any([rho_hat[j] <= lo + 1e-9
                                     or rho_hat[j] >= hi - 1e-9
                                     for j, (lo, hi) in enumerate(bounds)])),
        "phi_at_bound": phi_at_bound,
        "condition_number": float(w.max() / w.min()),
    })
    return FitResult(spec=ws.spec, workspace=ws, phi=phi.copy(),
                     gamma=gamma.copy(), log_lambda=np.log(lam),
                     theta=theta, H=0.5 * (H_neg + H_neg.T), laml=value,
                     loglik=loglik, diagnostics=diagnostics)
