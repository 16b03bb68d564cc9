"""Model assembly: linear predictors for the four distributed-lag structures,
the negative binomial penalized log-likelihood, and its derivatives.

Parameters are partitioned into inner parameters φ (those the association
functions are composed with: index weights and lag-weight coefficients),
outer parameters γ (all spline coefficients entering the predictor linearly:
exposure-response, lag surface, covariate smooths, intercepts), and tuning
parameters (smoothing λ, dispersion θ) handled one level up. Given φ the
predictor is linear in γ, so the γ problem is a penalized GLM; all
φ-derivatives are chained analytically through the basis derivatives and the
constraint reparameterizations.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln, polygamma

from . import basis as bas
from .exposure import ExposureProcess, compute_range_bounds

STRUCTURES = ("si-ace", "si-drf", "add-ace", "add-drf")

# Number of points in the fixed sum-to-zero constraint grids for f and for
# the exposure axis of ψ. The grids span the pre-specified Cauchy-Schwarz
# ranges, so the constraint does not move when φ does.
CONSTRAINT_GRID = 101


@dataclass(frozen=True)
class CovariateTerm:
    """One confounder term: a penalized smooth (open or cyclic), an
    unpenalized linear column, or a ridge-penalized random intercept."""

    name: str
    kind: str = "smooth"  # smooth | cyclic | linear | random_intercept
    dimension: int = 15
    domain: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind not in ("smooth", "cyclic", "linear", "random_intercept"):
            raise ValueError(f"unknown covariate term kind {self.kind!r}")
        if self.kind == "cyclic" and self.domain is None:
            raise ValueError("cyclic terms need an explicit (lo, hi) period")


@dataclass(frozen=True)
class ModelSpec:
    """Declaration of one model structure and its smoothing setup."""

    structure: str
    M: int
    L: float = 15.0
    d_w: int = 10
    d_f: int = 20
    d_psi_x: int = 10
    d_psi_l: int = 10
    terms: tuple[CovariateTerm, ...] = ()
    alpha_direction: str = "ones"  # "ones" | "e1"

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise ValueError(f"unknown structure {self.structure!r}")
        if self.M < 1:
            raise ValueError("need at least one exposure")
        if self.alpha_direction not in ("ones", "e1"):
            raise ValueError("alpha_direction must be 'ones' or 'e1'")

    @property
    def is_single_index(self) -> bool:
        return self.structure.startswith("si")

    @property
    def is_ace(self) -> bool:
        return self.structure.endswith("ace")


@dataclass
class ModelData:
    """Counts with their observation times and the exposure record.

    processes maps group id -> {exposure name -> ExposureProcess}. Rows whose
    lag window reaches before the start of the group's exposure record are
    dropped at workspace construction.
    """

    y: np.ndarray
    times: np.ndarray
    processes: dict
    covariates: dict = field(default_factory=dict)
    groups: np.ndarray | None = None
    offset: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y)
        self.times = np.asarray(self.times, dtype=float)
        n = self.y.size
        if self.times.size != n:
            raise ValueError("times and y must have equal length")
        if np.any(self.y < 0) or not np.issubdtype(self.y.dtype, np.integer):
            raise ValueError("y must hold non-negative integer counts")
        if self.groups is None:
            self.groups = np.zeros(n, dtype=int)
        self.groups = np.asarray(self.groups)
        if self.offset is None:
            self.offset = np.zeros(n)
        self.offset = np.asarray(self.offset, dtype=float)
        for name, vals in self.covariates.items():
            self.covariates[name] = np.asarray(vals, dtype=float)
            if self.covariates[name].size != n:
                raise ValueError(f"covariate {name!r} has wrong length")

    @property
    def exposure_names(self) -> list:
        first = next(iter(self.processes.values()))
        return list(first.keys())


@dataclass
class PenaltyTerm:
    """One penalty block on a contiguous coefficient slice of u = (φ, γ).

    components holds (smoothing-parameter index, PSD matrix) pairs; a
    bivariate tensor smooth has two components on the same slice, every
    other block has one.
    """

    label: str
    start: int
    size: int
    components: list
    # cached spectra for the log-determinant of the block
    _single: tuple | None = None      # (rank, logdet_pos)
    _tensor: tuple | None = None      # (eigs_x, eigs_l)


@dataclass
class ParameterLayout:
    """Index bookkeeping for (φ, γ, λ)."""

    phi_blocks: list
    gamma_blocks: list
    n_phi: int
    n_gamma: int
    n_lambda: int
    lambda_labels: list
    penalties: list

    @property
    def n_coef(self) -> int:
        return self.n_phi + self.n_gamma

    def phi_slice(self, name: str) -> slice:
        for label, start, size in self.phi_blocks:
            if label == name:
                return slice(start, start + size)
        raise KeyError(name)

    def gamma_slice(self, name: str) -> slice:
        for label, start, size in self.gamma_blocks:
            if label == name:
                return slice(start, start + size)
        raise KeyError(name)


# ---------------------------------------------------------------------------
# Negative binomial pieces
# ---------------------------------------------------------------------------


def nb_loglik(y, mu, theta) -> float:
    """Log NB2 mass with mean mu and variance mu + mu²/θ, summed over
    elements."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if not (np.all(np.isfinite(mu)) and np.isfinite(theta)):
        raise ValueError("non-finite mean or dispersion")
    if np.any(mu <= 0) or theta <= 0:
        raise ValueError("mu and theta must be positive")
    val = (gammaln(y + theta) - gammaln(theta) - gammaln(y + 1.0)
           + theta * np.log(theta / (theta + mu))
           + y * np.log(mu / (theta + mu)))
    return float(np.sum(val))


def _nb_eta_derivs(y, mu, theta):
    """First and second derivatives of the log-mass in η = log μ."""
    denom = theta + mu
    d1 = y - mu * (y + theta) / denom
    d2 = -theta * mu * (y + theta) / denom**2
    return d1, d2


def _nb_theta_derivs(y, mu, theta):
    """Per-observation ∂l/∂θ, ∂²l/∂θ², ∂²l/∂η∂θ (θ on its natural scale)."""
    denom = theta + mu
    d_t = (digamma(y + theta) - digamma(theta) + np.log(theta) + 1.0
           - np.log(denom) - (y + theta) / denom)
    d_tt = (polygamma(1, y + theta) - polygamma(1, theta) + 1.0 / theta
            - 2.0 / denom + (y + theta) / denom**2)
    d_et = mu * (y - mu) / denom**2
    return d_t, d_tt, d_et


# ---------------------------------------------------------------------------
# Constraint helpers
# ---------------------------------------------------------------------------


def _null_space_transform(row: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the null space of a single constraint row."""
    from scipy.linalg import qr

    Q, R = qr(row[:, None], mode="full")
    if R[0, 0] < 0:
        Q = -Q
    return Q[:, 1:]


def _basis_matrices(b: bas.SplineBasis, x: np.ndarray, max_order: int):
    return [bas.evaluate_basis(b, x, k) for k in range(max_order + 1)]


# ---------------------------------------------------------------------------
# Workspace
# ---------------------------------------------------------------------------


class Workspace:
    """Caches everything that does not change during fitting: trimmed data,
    exposure summaries, bases, constraint transforms, penalty blocks."""

    def __init__(self, spec: ModelSpec, data: ModelData):
        if spec.is_single_index and spec.M < 2:
            warnings.warn("single-index structure with one exposure; the "
                          "index reduces to that exposure", stacklevel=2)
        names = data.exposure_names
        if len(names) != spec.M:
            raise ValueError("spec.M does not match the exposure record")
        self.spec = spec
        self.data = data
        self.exposure_names = names

        lookback = spec.L if spec.is_ace else spec.L - 1.0
        keep = np.ones(data.y.size, dtype=bool)
        for g in np.unique(data.groups):
            procs = data.processes[g]
            t0 = max(p.times[0] for p in procs.values())
            t1 = min(p.times[-1] for p in procs.values())
            in_g = data.groups == g
            keep &= ~in_g | ((data.times - lookback >= t0 - 1e-9)
                             & (data.times <= t1 + 1e-9))
        self.kept_rows = np.flatnonzero(keep)
        self.dropped_rows = int(np.sum(~keep))
        if self.kept_rows.size == 0:
            raise ValueError("no observation has a complete lag window")
        if not np.allclose(data.times, np.round(data.times)):
            raise ValueError("observation times must fall on integer days")

        self.y = data.y[keep].astype(float)
        self.times = data.times[keep]
        self.groups = data.groups[keep]
        self.offset = data.offset[keep]
        self.n = self.y.size

        self.bounds = compute_range_bounds(data.processes, spec.L)
        self._per_exposure_bounds()
        self._build_exposure_caches()
        self._build_structure_bases()
        self._build_covariate_designs()
        self._build_layout()
        self._design_cache = {}

    # -- construction ------------------------------------------------------

    def _per_exposure_bounds(self):
        spec, data = self.spec, self.data
        self.bound_E = np.empty(spec.M)
        self.bound_EL = np.empty(spec.M)
        for j, name in enumerate(self.exposure_names):
            sub = {g: {name: procs[name]} for g, procs in data.processes.items()}
            rb = compute_range_bounds(sub, spec.L)
            self.bound_E[j] = rb.E_bar
            self.bound_EL[j] = rb.E_bar_L

    def _build_exposure_caches(self):
        """Z[i,m,q] = ∫ b_q(l) X_m(t_i - l) dl for ACE structures;
        Xlag[i,l,m] = X_m(t_i - l) at integer lags for DRF structures."""
        spec = self.spec
        if spec.is_ace:
            self.w_basis = bas.bspline_basis(0.0, spec.L, spec.d_w)
            self.w_gram = bas.basis_gram(self.w_basis)
            self.w_integrals = bas.basis_integrals(self.w_basis)
            # quadrature nodes shared by all integer observation times
            knots = np.unique(self.w_basis.knots)
            ints = np.arange(1.0, spec.L)
            breaks = np.unique(np.concatenate([[0.0, spec.L], knots, ints]))
            from .exposure import _gauss_nodes

            nodes, wgt = _gauss_nodes(breaks)
            Bq = bas.evaluate_basis(self.w_basis, nodes)  # (S, d_w)
            A = Bq * wgt[:, None]
            Z = np.empty((self.n, spec.M, spec.d_w))
            for g in np.unique(self.groups):
                rows = np.flatnonzero(self.groups == g)
                tq = self.times[rows, None] - nodes[None, :]
                for m, name in enumerate(self.exposure_names):
                    proc = self.data.processes[g][name]
                    Z[rows, m, :] = proc(tq, check=False) @ A
            self.Z = Z
        else:
            L_int = int(round(spec.L))
            lags = np.arange(L_int, dtype=float)
            Xlag = np.empty((self.n, L_int, spec.M))
            for g in np.unique(self.groups):
                rows = np.flatnonzero(self.groups == g)
                tq = self.times[rows, None] - lags[None, :]
                for m, name in enumerate(self.exposure_names):
                    proc = self.data.processes[g][name]
                    Xlag[rows, :, m] = proc(tq, check=False)
            self.Xlag = Xlag
            self.lags = lags

    def _build_structure_bases(self):
        spec = self.spec
        if spec.structure == "si-ace":
            dom = self.bounds.E_bar_L
            fb = bas.bspline_basis(-dom, dom, spec.d_f)
            self.f_bases = [fb]
            self.f_transforms = [self._sum_to_zero(fb)]
        elif spec.structure == "add-ace":
            self.f_bases, self.f_transforms = [], []
            for m in range(spec.M):
                dom = self.bound_EL[m]
                fb = bas.bspline_basis(-dom, dom, spec.d_f)
                self.f_bases.append(fb)
                self.f_transforms.append(self._sum_to_zero(fb))
        else:
            self.psi_l_basis = bas.bspline_basis(0.0, spec.L - 1.0, spec.d_psi_l)
            self.Bl = bas.evaluate_basis(self.psi_l_basis, self.lags)
            self.psi_x_bases, self.psi_x_transforms = [], []
            doms = [self.bounds.E_bar] if spec.structure == "si-drf" \
                else [self.bound_E[m] for m in range(spec.M)]
            for dom in doms:
                xb = bas.bspline_basis(-dom, dom, spec.d_psi_x)
                self.psi_x_bases.append(xb)
                self.psi_x_transforms.append(self._sum_to_zero(xb))
        if spec.is_single_index:
            M = spec.M
            self.alpha_c = np.ones(M) if spec.alpha_direction == "ones" \
                else np.eye(M)[0]

    @staticmethod
    def _sum_to_zero(b: bas.SplineBasis) -> np.ndarray:
        grid = np.linspace(b.domain[0], b.domain[1], CONSTRAINT_GRID)
        row = bas.evaluate_basis(b, grid).sum(axis=0)
        return _null_space_transform(row)

    def _build_covariate_designs(self):
        """Fixed design columns: intercept, covariate smooths/linears,
        random-intercept dummies. Returns are cached; only the structure
        design depends on φ."""
        cols = [np.ones((self.n, 1))]
        self.gamma_names = [("intercept", 1)]
        self.term_info = {}
        for term in self.spec.terms:
            if term.kind == "random_intercept":
                levels = np.unique(self.groups)
                D = (self.groups[:, None] == levels[None, :]).astype(float)
                cols.append(D)
                self.gamma_names.append((f"ranef:{term.name}", levels.size))
                self.term_info[term.name] = ("random_intercept", levels)
                continue
            z = self.data.covariates[term.name][self.kept_rows]
            if term.kind == "linear":
                cols.append(z[:, None])
                self.gamma_names.append((f"linear:{term.name}", 1))
                self.term_info[term.name] = ("linear", None)
                continue
            if term.kind == "cyclic":
                b = bas.bspline_basis(*term.domain, term.dimension, kind="cyclic")
            else:
                lo, hi = float(z.min()), float(z.max())
                b = bas.bspline_basis(lo, hi, term.dimension)
            B = bas.evaluate_basis(b, z)
            C = _null_space_transform(B.sum(axis=0))
            cols.append(B @ C)
            self.gamma_names.append((f"smooth:{term.name}", C.shape[1]))
            self.term_info[term.name] = ("smooth", (b, C))
        self.fixed_design = np.concatenate(cols, axis=1)

    def _build_layout(self):
        spec = self.spec
        phi_blocks, pos = [], 0
        if spec.is_single_index and spec.M >= 2:
            phi_blocks.append(("alpha_star", 0, spec.M - 1))
            pos = spec.M - 1
        if spec.structure == "si-ace":
            phi_blocks.append(("w_star", pos, spec.d_w - 1))
            pos += spec.d_w - 1
        elif spec.structure == "add-ace":
            for m in range(spec.M):
                phi_blocks.append((f"w_star[{m}]", pos, spec.d_w - 1))
                pos += spec.d_w - 1
        n_phi = pos

        gamma_blocks, gpos = [("intercept", 0, 1)], 1
        struct_blocks = []
        if spec.is_ace:
            n_f = 1 if spec.structure == "si-ace" else spec.M
            for m in range(n_f):
                size = self.f_transforms[m].shape[1]
                struct_blocks.append((f"f[{m}]", gpos, size))
                gpos += size
        else:
            n_psi = 1 if spec.structure == "si-drf" else spec.M
            for m in range(n_psi):
                size = self.psi_x_transforms[m].shape[1] * spec.d_psi_l
                struct_blocks.append((f"psi[{m}]", gpos, size))
                gpos += size
        gamma_blocks.extend(struct_blocks)
        for label, width in self.gamma_names[1:]:
            gamma_blocks.append((label, gpos, width))
            gpos += width
        n_gamma = gpos
        self.struct_slice = slice(struct_blocks[0][1] + n_phi,
                                  struct_blocks[-1][1] + struct_blocks[-1][2] + n_phi) \
            if struct_blocks else slice(n_phi + 1, n_phi + 1)

        penalties, lam_labels = [], []

        def new_lambda(label):
            lam_labels.append(label)
            return len(lam_labels) - 1

        # w penalties act on the unconstrained coordinates through the
        # Jacobian of the constraint map at zero, keeping the penalty an
        # exact quadratic in β^{w*}.
        if spec.is_ace:
            Sw = bas.build_penalty(self.w_basis, 2).matrix
            J0 = bas.w_jacobian(bas.reparameterize_w(
                np.zeros(spec.d_w - 1), self.w_gram, self.w_integrals))
            Sw_star = J0.T @ Sw @ J0
            Sw_star = 0.5 * (Sw_star + Sw_star.T)
            for label, start, size in phi_blocks:
                if label.startswith("w_star"):
                    k = new_lambda("lambda_" + label)
                    penalties.append(PenaltyTerm("pen_" + label, start, size,
                                                 [(k, Sw_star)]))
        if spec.is_ace:
            for m, (label, start, size) in enumerate(
                    b for b in gamma_blocks if b[0].startswith("f[")):
                Sf = bas.build_penalty(self.f_bases[m], 2).matrix
                C = self.f_transforms[m]
                Sfc = C.T @ Sf @ C
                k = new_lambda(f"lambda_f[{m}]")
                penalties.append(PenaltyTerm(f"pen_f[{m}]", n_phi + start, size,
                                             [(k, 0.5 * (Sfc + Sfc.T))]))
        else:
            Sl = bas.build_penalty(self.psi_l_basis, 2).matrix
            for m, (label, start, size) in enumerate(
                    b for b in gamma_blocks if b[0].startswith("psi[")):
                Sx = bas.build_penalty(self.psi_x_bases[m], 2).matrix
                C = self.psi_x_transforms[m]
                Sxc = C.T @ Sx @ C
                kx = new_lambda(f"lambda_psi_x[{m}]")
                kl = new_lambda(f"lambda_psi_l[{m}]")
                dl = spec.d_psi_l
                dxc = Sxc.shape[0]
                comp_x = np.kron(0.5 * (Sxc + Sxc.T), np.eye(dl))
                comp_l = np.kron(np.eye(dxc), 0.5 * (Sl + Sl.T))
                penalties.append(PenaltyTerm(f"pen_psi[{m}]", n_phi + start,
                                             size, [(kx, comp_x), (kl, comp_l)]))
        for (label, start, size), term in zip(gamma_blocks[1 + len(struct_blocks):],
                                              self.spec.terms):
            if term.kind == "linear":
                continue
            if term.kind == "random_intercept":
                k = new_lambda(f"lambda_ranef:{term.name}")
                penalties.append(PenaltyTerm(f"pen_ranef:{term.name}",
                                             n_phi + start, size,
                                             [(k, np.eye(size))]))
            else:
                b, C = self.term_info[term.name][1]
                S = bas.build_penalty(b, 2).matrix
                Sc = C.T @ S @ C
                k = new_lambda(f"lambda_h:{term.name}")
                penalties.append(PenaltyTerm(f"pen_h:{term.name}",
                                             n_phi + start, size,
                                             [(k, 0.5 * (Sc + Sc.T))]))

        for p in penalties:
            if len(p.components) == 1:
                S = p.components[0][1]
                eig = np.linalg.eigvalsh(S)
                tol = 1e-10 * max(eig.max(), 1.0)
                pos = eig[eig > tol]
                p._single = (pos.size, float(np.sum(np.log(pos))))
            else:
                Sxc = p.components[0][1]
                # recover the small factors: components are Sx ⊗ I and I ⊗ Sl
                dl = self.spec.d_psi_l
                dx = p.size // dl
                Sx_small = Sxc[::dl, ::dl].copy()
                Sl_small = p.components[1][1][:dl, :dl].copy()
                ex = np.linalg.eigvalsh(Sx_small)
                el = np.linalg.eigvalsh(Sl_small)
                ex[ex < 1e-10 * max(ex.max(), 1.0)] = 0.0
                el[el < 1e-10 * max(el.max(), 1.0)] = 0.0
                p._tensor = (ex, el)

        self.layout = ParameterLayout(
            phi_blocks=phi_blocks, gamma_blocks=gamma_blocks,
            n_phi=n_phi, n_gamma=n_gamma, n_lambda=len(lam_labels),
            lambda_labels=lam_labels, penalties=penalties)

    # -- penalties ----------------------------------------------------------

    def penalty_matrix(self, lam: np.ndarray) -> np.ndarray:
        """Dense S^λ over u = (φ, γ)."""
        lam = np.asarray(lam, dtype=float)
        S = np.zeros((self.layout.n_coef, self.layout.n_coef))
        for p in self.layout.penalties:
            sl = slice(p.start, p.start + p.size)
            for k, mat in p.components:
                S[sl, sl] += lam[k] * mat
        return S

    def penalty_logdet(self, log_lam: np.ndarray):
        """log|S^λ|₊, its gradient in log λ, and the null dimension M_p of
        the full S^λ (zero eigenvalues, unpenalized coefficients included)."""
        log_lam = np.asarray(log_lam, dtype=float)
        total = 0.0
        grad = np.zeros(self.layout.n_lambda)
        covered = 0
        rank_sum = 0
        for p in self.layout.penalties:
            covered += p.size
            if p._single is not None:
                rank, logdet = p._single
                k = p.components[0][0]
                total += rank * log_lam[k] + logdet
                grad[k] += rank
                rank_sum += rank
            else:
                ex, el = p._tensor
                kx, kl = p.components[0][0], p.components[1][0]
                lx, ll = np.exp(log_lam[kx]), np.exp(log_lam[kl])
                pair = lx * ex[:, None] + ll * el[None, :]
                mask = (ex[:, None] > 0) | (el[None, :] > 0)
                total += float(np.sum(np.log(pair[mask])))
                grad[kx] += float(np.sum(lx * ex[:, None]
                                         * mask / np.where(mask, pair, 1.0)))
                grad[kl] += float(np.sum(ll * el[None, :]
                                         * mask / np.where(mask, pair, 1.0)))
                rank_sum += int(mask.sum())
        null_dim = (self.layout.n_coef - covered) + (covered - rank_sum)
        return total, grad, null_dim

    # -- structure designs and derivatives -----------------------------------

    def _phi_cache(self, phi: np.ndarray, scale=None):
        key = (phi.tobytes(), None if scale is None else tuple(scale))
        hit = self._design_cache.get(key)
        if hit is not None:
            return hit
        out = self._compute_phi_cache(phi, scale)
        if len(self._design_cache) > 8:
            self._design_cache.clear()
        self._design_cache[key] = out
        return out

    def _compute_phi_cache(self, phi: np.ndarray, scale=None):
        """Everything that depends on φ (and the exposure scaling used by
        the counterfactual estimand) but not on γ."""
        spec = self.spec
        c: dict = {"phi": phi.copy()}
        if spec.is_ace:
            Z = self.Z if scale is None else self.Z * np.asarray(scale)[None, :, None]
        else:
            Xlag = self.Xlag if scale is None \
                else self.Xlag * np.asarray(scale)[None, None, :]

        if spec.structure == "si-ace":
            sl_w = self.layout.phi_slice("w_star")
            if spec.M >= 2:
                sl_a = self.layout.phi_slice("alpha_star")
                aw = bas.reparameterize_alpha(phi[sl_a], self.alpha_c)
            else:
                aw = None
            alpha = aw.alpha if aw is not None else np.ones(1)
            ww = bas.reparameterize_w(phi[sl_w], self.w_gram, self.w_integrals)
            c.update(aw=aw, ww=ww)
            Zb = Z @ ww.beta_w
            Za = np.einsum("imq,m->iq", Z, alpha)
            E = Zb @ alpha
            c.update(Z=Z, Zb=Zb, Za=Za, E=E)
            C = self.f_transforms[0]
            B = _basis_matrices(self.f_bases[0], E, 2)
            c["Bf"] = [Bk @ C for Bk in B]
            c["Ds"] = c["Bf"][0]
        elif spec.structure == "add-ace":
            per_m = []
            cols = []
            for m in range(spec.M):
                sl = self.layout.phi_slice(f"w_star[{m}]")
                ww = bas.reparameterize_w(phi[sl], self.w_gram, self.w_integrals)
                Zm = Z[:, m, :]
                E = Zm @ ww.beta_w
                C = self.f_transforms[m]
                B = [Bk @ C for Bk in _basis_matrices(self.f_bases[m], E, 2)]
                per_m.append({"ww": ww, "Zm": Zm, "E": E, "Bf": B})
                cols.append(B[0])
            c["per_m"] = per_m
            c["Ds"] = np.concatenate(cols, axis=1)
        elif spec.structure == "si-drf":
            sl_a = self.layout.phi_slice("alpha_star") if spec.M >= 2 else None
            aw = bas.reparameterize_alpha(phi[sl_a], self.alpha_c) \
                if spec.M >= 2 else None
            alpha = aw.alpha if aw is not None else np.ones(1)
            e = Xlag @ alpha  # (n, L)
            B = _basis_matrices(self.psi_x_bases[0], e.ravel(), 2)
            n, L = e.shape
            dx = spec.d_psi_x
            Bx = [Bk.reshape(n, L, dx) for Bk in B]
            Cx = self.psi_x_transforms[0]
            c.update(aw=aw, Xlag=Xlag, e=e, Bx=Bx, Cx=Cx)
            # design row i: Σ_l (b^x(e_il)ᵀ Cx) ⊗ b^l(l)
            BC = Bx[0] @ Cx
            c["Ds"] = np.matmul(BC.transpose(0, 2, 1), self.Bl).reshape(n, -1)
        else:  # add-drf
            cols = []
            per_m = []
            for m in range(spec.M):
                e = Xlag[:, :, m]
                B = _basis_matrices(self.psi_x_bases[m], e.ravel(), 0)
                n, L = e.shape
                Bx0 = B[0].reshape(n, L, spec.d_psi_x)
                Cx = self.psi_x_transforms[m]
                BC = Bx0 @ Cx
                cols.append(np.matmul(BC.transpose(0, 2, 1),
                                      self.Bl).reshape(n, -1))
                per_m.append({"e": e})
            c["per_m"] = per_m
            c["Ds"] = np.concatenate(cols, axis=1) if cols else np.empty((self.n, 0))
        return c

    def design_matrix(self, phi: np.ndarray, scale=None, rows=None) -> np.ndarray:
        """Full γ design [1 | structure columns | covariates | dummies]."""
        c = self._phi_cache(np.asarray(phi, dtype=float), scale)
        Ds = c["Ds"]
        X = np.empty((self.n, self.layout.n_gamma))
        X[:, :1] = self.fixed_design[:, :1]
        X[:, 1:1 + Ds.shape[1]] = Ds
        X[:, 1 + Ds.shape[1]:] = self.fixed_design[:, 1:]
        return X if rows is None else X[rows]

    # -- likelihood ---------------------------------------------------------

    def linear_predictor(self, phi, gamma, scale=None, rows=None) -> np.ndarray:
        X = self.design_matrix(phi, scale, rows)
        off = self.offset if rows is None else self.offset[rows]
        return X @ np.asarray(gamma, dtype=float) + off

    def loglik(self, phi, gamma, theta, rows=None) -> float:
        eta = self.linear_predictor(phi, gamma, rows=rows)
        if np.any(np.abs(eta) > 345.0):
            return -np.inf
        y = self.y if rows is None else self.y[rows]
        return nb_loglik(y, np.exp(eta), theta)

    def eta_row(self, phi, gamma, s: int, scale=None) -> float:
        """Linear predictor for one kept observation without building the
        full design; used by per-observation leave-one-out scans."""
        spec = self.spec
        phi = np.asarray(phi, dtype=float)
        gamma = np.asarray(gamma, dtype=float)
        if spec.is_ace:
            Zs = self.Z[s]
            if scale is not None:
                Zs = Zs * np.asarray(scale)[:, None]
        else:
            Xs = self.Xlag[s]
            if scale is not None:
                Xs = Xs * np.asarray(scale)[None, :]
        if spec.structure == "si-ace":
            alpha = self.alpha_value(phi)
            sl = self.layout.phi_slice("w_star")
            ww = bas.reparameterize_w(phi[sl], self.w_gram, self.w_integrals)
            E = float(alpha @ (Zs @ ww.beta_w))
            cols = [bas.evaluate_basis(self.f_bases[0], E)
                    @ self.f_transforms[0]]
        elif spec.structure == "add-ace":
            cols = []
            for m in range(spec.M):
                sl = self.layout.phi_slice(f"w_star[{m}]")
                ww = bas.reparameterize_w(phi[sl], self.w_gram,
                                          self.w_integrals)
                E = float(Zs[m] @ ww.beta_w)
                cols.append(bas.evaluate_basis(self.f_bases[m], E)
                            @ self.f_transforms[m])
        elif spec.structure == "si-drf":
            alpha = self.alpha_value(phi)
            e = Xs @ alpha
            Bx = bas.evaluate_basis(self.psi_x_bases[0], e)
            cols = [((Bx @ self.psi_x_transforms[0]).T @ self.Bl).ravel()]
        else:
            cols = []
            for m in range(spec.M):
                Bx = bas.evaluate_basis(self.psi_x_bases[m], Xs[:, m])
                cols.append(((Bx @ self.psi_x_transforms[m]).T
                             @ self.Bl).ravel())
        Ds_row = np.concatenate(cols) if cols else np.empty(0)
        k = 1 + Ds_row.size
        eta = (self.fixed_design[s, 0] * gamma[0] + Ds_row @ gamma[1:k]
               + self.fixed_design[s, 1:] @ gamma[k:] + self.offset[s])
        return float(eta)

    def eta_row_draws(self, draws, s: int, scale=None) -> np.ndarray:
        """Linear predictors at one kept observation for a batch of joint
        (φ, γ) draws, shape (B,). Vectorizing over the batch matters to
        draw-heavy consumers; row b agrees with eta_row on draw b."""
        spec = self.spec
        draws = np.atleast_2d(np.asarray(draws, dtype=float))
        n_phi = self.layout.n_phi
        nb = draws.shape[0]
        P, G = draws[:, :n_phi], draws[:, n_phi:]
        if spec.is_ace:
            Zs = self.Z[s]
            if scale is not None:
                Zs = Zs * np.asarray(scale)[:, None]
        else:
            Xs = self.Xlag[s]
            if scale is not None:
                Xs = Xs * np.asarray(scale)[None, :]
        if spec.structure == "si-ace":
            if spec.M >= 2:
                A = bas.alpha_values(P[:, self.layout.phi_slice("alpha_star")],
                                     self.alpha_c)
            else:
                A = np.ones((nb, 1))
            W = bas.beta_w_values(P[:, self.layout.phi_slice("w_star")],
                                  self.w_gram, self.w_integrals)
            E = ((W @ Zs.T) * A).sum(axis=1)
            cols = [bas.evaluate_basis(self.f_bases[0], E)
                    @ self.f_transforms[0]]
        elif spec.structure == "add-ace":
            cols = []
            for m in range(spec.M):
                sl = self.layout.phi_slice(f"w_star[{m}]")
                W = bas.beta_w_values(P[:, sl], self.w_gram, self.w_integrals)
                E = W @ Zs[m]
                cols.append(bas.evaluate_basis(self.f_bases[m], E)
                            @ self.f_transforms[m])
        elif spec.structure == "si-drf":
            if spec.M >= 2:
                A = bas.alpha_values(P[:, self.layout.phi_slice("alpha_star")],
                                     self.alpha_c)
            else:
                A = np.ones((nb, 1))
            e = A @ Xs.T
            L = e.shape[1]
            Bx = bas.evaluate_basis(self.psi_x_bases[0], e.ravel())
            BC = (Bx @ self.psi_x_transforms[0]).reshape(nb, L, -1)
            cols = [np.matmul(BC.transpose(0, 2, 1),
                              self.Bl).reshape(nb, -1)]
        else:
            cols = []
            for m in range(spec.M):
                Bx = bas.evaluate_basis(self.psi_x_bases[m], Xs[:, m])
                row = ((Bx @ self.psi_x_transforms[m]).T @ self.Bl).ravel()
                cols.append(np.broadcast_to(row, (nb, row.size)))
        Ds = np.concatenate(cols, axis=1) if cols else np.empty((nb, 0))
        k = 1 + Ds.shape[1]
        return (self.fixed_design[s, 0] * G[:, 0] + (Ds * G[:, 1:k]).sum(axis=1)
                + G[:, k:] @ self.fixed_design[s, 1:] + self.offset[s])

    def penalty_value(self, phi, gamma, lam) -> float:
        u = np.concatenate([phi, gamma])
        val = 0.0
        for p in self.layout.penalties:
            sl = slice(p.start, p.start + p.size)
            for k, mat in p.components:
                val += 0.5 * lam[k] * float(u[sl] @ mat @ u[sl])
        return val

    def penalized_loglik(self, phi, gamma, lam, theta) -> float:
        ll = self.loglik(phi, gamma, theta)
        if not np.isfinite(ll):
            return -np.inf
        return ll - self.penalty_value(np.asarray(phi, float),
                                       np.asarray(gamma, float),
                                       np.asarray(lam, float))

    def _structure_second_order(self, c: dict, gamma: np.ndarray, d1: np.ndarray,
                                rows=None):
        """G = ∂η/∂φ and the d1-weighted contractions of ∂²η/∂φ∂φ and
        ∂²η/∂φ∂γ_struct. Row subsetting applies to observations."""
        spec = self.spec
        n_phi = self.layout.n_phi
        idx = slice(None) if rows is None else rows
        if n_phi == 0:
            G = np.zeros((self.n if rows is None else len(rows), 0))
            return G, np.zeros((0, 0)), np.zeros((0, self.layout.n_gamma - 1))

        if spec.structure == "si-ace":
            sl_w = self.layout.phi_slice("w_star")
            gamma_f = gamma[self.struct_slice.start - n_phi:
                            self.struct_slice.stop - n_phi]
            Bf1, Bf2 = c["Bf"][1][idx], c["Bf"][2][idx]
            fp = Bf1 @ gamma_f
            fpp = Bf2 @ gamma_f
            Zb, Za, Z = c["Zb"][idx], c["Za"][idx], c["Z"][idx]
            Jw = bas.w_jacobian(c["ww"])
            Hw = bas.w_hessian(c["ww"])
            GE = np.empty((Zb.shape[0], n_phi))
            if c["aw"] is not None:
                sl_a = self.layout.phi_slice("alpha_star")
                Ja = bas.alpha_jacobian(c["aw"])
                Ha = bas.alpha_hessian(c["aw"])
                GE[:, sl_a] = Zb @ Ja
            GE[:, sl_w] = Za @ Jw
            G = fp[:, None] * GE
            w1 = d1 * fpp
            w2 = d1 * fp
            T = GE.T @ (w1[:, None] * GE)
            vq = w2 @ Za
            T[sl_w, sl_w] += np.einsum("q,qjk->jk", vq, Hw)
            if c["aw"] is not None:
                vm = w2 @ Zb
                T[sl_a, sl_a] += np.einsum("m,mjk->jk", vm, Ha)
                K = np.einsum("i,imq->mq", w2, Z)
                cross = Ja.T @ K @ Jw
                T[sl_a, sl_w] += cross
                T[sl_w, sl_a] += cross.T
            Cmat = np.zeros((n_phi, self.layout.n_gamma - 1))
            s0 = self.struct_slice.start - n_phi - 1
            Cmat[:, s0:s0 + Bf1.shape[1]] = GE.T @ (d1[:, None] * Bf1)
            return G, T, Cmat

        if spec.structure == "add-ace":
            gamma_off = 1
            Cmat = np.zeros((n_phi, self.layout.n_gamma - 1))
            nrow = len(rows) if rows is not None else self.n
            G = np.zeros((nrow, n_phi))
            T = np.zeros((n_phi, n_phi))
            for m, pm in enumerate(c["per_m"]):
                sl = self.layout.phi_slice(f"w_star[{m}]")
                gamma_f = gamma[gamma_off:gamma_off + pm["Bf"][0].shape[1]]
                Bf1, Bf2 = pm["Bf"][1][idx], pm["Bf"][2][idx]
                fp = Bf1 @ gamma_f
                fpp = Bf2 @ gamma_f
                Zm = pm["Zm"][idx]
                Jw = bas.w_jacobian(pm["ww"])
                Hw = bas.w_hessian(pm["ww"])
                GE = Zm @ Jw
                G[:, sl] = fp[:, None] * GE
                w1 = d1 * fpp
                w2 = d1 * fp
                T[sl, sl] = GE.T @ (w1[:, None] * GE) \
                    + np.einsum("q,qjk->jk", w2 @ Zm, Hw)
                Cmat[sl, gamma_off - 1:gamma_off - 1 + Bf1.shape[1]] = \
                    GE.T @ (d1[:, None] * Bf1)
                gamma_off += Bf1.shape[1]
            return G, T, Cmat

        if spec.structure == "si-drf":
            gamma_psi = gamma[self.struct_slice.start - n_phi:
                              self.struct_slice.stop - n_phi]
            Cx = c["Cx"]
            dl = self.spec.d_psi_l
            Gam = Cx @ gamma_psi.reshape(Cx.shape[1], dl)
            Bx1, Bx2 = c["Bx"][1][idx], c["Bx"][2][idx]
            Xlag = c["Xlag"][idx]
            GB = self.Bl @ Gam.T
            px = (Bx1 * GB[None, :, :]).sum(axis=2)
            pxx = (Bx2 * GB[None, :, :]).sum(axis=2)
            deta = np.matmul(px[:, None, :], Xlag)[:, 0, :]
            Ja = bas.alpha_jacobian(c["aw"])
            Ha = bas.alpha_hessian(c["aw"])
            G = deta @ Ja
            W = d1[:, None] * pxx
            M = Xlag.shape[2]
            WX = (W[:, :, None] * Xlag).reshape(-1, M)
            A1 = WX.T @ Xlag.reshape(-1, M)
            T = Ja.T @ A1 @ Ja
            vm = d1 @ deta
            T += np.einsum("m,mjk->jk", vm, Ha)
            P = d1[:, None, None] * (Bx1 @ Cx)
            R = np.matmul(Xlag.transpose(1, 2, 0), P.transpose(1, 0, 2))
            Cfull = np.tensordot(R, self.Bl, axes=(0, 0))
            Cfull = Cfull.reshape(self.spec.M, -1)
            Cmat = np.zeros((n_phi, self.layout.n_gamma - 1))
            s0 = self.struct_slice.start - n_phi - 1
            Cmat[:, s0:s0 + Cfull.shape[1]] = Ja.T @ Cfull
            return G, T, Cmat

        raise AssertionError("unreachable")  # pragma: no cover

    def derivatives(self, phi, gamma, lam, theta, rows=None, need="full"):
        """Gradient and Hessian of the penalized log-likelihood ℒ over
        u = (φ, γ). need="gamma" skips the φ blocks (inner Newton)."""
        phi = np.asarray(phi, dtype=float)
        gamma = np.asarray(gamma, dtype=float)
        lam = np.asarray(lam, dtype=float)
        c = self._phi_cache(phi)
        X = self.design_matrix(phi, rows=rows)
        off = self.offset if rows is None else self.offset[rows]
        y = self.y if rows is None else self.y[rows]
        eta = X @ gamma + off
        if np.any(np.abs(eta) > 345.0):
            # overflow region: report the objective as -inf so line searches
            # reject the point, with NaN derivative blocks
            nan_vec = np.full(gamma.size, np.nan)
            if need == "gamma":
                return {"grad_gamma": nan_vec, "H_gg": None, "eta": eta,
                        "mu": None, "L_pen": -np.inf}
            p = self.layout.n_coef
            return {"grad": np.full(p, np.nan), "H": None, "eta": eta,
                    "mu": None, "d1": None, "d2": None, "G": None, "X": X,
                    "L_pen": -np.inf}
        mu = np.exp(eta)
        d1, d2 = _nb_eta_derivs(y, mu, theta)
        u = np.concatenate([phi, gamma])
        S = self.penalty_matrix(lam)
        Su = S @ u
        n_phi = self.layout.n_phi
        L_pen = nb_loglik(y, mu, theta) - 0.5 * float(u @ Su)

        grad_gamma = X.T @ d1
        H_gg = X.T @ (d2[:, None] * X)
        if need == "gamma":
            return {"grad_gamma": grad_gamma - Su[n_phi:],
                    "H_gg": H_gg - S[n_phi:, n_phi:],
                    "eta": eta, "mu": mu, "L_pen": L_pen}

        G, T, Cmat = self._structure_second_order(c, gamma, d1, rows)
        grad_phi = G.T @ d1
        H_pp = G.T @ (d2[:, None] * G) + T
        H_pg = G.T @ (d2[:, None] * X)
        H_pg[:, 1:] += Cmat

        grad = np.concatenate([grad_phi, grad_gamma]) - Su
        H = np.empty((u.size, u.size))
        H[:n_phi, :n_phi] = H_pp
        H[:n_phi, n_phi:] = H_pg
        H[n_phi:, :n_phi] = H_pg.T
        H[n_phi:, n_phi:] = H_gg
        H -= S
        H = 0.5 * (H + H.T)
        return {"grad": grad, "H": H, "eta": eta, "mu": mu, "d1": d1, "d2": d2,
                "G": G, "X": X, "L_pen": L_pen}

    def extended_derivatives(self, phi, gamma, theta, rows=None):
        """Unpenalized gradient and Hessian of l over (φ, γ, θ), with θ on
        its natural scale, plus the per-observation score matrix."""
        phi = np.asarray(phi, dtype=float)
        gamma = np.asarray(gamma, dtype=float)
        d = self.derivatives(phi, gamma, np.zeros(self.layout.n_lambda),
                             theta, rows=rows)
        y = self.y if rows is None else self.y[rows]
        mu = d["mu"]
        d_t, d_tt, d_et = _nb_theta_derivs(y, mu, theta)
        p = self.layout.n_coef
        grad = np.empty(p + 1)
        grad[:p] = d["grad"]
        grad[p] = d_t.sum()
        H = np.empty((p + 1, p + 1))
        H[:p, :p] = d["H"]
        cross = np.concatenate([d["G"].T @ d_et, d["X"].T @ d_et])
        H[:p, p] = cross
        H[p, :p] = cross
        H[p, p] = d_tt.sum()
        scores = np.concatenate([
            d["d1"][:, None] * d["G"], d["d1"][:, None] * d["X"],
            d_t[:, None]], axis=1)
        return {"grad": grad, "H": H, "scores": scores, "mu": mu}

    # -- curve evaluation (used by inference) --------------------------------

    def w_curve(self, phi, lgrid, m=0) -> np.ndarray:
        if self.spec.structure == "si-ace":
            sl = self.layout.phi_slice("w_star")
        else:
            sl = self.layout.phi_slice(f"w_star[{m}]")
        ww = bas.reparameterize_w(np.asarray(phi, float)[sl], self.w_gram,
                                  self.w_integrals)
        return bas.evaluate_basis(self.w_basis, lgrid) @ ww.beta_w

    def alpha_value(self, phi) -> np.ndarray:
        if not self.spec.is_single_index or self.spec.M < 2:
            return np.ones(1)
        sl = self.layout.phi_slice("alpha_star")
        return bas.reparameterize_alpha(np.asarray(phi, float)[sl],
                                        self.alpha_c).alpha

    def f_curve(self, gamma, xgrid, m=0) -> np.ndarray:
        label = f"f[{m}]"
        sl = self.layout.gamma_slice(label)
        B = bas.evaluate_basis(self.f_bases[m], xgrid) @ self.f_transforms[m]
        return B @ np.asarray(gamma, float)[sl]

    def psi_surface(self, gamma, xgrid, lgrid, m=0) -> np.ndarray:
        sl = self.layout.gamma_slice(f"psi[{m}]")
        Cx = self.psi_x_transforms[m]
        Gam = Cx @ np.asarray(gamma, float)[sl].reshape(Cx.shape[1],
                                                        self.spec.d_psi_l)
        Bx = bas.evaluate_basis(self.psi_x_bases[m], xgrid)
        Bl = bas.evaluate_basis(self.psi_l_basis, lgrid)
        return Bx @ Gam @ Bl.T

    def h_curve(self, gamma, name, zgrid) -> np.ndarray:
        kind, info = self.term_info[name]
        if kind != "smooth":
            raise ValueError(f"term {name!r} is not a smooth")
        b, C = info
        sl = self.layout.gamma_slice(f"smooth:{name}")
        return (bas.evaluate_basis(b, zgrid) @ C) @ np.asarray(gamma, float)[sl]


def build_workspace(spec: ModelSpec, data: ModelData) -> Workspace:
    return Workspace(spec, data)


# Spec-level functional wrappers ------------------------------------------------


def linear_predictor(ws: Workspace, phi, gamma, rows=None) -> np.ndarray:
    return ws.linear_predictor(phi, gamma, rows=rows)


def penalized_loglik(ws: Workspace, phi, gamma, lam, theta) -> float:
    return ws.penalized_loglik(phi, gamma, lam, theta)


def loglik_derivatives(ws: Workspace, phi, gamma, lam, theta):
    return ws.derivatives(phi, gamma, lam, theta)
