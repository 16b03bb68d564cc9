"""B-spline bases, derivative penalties, and constraint reparameterizations.

Bases are open (clamped) or cyclic B-splines with equally spaced interior
knots. Penalties are exact Gram matrices of basis derivatives, computed by
piecewise Gauss-Legendre quadrature. The constrained parameters of the
index-weight vector (unit norm, positive projection on a direction c) and of
the lag-weight coefficients (unit L2 norm of the curve, positive integral)
are reached from unconstrained vectors through a spherical map built on the
QR decomposition of c.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.interpolate import BSpline
from scipy.linalg import cho_solve, cholesky, qr, solve_triangular


@dataclass(frozen=True)
class SplineBasis:
    """A univariate B-spline basis on a fixed domain.

    knots holds the full knot vector, including the degree+1 repeats at each
    boundary for the open kind and the periodic extension for the cyclic
    kind. dimension is the number of basis functions.
    """

    knots: np.ndarray
    degree: int
    dimension: int
    kind: str
    domain: tuple[float, float]

    def __post_init__(self):
        if self.kind not in ("open", "cyclic"):
            raise ValueError(f"unknown basis kind {self.kind!r}")


@dataclass
class PenaltyBlock:
    """A PSD penalty matrix together with its smoothing-parameter handle."""

    matrix: np.ndarray
    lambda_index: int = -1


def bspline_basis(lo: float, hi: float, dimension: int, degree: int = 3,
                  kind: str = "open") -> SplineBasis:
    """Build a basis with equally spaced interior knots on [lo, hi]."""
    if hi <= lo:
        raise ValueError("domain must have positive length")
    if kind == "open":
        n_interior = dimension - degree - 1
        if n_interior < 0:
            raise ValueError("dimension too small for the requested degree")
        interior = np.linspace(lo, hi, n_interior + 2)[1:-1]
        knots = np.concatenate([np.full(degree + 1, lo), interior,
                                np.full(degree + 1, hi)])
    elif kind == "cyclic":
        if dimension < degree + 1:
            raise ValueError("cyclic basis needs dimension >= degree + 1")
        h = (hi - lo) / dimension
        # Equally spaced knots extended periodically by `degree` on each side.
        knots = lo + h * np.arange(-degree, dimension + degree + 1)
    else:
        raise ValueError(f"unknown basis kind {kind!r}")
    return SplineBasis(knots=knots, degree=degree, dimension=dimension,
                       kind=kind, domain=(float(lo), float(hi)))


_design_splines: dict = {}


def _open_design(x: np.ndarray, knots: np.ndarray, degree: int,
                 n_funcs: int, order: int) -> np.ndarray:
    # one vector-valued spline evaluates every basis column at once; the
    # objects are tiny and keyed by the immutable knot vector
    key = (knots.tobytes(), degree, n_funcs, order)
    spl = _design_splines.get(key)
    if spl is None:
        spl = BSpline(knots, np.eye(n_funcs), degree, extrapolate=True)
        if order:
            spl = spl.derivative(order)
        _design_splines[key] = spl
    return spl(x)


def evaluate_basis(basis: SplineBasis, x, derivative_order: int = 0) -> np.ndarray:
    """Evaluate all basis functions (or a derivative) at x.

    Returns an array of shape (d,) for scalar x and (len(x), d) otherwise.
    """
    if derivative_order < 0 or derivative_order > basis.degree:
        raise ValueError("derivative order must lie in [0, degree]")
    scalar = np.isscalar(x) or np.ndim(x) == 0
    xa = np.atleast_1d(np.asarray(x, dtype=float))
    lo, hi = basis.domain
    if basis.kind == "open":
        tol = 1e-10 * max(1.0, abs(lo), abs(hi))
        if np.any(xa < lo - tol) or np.any(xa > hi + tol):
            raise ValueError("x outside the basis domain")
        xa = np.clip(xa, lo, hi)
        B = _open_design(xa, basis.knots, basis.degree, basis.dimension,
                         derivative_order)
    else:
        period = hi - lo
        xa = lo + np.mod(xa - lo, period)
        n_ext = len(basis.knots) - basis.degree - 1
        B_ext = _open_design(xa, basis.knots, basis.degree, n_ext,
                             derivative_order)
        B = np.zeros((xa.size, basis.dimension))
        for q in range(n_ext):
            B[:, q % basis.dimension] += B_ext[:, q]
    return B[0] if scalar else B


def _quadrature_spans(basis: SplineBasis, n_nodes: int = 4):
    """Gauss-Legendre nodes/weights over each distinct knot span."""
    lo, hi = basis.domain
    breaks = np.unique(basis.knots)
    breaks = breaks[(breaks >= lo - 1e-12) & (breaks <= hi + 1e-12)]
    z, wz = leggauss(n_nodes)
    nodes, weights = [], []
    for a, b in zip(breaks[:-1], breaks[1:]):
        half = 0.5 * (b - a)
        nodes.append(0.5 * (a + b) + half * z)
        weights.append(half * wz)
    return np.concatenate(nodes), np.concatenate(weights)


def build_penalty(basis: SplineBasis, penalty_order: int) -> PenaltyBlock:
    """Gram matrix of penalty_order-th basis derivatives over the domain."""
    if penalty_order not in (1, 2):
        raise ValueError("penalty order must be 1 or 2")
    if basis.degree < penalty_order:
        raise ValueError("penalty order exceeds the basis degree")
    nodes, weights = _quadrature_spans(basis)
    B = evaluate_basis(basis, nodes, penalty_order)
    S = (B * weights[:, None]).T @ B
    S = 0.5 * (S + S.T)
    return PenaltyBlock(matrix=S)


def basis_gram(basis: SplineBasis) -> np.ndarray:
    """Exact Gram matrix of the basis functions, ∫ b_q(x) b_r(x) dx."""
    nodes, weights = _quadrature_spans(basis)
    B = evaluate_basis(basis, nodes, 0)
    M = (B * weights[:, None]).T @ B
    return 0.5 * (M + M.T)


def basis_integrals(basis: SplineBasis) -> np.ndarray:
    """Vector of basis integrals ∫ b_q(x) dx over the domain."""
    nodes, weights = _quadrature_spans(basis)
    return weights @ evaluate_basis(basis, nodes, 0)


def build_tensor_penalty(Sx: PenaltyBlock, Sl: PenaltyBlock,
                         lam_x: float, lam_l: float) -> np.ndarray:
    """Tensor-product penalty for coefficients ordered with the second
    (lag) index varying fastest: λx (Sx ⊗ I) + λl (I ⊗ Sl)."""
    dx = Sx.matrix.shape[0]
    dl = Sl.matrix.shape[0]
    if Sx.matrix.shape != (dx, dx) or Sl.matrix.shape != (dl, dl):
        raise ValueError("penalty blocks must be square")
    return (lam_x * np.kron(Sx.matrix, np.eye(dl))
            + lam_l * np.kron(np.eye(dx), Sl.matrix))


# ---------------------------------------------------------------------------
# Constraint reparameterizations
# ---------------------------------------------------------------------------


def _direction_frame(c: np.ndarray) -> np.ndarray:
    """Basis [c, Q+] with Q+ an orthonormal completion orthogonal to c.

    Sign of the Householder QR is fixed so the frame is deterministic.
    """
    c = np.asarray(c, dtype=float)
    if c.ndim != 1 or not np.any(c != 0.0):
        raise ValueError("constraint direction c must be a non-zero vector")
    M = c.size
    Q, R = qr(c[:, None], mode="full")
    if R[0, 0] < 0:
        Q = -Q
    B = np.empty((M, M))
    B[:, 0] = c
    B[:, 1:] = Q[:, 1:]
    return B


def _sphere_map(B: np.ndarray, v_tail: np.ndarray):
    """u = B [1, v_tail]; return (u/‖u‖, u, ‖u‖)."""
    v = np.concatenate([[1.0], np.asarray(v_tail, dtype=float)])
    u = B @ v
    norm = np.linalg.norm(u)
    return u / norm, u, norm


def _sphere_jacobian(B: np.ndarray, u: np.ndarray, norm: float) -> np.ndarray:
    """d(u/‖u‖)/dv_tail for u = B [1, v_tail]."""
    a = u / norm
    return (B[:, 1:] - np.outer(a, a @ B[:, 1:])) / norm


def _sphere_hessian(B: np.ndarray, u: np.ndarray, norm: float) -> np.ndarray:
    """Second derivatives of the unit-sphere map, shape (M, M-1, M-1)."""
    a = u / norm
    B2 = B[:, 1:]
    P = B2 / norm
    aP = a @ P
    # d2 n_i / du_a du_b = (-δab n_i - δib n_a - δia n_b + 3 n_i n_a n_b)/‖u‖²
    # contracted with B2 on both slots.
    G = P.T @ P
    H = np.empty((B.shape[0], B2.shape[1], B2.shape[1]))
    for i in range(B.shape[0]):
        H[i] = (-a[i] * G - np.outer(P[i], aP) - np.outer(aP, P[i])
                + 3.0 * a[i] * np.outer(aP, aP))
    return H


@dataclass
class IndexWeights:
    """Constrained index weights α with their unconstrained coordinates."""

    alpha: np.ndarray
    alpha_star: np.ndarray
    c: np.ndarray
    B_alpha: np.ndarray
    _u: np.ndarray = field(repr=False, default=None)
    _norm: float = field(repr=False, default=0.0)


def reparameterize_alpha(alpha_star, c) -> IndexWeights:
    """Map an unconstrained vector of length M-1 to weights with αᵀα = 1
    and cᵀα > 0."""
    alpha_star = np.atleast_1d(np.asarray(alpha_star, dtype=float))
    B = _direction_frame(c)
    if alpha_star.size != B.shape[0] - 1:
        raise ValueError("alpha_star must have length M-1")
    alpha, u, norm = _sphere_map(B, alpha_star)
    return IndexWeights(alpha=alpha, alpha_star=alpha_star.copy(),
                        c=np.asarray(c, dtype=float), B_alpha=B,
                        _u=u, _norm=norm)


def alpha_jacobian(weights: IndexWeights) -> np.ndarray:
    """dα/dα*, shape (M, M-1)."""
    return _sphere_jacobian(weights.B_alpha, weights._u, weights._norm)


def alpha_hessian(weights: IndexWeights) -> np.ndarray:
    """d²α/dα*dα*, shape (M, M-1, M-1)."""
    return _sphere_hessian(weights.B_alpha, weights._u, weights._norm)


def alpha_values(alpha_star_rows, c) -> np.ndarray:
    """Index weights for a batch of unconstrained rows, shape (B, M).

    Row b equals reparameterize_alpha(alpha_star_rows[b], c).alpha; the
    batch form exists for draw-heavy consumers (leave-one-out densities).
    """
    V = np.atleast_2d(np.asarray(alpha_star_rows, dtype=float))
    B = _direction_frame(c)
    U = V @ B[:, 1:].T + B[:, 0]
    return U / np.linalg.norm(U, axis=1, keepdims=True)


def beta_w_values(beta_w_star_rows, gram, integrals) -> np.ndarray:
    """Lag-weight coefficients for a batch of unconstrained rows, (B, d)."""
    V = np.atleast_2d(np.asarray(beta_w_star_rows, dtype=float))
    gram = np.asarray(gram, dtype=float)
    L = cholesky(gram, lower=True)
    c_w = solve_triangular(L, np.asarray(integrals, dtype=float), lower=True)
    B_w = _direction_frame(c_w)
    U = V @ B_w[:, 1:].T + B_w[:, 0]
    S = U / np.linalg.norm(U, axis=1, keepdims=True)
    return solve_triangular(L.T, S.T, lower=False).T


def alpha_star_from_alpha(alpha, c) -> np.ndarray:
    """Invert the index-weight map for any α with cᵀα > 0."""
    alpha = np.asarray(alpha, dtype=float)
    B = _direction_frame(c)
    v = np.linalg.solve(B, alpha)
    if v[0] <= 0:
        raise ValueError("alpha violates the positivity constraint")
    return v[1:] / v[0]


@dataclass
class LagWeightCoefficients:
    """Constrained lag-weight spline coefficients β^w.

    The curve w(l) = Σ_q β^w_q b_q(l) satisfies ∫ w² = 1 and ∫ w > 0. The
    Gram matrix of the basis and the vector of basis integrals define the
    constraints.
    """

    beta_w: np.ndarray
    beta_w_star: np.ndarray
    gram: np.ndarray
    integrals: np.ndarray
    _L: np.ndarray = field(repr=False, default=None)
    _B_w: np.ndarray = field(repr=False, default=None)
    _u: np.ndarray = field(repr=False, default=None)
    _norm: float = field(repr=False, default=0.0)


def reparameterize_w(beta_w_star, gram, integrals) -> LagWeightCoefficients:
    """Map an unconstrained vector of length d-1 to coefficients with
    β^wᵀ M β^w = 1 and mᵀ β^w > 0.

    Whitening by the Cholesky factor of the Gram matrix turns both
    constraints into the unit-sphere construction used for α, with the
    whitened integral vector as the positivity direction.
    """
    beta_w_star = np.atleast_1d(np.asarray(beta_w_star, dtype=float))
    gram = np.asarray(gram, dtype=float)
    integrals = np.asarray(integrals, dtype=float)
    try:
        L = cholesky(gram, lower=True)
    except np.linalg.LinAlgError as exc:  # pragma: no cover
        raise ValueError("gram matrix must be positive definite") from exc
    c_w = solve_triangular(L, integrals, lower=True)
    B_w = _direction_frame(c_w)
    if beta_w_star.size != B_w.shape[0] - 1:
        raise ValueError("beta_w_star must have length d-1")
    s, u, norm = _sphere_map(B_w, beta_w_star)
    beta_w = solve_triangular(L.T, s, lower=False)
    return LagWeightCoefficients(beta_w=beta_w, beta_w_star=beta_w_star.copy(),
                                 gram=gram, integrals=integrals,
                                 _L=L, _B_w=B_w, _u=u, _norm=norm)


def w_jacobian(coefs: LagWeightCoefficients) -> np.ndarray:
    """dβ^w/dβ^{w*}, shape (d, d-1)."""
    J = _sphere_jacobian(coefs._B_w, coefs._u, coefs._norm)
    return solve_triangular(coefs._L.T, J, lower=False)


def w_hessian(coefs: LagWeightCoefficients) -> np.ndarray:
    """d²β^w/dβ^{w*}dβ^{w*}, shape (d, d-1, d-1)."""
    H = _sphere_hessian(coefs._B_w, coefs._u, coefs._norm)
    d = H.shape[0]
    Hf = H.reshape(d, -1)
    out = solve_triangular(coefs._L.T, Hf, lower=False)
    return out.reshape(H.shape)


def w_star_from_w(beta_w, gram, integrals) -> np.ndarray:
    """Invert the lag-weight map for coefficients satisfying mᵀβ^w > 0."""
    gram = np.asarray(gram, dtype=float)
    L = cholesky(gram, lower=True)
    s = L.T @ np.asarray(beta_w, dtype=float)
    c_w = solve_triangular(L, np.asarray(integrals, dtype=float), lower=True)
    B_w = _direction_frame(c_w)
    v = np.linalg.solve(B_w, s)
    if v[0] <= 0:
        raise ValueError("beta_w violates the positivity constraint")
    return v[1:] / v[0]
