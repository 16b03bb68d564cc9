"""Exposure processes, single indices, cumulative quantities, range bounds.

An exposure series observed at integer days becomes a natural cubic
interpolating spline, so lag-weighted integrals of the (index) process can
be computed exactly: on every sub-interval where both the exposure spline
and the lag-weight spline are single polynomials, the integrand has degree
at most 6 and 4-point Gauss-Legendre is exact.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.interpolate import CubicSpline

from .basis import IndexWeights, LagWeightCoefficients, SplineBasis, evaluate_basis

_GL_NODES, _GL_WEIGHTS = leggauss(4)


@dataclass(frozen=True)
class ExposureProcess:
    """One exposure series for one group, with its interpolating spline.

    `scale` supports the counterfactual estimand: evaluations return
    scale * spline(t), so proportional exposure reductions need no
    re-interpolation (the interpolant is linear in the data).
    """

    group: object
    name: str
    times: np.ndarray
    values: np.ndarray
    spline: CubicSpline
    scale: float = 1.0

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    def __call__(self, t, check: bool = True):
        if check:
            lo, hi = self.domain
            ta = np.asarray(t)
            if np.any(ta < lo - 1e-9) or np.any(ta > hi + 1e-9):
                raise ValueError("evaluation time outside the exposure record")
        return self.scale * self.spline(t)

    def scaled(self, factor: float) -> "ExposureProcess":
        return replace(self, scale=self.scale * factor)


@dataclass(frozen=True)
class RangeBounds:
    """Cauchy-Schwarz bounds for the index and the cumulative index."""

    E_bar: float
    E_bar_L: float


def interpolate(times, values, group=0, name="x") -> ExposureProcess:
    """Natural cubic interpolating spline through daily observations."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.size < 4:
        raise ValueError("need at least 4 observations to interpolate")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    spline = CubicSpline(times, values, bc_type="natural")
    return ExposureProcess(group=group, name=name, times=times, values=values,
                           spline=spline)


def index_value(processes, alpha, t) -> float:
    """Single index E(t; α) = Σ_m α_m X_m(t)."""
    if isinstance(alpha, IndexWeights):
        alpha = alpha.alpha
    procs = list(processes.values()) if isinstance(processes, dict) else list(processes)
    if len(procs) != len(alpha):
        raise ValueError("one weight per exposure is required")
    return float(sum(a * p(t) for a, p in zip(alpha, procs)))


def _segment_breaks(t: float, L: float, extra: np.ndarray) -> np.ndarray:
    """Breakpoints in lag l on [0, L]: lag-basis knots plus the lags at
    which t - l crosses an integer day."""
    crossings = t - np.arange(np.ceil(t - L), np.floor(t) + 1)
    pts = np.concatenate([[0.0, L], extra, crossings])
    pts = np.unique(np.clip(pts, 0.0, L))
    return pts


def _gauss_nodes(breaks: np.ndarray):
    a, b = breaks[:-1], breaks[1:]
    half = 0.5 * (b - a)
    nodes = (0.5 * (a + b))[:, None] + half[:, None] * _GL_NODES
    weights = half[:, None] * _GL_WEIGHTS
    return nodes.ravel(), weights.ravel()


def ace_integral(exposure, w: LagWeightCoefficients, w_basis: SplineBasis,
                 t: float, L: float) -> float:
    """Adaptive cumulative exposure ∫₀ᴸ w(l) E(t-l) dl, exactly.

    `exposure` is a callable in time (an ExposureProcess or an index
    closure over several of them).
    """
    knots = np.unique(w_basis.knots)
    breaks = _segment_breaks(t, L, knots)
    nodes, weights = _gauss_nodes(breaks)
    w_vals = evaluate_basis(w_basis, nodes) @ w.beta_w
    e_vals = np.asarray(exposure(t - nodes))
    return float(np.dot(weights, w_vals * e_vals))


def drf_lag_sum(processes, alpha, psi, t: int, L: int) -> float:
    """Lag-response sum Σ_{l=0}^{L-1} ψ(E(t-l), l) at integer lags."""
    lags = np.arange(L)
    if isinstance(processes, ExposureProcess):
        e_vals = processes(t - lags)
    else:
        if isinstance(alpha, IndexWeights):
            alpha = alpha.alpha
        procs = (list(processes.values()) if isinstance(processes, dict)
                 else list(processes))
        e_vals = sum(a * p(t - lags) for a, p in zip(alpha, procs))
    return float(sum(psi(e, l) for e, l in zip(np.atleast_1d(e_vals), lags)))


def _sq_integral_window(proc: ExposureProcess, t: float, L: float) -> float:
    """∫₀ᴸ X(t-l)² dl, exactly per piecewise-cubic segment."""
    breaks = _segment_breaks(t, L, np.empty(0))
    nodes, weights = _gauss_nodes(breaks)
    vals = proc(t - nodes)
    return float(np.dot(weights, vals**2))


def compute_range_bounds(processes_by_group, L: float) -> RangeBounds:
    """Bounds Ē = max sqrt(Σ_m X_m(t)²) and Ē^L = max sqrt(Σ_m ∫ X_m(t-l)² dl),
    maximized over observed integer times (the cumulative bound only over
    times with a complete lag window)."""
    if not processes_by_group:
        raise ValueError("no exposure processes given")
    E_bar_sq = 0.0
    E_bar_L_sq = 0.0
    any_window = False
    for procs in processes_by_group.values():
        plist = list(procs.values()) if isinstance(procs, dict) else list(procs)
        times = plist[0].times
        vals = np.stack([p(times) for p in plist])
        E_bar_sq = max(E_bar_sq, float(np.max(np.sum(vals**2, axis=0))))
        t_ok = times[times - L >= times[0] - 1e-9]
        if t_ok.size:
            any_window = True
            sq = np.zeros(t_ok.size)
            for p in plist:
                sq += np.array([_sq_integral_window(p, t, L) for t in t_ok])
            E_bar_L_sq = max(E_bar_L_sq, float(np.max(sq)))
    if not any_window:
        raise ValueError("no observation time has a complete lag window")
    return RangeBounds(E_bar=float(np.sqrt(E_bar_sq)),
                       E_bar_L=float(np.sqrt(E_bar_L_sq)))
