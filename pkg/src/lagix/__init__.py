"""Penalized distributed-lag models for multiple exposures.

Four model structures share one fitting engine: a single-index or additive
combination of exposures enters either through an adaptive cumulative
exposure (a lag-weighted integral passed through a smooth curve) or through
a lag-response surface summed over integer lags. Smoothing and dispersion
parameters are estimated by Laplace-approximate marginal likelihood inside
a nested profile optimization; inference is sampling based; model choice
uses a misspecification-aware AIC or Bayesian stacking of posteriors.
"""

from .exposure import (ExposureProcess, RangeBounds, interpolate, index_value,
                       ace_integral, drf_lag_sum, compute_range_bounds)
from .model import (ModelSpec, ModelData, CovariateTerm, ParameterLayout,
                    Workspace, build_workspace, nb_loglik)
from .basis import (SplineBasis, PenaltyBlock, bspline_basis, evaluate_basis,
                    build_penalty, build_tensor_penalty, basis_gram,
                    basis_integrals, reparameterize_alpha, alpha_jacobian,
                    reparameterize_w, w_jacobian, IndexWeights,
                    LagWeightCoefficients)
from .fit import (FitError, FitOptions, FitResult, fit_model, inner_profile,
                  outer_phi, laml, laml_gradient)
from .inference import (InferenceError, PosteriorDraws, FunctionCI,
                        EstimandResult, sample_posterior, function_ci,
                        delta_estimand, conditional_aic, adjusted_aic)
from .stacking import (StackingError, LooDensityMatrix, StackingResult,
                       loo_onestep, loo_density, loo_density_matrix,
                       optimize_weights, stacked_estimand)
__all__ = [name for name in dir() if not name.startswith("_")]

__version__ = "0.1.0"
