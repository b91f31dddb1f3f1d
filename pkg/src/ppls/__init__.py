"""Probabilistic PLS regression with unique variance.

Norm-constrained maximum likelihood (no improper solutions), canonical
identifiable parameters, native missing-data handling and BIC selection
of the latent dimensions.
"""

from .canonical import (
    CanonicalForm,
    ConstraintError,
    c_from_h,
    canonicalize,
    check_identifiability,
    enforce_constraint,
    h_from_c,
    scale_loadings,
    smallest_eigvalue_check,
)
from .estimation import (
    Dataset,
    FitConfig,
    FitError,
    FitResult,
    count_free_params,
    fit,
    log_likelihood,
)
from .gaussian import GaussianDist, SingularCovarianceError, condition, log_density, marginal
from .model import (
    LatentDims,
    PlsParams,
    classical_scores,
    factor_scores,
    full_joint,
    joint_covariance,
    plug_in_predict,
    posterior_z_given_x,
    posterior_z_given_xy,
    posterior_z_given_y,
    predict_y,
    predict_y_given_x,
    regression_coefficients,
)

__version__ = "0.1.0"
