"""Additive quantile regression for clustered data.

Fits conditional quantile functions that combine penalized spline smooths,
parametric fixed effects, and cluster-level random effects.  Estimation
maximizes a Laplace-approximated likelihood built on a smoothed check loss,
with the smoothing parameter driven to zero over an outer loop.  Cluster-level
resampling provides standard errors, including a bag-of-little-bootstraps
variant for large numbers of clusters.
"""

from .loss import (
    OMEGA_FLOOR,
    AbcDecomposition,
    SmoothedLossParams,
    abc_decompose,
    check_loss,
    sign_indicator,
    smoothed_loss,
    smoothed_loss_derivative,
)

__version__ = "0.1.0"
