"""Covariance regression: estimators, sandwich variances, model assessment and simulation."""

from .assess import AssessmentReport, assess, ocv, train_error, u_stat, vtilde_errR
from .condvar import NORMAL, ErrorMoments, EstimatedV, IdentityWeight, KnownV, cond_cov_vecyy
from .estimate import FitOptions, FitResult, fit_fgls, fit_gls, fit_ols, fit_qmle, fit_wls
from .inference import avar_for, avar_qmle, avar_wls, confint, cov_errors
from .model import Dataset, LinearFamily, NetworkARFamily, from_vectors

__version__ = "0.1.0"
