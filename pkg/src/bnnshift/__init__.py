"""bnnshift: Bayesian neural networks under covariate shift at desk scale."""

from .models import LabeledDataset, ModelSpec, ParamVector, forward, log_likelihood
from .priors import Gaussian, Laplace, PriorSpec, StudentT, build_empcov, build_pca_prior
from .inference import HmcConfig, OptimizerConfig, bma_predict, ensemble_fit, hmc_sample, map_fit
from .numkit import RngStream

__version__ = "0.1.0"
