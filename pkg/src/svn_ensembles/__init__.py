"""Stein variational Newton ensembles for small fully-connected networks."""

from ._backend import BACKEND
from .curvature import (
    DiagonalCurvature,
    FullCurvature,
    KroneckerCurvature,
    curvature_diagonal,
    curvature_kfac,
    fisher_full_mc,
    ggn_full,
)
from .data import DatasetSplit, kfold_splits, load_csv, standardize, toy_regression
from .inference import (
    MethodConfig,
    ParticleEnsemble,
    ensemble_map_step,
    ll_svn_step,
    svgd_direction,
    svn_direction,
    svn_step,
    train,
)
from .kernels import IdentityMetric, average_curvature, build_kernel_state, kernel_eval, kernel_grad
from .nn import MlpArchitecture, forward, init_params
from .posterior import BatchView, PriorSpec

__version__ = "0.1.0"
