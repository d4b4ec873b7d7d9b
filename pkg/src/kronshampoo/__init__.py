"""Shampoo preconditioners, optimal Kronecker approximations of curvature
matrices, and the measurements that compare them."""
from .curvature import (
    AdagradAccumulator,
    CurvatureMatrix,
    ShampooState,
    assemble,
    batch_covariance,
    batch_ensemble,
    kfac_factors,
    opt_kron_factors,
    shampoo_factors,
    shampoo_sq_factors,
)
from .data import Dataset, parse_idx, subsample_classes, synth_gaussian_classes
from .errors import (
    ConfigError,
    DataError,
    DegenerateInputError,
    KronShampooError,
    NumericalError,
    ShapeError,
)
from .kronalg import (
    KronFactors,
    RearrangedMatrix,
    SvdResult,
    inverse_rearrange,
    kron,
    kron_matvec,
    nkp_power_iteration,
    rearrange,
    svd,
    sym_power,
    unvec,
    vec,
)
from .metrics import (
    ProbeBank,
    SpectrumReport,
    cosine_similarity,
    cosine_similarity_kron,
    probe_cosine,
    spectrum_report,
)
from .models import GradientEnsemble, Model, ModelConfig
from .optim import TrainConfig, precondition, sgd_step, shampoo_step

__version__ = "0.1.0"
