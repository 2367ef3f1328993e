"""Regularised empirical risk minimisation with Hermite features for joint
regression, variable selection and linear feature learning."""

from .datagen import Dataset, SyntheticSpec, make_dataset, read_dataset, write_dataset
from .hermite import MultiIndex, build_design, hermite_1d, hermite_multi
from .metrics import feature_score, noise_level_score, r2_score, subspace_distance
from .penalty import (
    CoefficientMap,
    FeatureState,
    compute_Mf,
    compute_Mg,
    estimate_dimension,
    extract_features,
    omega_0,
    omega_feat,
    omega_var,
    update_eta_var,
    update_lambda_feat,
)
from .sampling import Cutoff, Geometric, SampleSet, sample_features, sample_prior
from .solver import (
    FittedModel,
    PenaltyConfig,
    cross_validate,
    fit,
    kernel_ridge_baseline,
    predict,
    solve_feature_view,
    solve_kernel_view,
)

__version__ = "0.1.0"
