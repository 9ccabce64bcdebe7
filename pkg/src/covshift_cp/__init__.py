"""Conformal prediction under covariate shift with training-conditional coverage tools."""

from .bounds import (
    BoundInputs,
    BoundResult,
    bian_cv_bound,
    cv_plus_bound,
    full_bound_exch,
    full_bound_shift,
    jackknife_bound_exch,
    jackknife_bound_shift,
    liang_comparison_bound,
    ridge_inputs,
    shorthand_A,
    shorthand_E,
    split_bound,
    split_bound_second_moment,
)
from .core import DataError, Dataset, LikelihoodRatio, RngStream, Sample, SplitSpec, load_csv, split
from .experiment import (
    ExperimentReport,
    ShiftScenario,
    TrialResult,
    beta_oracle_check,
    dkw_study,
    estimate_nu,
    estimate_pe,
    make_scenario_bounded,
    make_scenario_second_moment,
    run_experiment,
)
from .methods import (
    MethodConfig,
    PredictionInterval,
    PredictionSet,
    cv_plus,
    fit_method,
    full_conformal,
    jackknife_plain,
    jackknife_plus,
    jackknife_plus_inflated,
    jaw,
    split_conformal,
)
from .ridge import RidgeConfig, RidgeModel, fit, fit_loo, predict, stability_profile
from .weighted_ecdf import WeightedEcdf, eval_cdf, quantile, sup_deviation

__version__ = "0.1.0"
