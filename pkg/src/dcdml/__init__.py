"""Collaborative double machine learning for linear CATE models on
horizontally partitioned data."""

from .baselines import SrFit, fit_ca_dml, fit_ia_dml, fit_sr
from .data import Dataset, OracleTruth, PartyData, gen_sim1, load_csv, partition, pool
from .dimred import DimReducer, ReducerConfig, apply, build_reducer, combine, fit_bootstrap_dr, fit_pca
from .dml import DmlFit, fit_dml, predict_cate, significance_test, test_cates, test_coefficients
from .experiment import EvalReport, run_experiment
from .metrics import ate, rmse_cate, rmse_coef, sig_consistency_cate, sig_consistency_coef, welch_flag
from .ni import make_ni_intermediate, make_ni_return, ni_user_finalize
from .nuisance import LearnerSpec, cross_fit, parse_learner
from .protocol import (
    AnchorDataset,
    CollabSession,
    DcConfig,
    IntermediateShare,
    ReturnPackage,
    UserCateModel,
    aggregate,
    analyst_fit,
    gen_anchor,
    make_intermediate,
    make_return,
    run_dc_dml,
    user_finalize,
)

__version__ = "0.1.0"
