"""Bayesian dynamic GLMs for spatiotemporal count data.

Poisson counts on a fixed site set get a log-rate built from a random-walk
spatial intercept (dense Matern covariance or a sparse GMRF on a triangular
mesh), harmonic seasonality, covariates, and a nugget.  Fitting is by MCMC;
prediction covers imputation, kriging, forecasting, and period averages.
"""

from .chain import (
    ChainConfig,
    PosteriorDraws,
    SamplerError,
    pool_draws,
    run_chain,
    run_chains,
)
from .core import Dataset, HyperState, LatentState, PriorConfig, SpatialLocation
from .dataio import (
    RunConfig,
    hyper_summary,
    ingest,
    load_run_config,
    read_draws,
    read_truth,
    write_dataset,
    write_draws,
    write_truth,
)
from .diagnostics import Diagnostics, diagnose, effective_sample_size, split_rhat
from .kernels import ModelConfig
from .predict import (
    AadbEstimate,
    PredictiveSummary,
    estimate_aadb,
    forecast,
    impute,
    krige,
    spacetime_predict,
)
from .simulate import (
    MissingnessScenario,
    SimulatedTruth,
    SimulationSpec,
    apply_missingness,
    build_harmonics,
    preset,
    simulate_dataset,
)
from .spde import Mesh, auto_mesh, build_precision, build_projector, load_mesh, save_mesh

__version__ = "0.1.0"

__all__ = [
    "AadbEstimate",
    "ChainConfig",
    "Dataset",
    "Diagnostics",
    "HyperState",
    "LatentState",
    "Mesh",
    "MissingnessScenario",
    "ModelConfig",
    "PosteriorDraws",
    "PredictiveSummary",
    "PriorConfig",
    "RunConfig",
    "SamplerError",
    "SimulatedTruth",
    "SimulationSpec",
    "SpatialLocation",
    "apply_missingness",
    "auto_mesh",
    "build_harmonics",
    "build_precision",
    "build_projector",
    "diagnose",
    "effective_sample_size",
    "estimate_aadb",
    "forecast",
    "hyper_summary",
    "impute",
    "ingest",
    "krige",
    "load_mesh",
    "load_run_config",
    "pool_draws",
    "preset",
    "read_draws",
    "read_truth",
    "run_chain",
    "run_chains",
    "save_mesh",
    "simulate_dataset",
    "spacetime_predict",
    "split_rhat",
    "write_dataset",
    "write_draws",
    "write_truth",
]
