"""Spatially smoothed Bayesian diffusion tensor fields with probabilistic tracking.

The pipeline: simulate or ingest log-scale diffusion-weighted signals,
estimate per-voxel 3x3 SPD tensors either by least squares or by MCMC
under a DAG auto-regressive Wishart field prior, then run angle-threshold
fiber tracking over posterior draws to attach probabilities to distinct
tract patterns.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DegenerateTensor,
    FibertraceError,
    InvalidDof,
    NotPositiveDefinite,
    RankDeficientDesign,
    SchemaError,
    SeedOutOfBounds,
)
from .grid import GridDims, VoxelGraph, build_dag, neighbors_tracking
from .signals import (
    AcquisitionProtocol,
    Arc,
    DwiDataset,
    PhantomConfig,
    PhantomTruth,
    default_protocol,
    noiseless_log_signal,
    simulate_phantom,
    voxel_log_likelihood,
)
from .spd import (
    cholesky,
    eigh3,
    principal_eigenvector,
    sample_wishart,
    wishart_logpdf,
)
from .leastsq import fit_all, fit_least_squares, project_to_pd
from .sampler import (
    ChainState,
    PosteriorDraws,
    SamplerConfig,
    conditional_log_target,
    posterior_mean,
    preset,
    run_chain,
    tune_proposal_dof,
    update_k,
    update_sigma2,
    update_tensor_site,
)
from .tracking import (
    FiberPattern,
    TrackConfig,
    angle_delta,
    angle_theta,
    direction_field,
    fact_track,
    probabilistic_track,
    sensitivity_sweep,
)
from .evaluate import (
    StudyConfig,
    StudyResult,
    metric_d1,
    metric_d2,
    run_simulation_study,
)

__all__ = [
    "__version__",
    # errors
    "FibertraceError", "NotPositiveDefinite", "InvalidDof", "DegenerateTensor",
    "ConfigError", "SchemaError", "RankDeficientDesign", "SeedOutOfBounds",
    # grid
    "GridDims", "VoxelGraph", "build_dag", "neighbors_tracking",
    # signals
    "AcquisitionProtocol", "DwiDataset", "Arc", "PhantomConfig", "PhantomTruth",
    "default_protocol", "noiseless_log_signal", "voxel_log_likelihood",
    "simulate_phantom",
    # spd
    "cholesky", "eigh3", "principal_eigenvector", "sample_wishart",
    "wishart_logpdf",
    # least squares
    "fit_least_squares", "fit_all", "project_to_pd",
    # sampler
    "SamplerConfig", "ChainState", "PosteriorDraws", "preset",
    "conditional_log_target", "update_tensor_site", "update_sigma2",
    "update_k", "tune_proposal_dof", "run_chain", "posterior_mean",
    # tracking
    "TrackConfig", "FiberPattern", "angle_delta", "angle_theta",
    "direction_field", "fact_track", "probabilistic_track", "sensitivity_sweep",
    # evaluation
    "StudyConfig", "StudyResult", "metric_d1", "metric_d2",
    "run_simulation_study",
]
