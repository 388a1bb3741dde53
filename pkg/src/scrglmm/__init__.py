"""Spatial capture-recapture with spatially heterogeneous detection.

Simulation of autocorrelated baseline-detection surfaces, five hierarchical
SCR models (SCR, RE, SARE, FM, FE) fitted by Metropolis-within-Gibbs, and the
diagnostics and metrics used to compare them.
"""

__version__ = "0.1.0"

from scrglmm.geometry import (
    ClusterMap,
    DetectorGrid,
    Habitat,
    aggregate_detectors,
    build_detector_grid,
    build_habitat,
    pairwise_detector_distances,
)
from scrglmm.surfaces import (
    BaselineSurface,
    categorical_surface,
    continuous_surface,
    exponential_covariance,
    morans_i,
    sample_gaussian_field,
)
from scrglmm.simulate import Scenario, SimulatedDataset, scenario_catalog, simulate_scenario
from scrglmm.likelihood import ChainState, ModelSpec, Priors, full_logposterior
from scrglmm.mcmc import Chain, McmcConfig, run_chain
from scrglmm.diagnostics import assess, effective_sample_size, gelman_rubin
from scrglmm.metrics import waic

__all__ = [
    "BaselineSurface",
    "Chain",
    "ChainState",
    "ClusterMap",
    "DetectorGrid",
    "Habitat",
    "McmcConfig",
    "ModelSpec",
    "Priors",
    "Scenario",
    "SimulatedDataset",
    "aggregate_detectors",
    "assess",
    "build_detector_grid",
    "build_habitat",
    "categorical_surface",
    "continuous_surface",
    "effective_sample_size",
    "exponential_covariance",
    "full_logposterior",
    "gelman_rubin",
    "morans_i",
    "pairwise_detector_distances",
    "run_chain",
    "sample_gaussian_field",
    "scenario_catalog",
    "simulate_scenario",
    "waic",
]
