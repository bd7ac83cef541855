"""Bayesian calibration of material parameters from interface shapes.

A GP surrogate of the shape-discrepancy log-likelihood is trained on a Sobol
design and sampled with adaptive-tempering sequential Monte Carlo.
"""

from .analysis import laplace_approximation, map_binned, map_from_particles, marginalize, weighted_kde, weighted_moments
from .discrepancy import DiscrepancyConfig, cpp, discrepancy, euclid_mp, rkhs_sc
from .forward import BendingBumpModel, ForwardResult, ModelParams, UncertainConditions, deform
from .geometry import InterfaceMesh, MeasurementSpec, compute_frames, measurement_spec_from_mesh
from .likelihood import LikelihoodConfig, generate_observation, log_likelihood
from .parameter_space import BetaOnInterval, LogNormal, ParameterBox, Prior, Uniform, sobol_points
from .smc import ParticleSet, SMCConfig, run_smc
from .surrogate import GPModel, TrainingSet, fit_gp

__version__ = "0.1.0"
