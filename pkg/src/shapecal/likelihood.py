"""Gaussian log-likelihood of a discrepancy and synthetic noisy observations."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .forward import BendingBumpModel, ForwardModel, ModelParams, UncertainConditions
from .geometry import InterfaceMesh


class ObservationError(RuntimeError):
    pass


@dataclass(frozen=True)
class LikelihoodConfig:
    sigma_n: float
    n_terms: int = 1

    def __post_init__(self):
        if not self.sigma_n > 0:
            raise ValueError("sigma_n must be positive")
        if int(self.n_terms) != self.n_terms or self.n_terms < 1:
            raise ValueError("n_terms must be a positive integer")

    @classmethod
    def from_variance(cls, variance: float, n_terms: int = 1) -> "LikelihoodConfig":
        return cls(float(np.sqrt(variance)), n_terms)


def log_likelihood(D, config: LikelihoodConfig):
    """``-(n/2) log(2 pi sigma_n^2) - D^2 / (2 sigma_n^2)``; vectorized over ``D``."""
    D = np.asarray(D, dtype=float)
    var = config.sigma_n**2
    out = -0.5 * config.n_terms * np.log(2.0 * np.pi * var) - D**2 / (2.0 * var)
    return float(out) if out.ndim == 0 else out


def generate_observation(params_gt: ModelParams, theta_gt: UncertainConditions, sigma_obs: float,
                         seed: int, model: ForwardModel | None = None) -> InterfaceMesh:
    """Ground-truth deformed interface plus iid Gaussian noise on every node coordinate."""
    if sigma_obs < 0:
        raise ValueError("sigma_obs must be non-negative")
    model = BendingBumpModel() if model is None else model
    result = model.deform(params_gt, theta_gt)
    if not result.ok:
        raise ObservationError(f"ground-truth forward run failed: {result.reason}")
    mesh = result.mesh
    if sigma_obs == 0:
        return mesh
    rng = np.random.default_rng(seed)
    return mesh.with_nodes(mesh.nodes + sigma_obs * rng.standard_normal(mesh.nodes.shape))


def write_observation(mesh: InterfaceMesh, path, params_gt: ModelParams, theta_gt: UncertainConditions,
                      sigma_obs: float, seed: int) -> Path:
    """Write the mesh JSON and a ``*.provenance.json`` sidecar; returns the sidecar path."""
    path = Path(path)
    mesh.save(path)
    sidecar = path.with_suffix(".provenance.json")
    sidecar.write_text(json.dumps({
        "E": list(params_gt.E),
        "nu": list(params_gt.nu),
        "v_in": theta_gt.v_in,
        "sigma_obs": sigma_obs,
        "seed": seed,
    }, indent=1))
    return sidecar
