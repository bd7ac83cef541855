"""Scalar discrepancy measures between a simulated and an observed interface."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    InterfaceMesh,
    MeasurementSpec,
    SegmentFrames,
    closest_point_distances,
    compute_frames,
    ray_cast_distance,
)

MEASURES = ("euclid_mp", "cpp", "rkhs_sc")
WEIGHTINGS = ("segment_length", "unit")


class DiscrepancyError(ValueError):
    pass


@dataclass(frozen=True)
class DiscrepancyConfig:
    measure: str = "rkhs_sc"
    sigma_w: float | None = 0.005
    normal_weighting: str = "segment_length"

    def __post_init__(self):
        if self.measure not in MEASURES:
            raise DiscrepancyError(f"unknown measure {self.measure!r}; expected one of {MEASURES}")
        if self.normal_weighting not in WEIGHTINGS:
            raise DiscrepancyError(f"unknown normal weighting {self.normal_weighting!r}")
        if self.measure == "rkhs_sc" and not (self.sigma_w is not None and self.sigma_w > 0):
            raise DiscrepancyError("rkhs_sc needs sigma_w > 0")


def euclid_mp(model: InterfaceMesh, spec: MeasurementSpec) -> float:
    """L2 norm of the ray-cast distances from each measurement point to ``model``.

    A :class:`~shapecal.geometry.NoIntersectionError` carrying the index of the
    offending measurement point propagates unchanged.
    """
    d = np.array([
        ray_cast_distance(model, p, v, point_index=i)
        for i, (p, v) in enumerate(zip(spec.points, spec.directions))
    ])
    return float(np.linalg.norm(d))


def cpp(model: InterfaceMesh, observed: InterfaceMesh) -> float:
    """L2 norm of the closest-point distances of every model node to ``observed``."""
    return float(np.linalg.norm(closest_point_distances(observed, model.nodes)))


def _weighted_normals(frames: SegmentFrames, weighting: str) -> np.ndarray:
    if weighting == "segment_length":
        return frames.normals * frames.lengths[:, None]
    return frames.normals


def _current_product(c_a, m_a, c_b, m_b, sigma_w):
    # sum_ij m_a[i] . m_b[j] * exp(-|c_a[i] - c_b[j]|^2 / (2 sigma_w^2))
    diff = c_a[:, None, :] - c_b[None, :, :]
    r2 = np.einsum("ijk,ijk->ij", diff, diff)
    kern = np.exp(-r2 / (2.0 * sigma_w**2))
    return float(np.sum(kern * (m_a @ m_b.T)))


def rkhs_sc(model_frames, obs_frames, config: DiscrepancyConfig) -> float:
    """Surface-currents distance between two sets of segment frames.

    Expands the squared RKHS norm of the normal-field difference as
    ``S11 - 2 S12 + S22`` with an RBF kernel of width ``config.sigma_w`` on
    segment centers. Normals are weighted by segment length unless
    ``config.normal_weighting == "unit"``.
    """
    if config.sigma_w is None or config.sigma_w <= 0:
        raise DiscrepancyError("rkhs_sc needs sigma_w > 0")
    fa = model_frames if isinstance(model_frames, SegmentFrames) else SegmentFrames.from_frames(model_frames)
    fb = obs_frames if isinstance(obs_frames, SegmentFrames) else SegmentFrames.from_frames(obs_frames)
    if len(fa) == 0 or len(fb) == 0:
        raise DiscrepancyError("rkhs_sc needs non-empty frame lists")
    ma = _weighted_normals(fa, config.normal_weighting)
    mb = _weighted_normals(fb, config.normal_weighting)
    s11 = _current_product(fa.centers, ma, fa.centers, ma, config.sigma_w)
    s22 = _current_product(fb.centers, mb, fb.centers, mb, config.sigma_w)
    s12 = _current_product(fa.centers, ma, fb.centers, mb, config.sigma_w)
    q = s11 - 2.0 * s12 + s22
    if q < 0.0:
        if q < -1e-10 * max(s11, s22):
            raise DiscrepancyError(f"negative surface-currents quadratic form {q:.3e} (numerical fault)")
        q = 0.0
    return float(np.sqrt(q))


def n_terms_for(measure: str, model_node_count: int, n_measurement_points: int | None = None) -> int:
    """Number of independent measurements entering the Gaussian likelihood."""
    if measure == "euclid_mp":
        if n_measurement_points is None:
            raise DiscrepancyError("euclid_mp needs the measurement point count")
        return int(n_measurement_points)
    if measure == "cpp":
        return int(model_node_count)
    return 1


def discrepancy(model: InterfaceMesh, observed: InterfaceMesh, config: DiscrepancyConfig,
                spec: MeasurementSpec | None = None, observed_frames: SegmentFrames | None = None) -> float:
    """Evaluate the configured measure between a model and an observed interface."""
    if config.measure == "euclid_mp":
        if spec is None:
            raise DiscrepancyError("euclid_mp needs a measurement spec")
        return euclid_mp(model, spec)
    if config.measure == "cpp":
        return cpp(model, observed)
    if observed_frames is None:
        observed_frames = compute_frames(observed)
    return rkhs_sc(compute_frames(model), observed_frames, config)


def combine_snapshots(values) -> float:
    """Combine per-snapshot discrepancies by summing their squares."""
    v = np.asarray(values, dtype=float)
    return float(np.sqrt(np.sum(v**2)))
