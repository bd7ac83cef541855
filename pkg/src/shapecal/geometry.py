"""Planar polyline interfaces, segment frames and point-to-interface distances.

All lengths are in mm. An :class:`InterfaceMesh` is an ordered chain of nodes;
segment ``i`` joins node ``i`` and ``i + 1`` (and the last node back to the
first one when the mesh is closed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

DEGENERATE_LENGTH = 1e-12
ON_SEGMENT_TOL = 1e-12
_PARALLEL_TOL = 1e-14


class GeometryError(ValueError):
    """Invalid interface geometry."""


class DegenerateSegmentError(GeometryError):
    def __init__(self, index: int, length: float):
        self.index = index
        self.length = length
        super().__init__(f"segment {index} is degenerate (length {length:.3e} mm)")


class NoIntersectionError(GeometryError):
    def __init__(self, point_index: int | None = None):
        self.point_index = point_index
        where = "" if point_index is None else f" from measurement point {point_index}"
        super().__init__(f"no-intersection: ray{where} misses every mesh segment")


@dataclass(frozen=True)
class InterfaceMesh:
    """Ordered 2D polyline.

    Parameters
    ----------
    nodes : array_like, shape (n, 2)
        Node coordinates in mm, n >= 2.
    closed : bool
        If True an extra segment joins the last node to the first.
    """

    nodes: np.ndarray
    closed: bool = False

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float)
        if nodes.ndim != 2 or nodes.shape[1] != 2:
            raise GeometryError(f"nodes must have shape (n, 2), got {nodes.shape}")
        if nodes.shape[0] < 2:
            raise GeometryError("an interface mesh needs at least 2 nodes")
        if not np.all(np.isfinite(nodes)):
            raise GeometryError("node coordinates must be finite")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        lengths = np.linalg.norm(self.segment_vectors, axis=1)
        bad = np.flatnonzero(lengths <= DEGENERATE_LENGTH)
        if bad.size:
            raise DegenerateSegmentError(int(bad[0]), float(lengths[bad[0]]))

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_segments(self) -> int:
        return self.n_nodes if self.closed else self.n_nodes - 1

    @property
    def segment_starts(self) -> np.ndarray:
        return self.nodes if self.closed else self.nodes[:-1]

    @property
    def segment_ends(self) -> np.ndarray:
        return np.roll(self.nodes, -1, axis=0) if self.closed else self.nodes[1:]

    @property
    def segment_vectors(self) -> np.ndarray:
        return self.segment_ends - self.segment_starts

    def arc_length(self) -> float:
        return float(np.sum(np.hypot(*self.segment_vectors.T)))

    def with_nodes(self, nodes) -> "InterfaceMesh":
        return InterfaceMesh(nodes, self.closed)

    def to_dict(self) -> dict:
        return {"nodes": self.nodes.tolist(), "closed": bool(self.closed)}

    @classmethod
    def from_dict(cls, data: dict) -> "InterfaceMesh":
        return cls(np.asarray(data["nodes"], dtype=float), bool(data.get("closed", False)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "InterfaceMesh":
        return cls.from_dict(json.loads(Path(path).read_text()))


class SegmentFrame(NamedTuple):
    center: np.ndarray
    normal: np.ndarray
    length: float


@dataclass(frozen=True)
class SegmentFrames:
    """Per-segment centers, unit normals and lengths stored as arrays.

    Iterating yields one :class:`SegmentFrame` per segment.
    """

    centers: np.ndarray
    normals: np.ndarray
    lengths: np.ndarray

    def __len__(self) -> int:
        return self.lengths.shape[0]

    def __iter__(self) -> Iterator[SegmentFrame]:
        for c, n, l in zip(self.centers, self.normals, self.lengths):
            yield SegmentFrame(c, n, float(l))

    def __getitem__(self, i) -> SegmentFrame:
        return SegmentFrame(self.centers[i], self.normals[i], float(self.lengths[i]))

    @classmethod
    def from_frames(cls, frames) -> "SegmentFrames":
        frames = list(frames)
        if not frames:
            return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))
        return cls(
            np.array([f.center for f in frames], dtype=float),
            np.array([f.normal for f in frames], dtype=float),
            np.array([f.length for f in frames], dtype=float),
        )


def compute_frames(mesh: InterfaceMesh) -> SegmentFrames:
    """Segment midpoints, unit normals and lengths.

    The normal is the ordered tangent ``(tx, ty)`` rotated by -90 degrees,
    i.e. ``(ty, -tx)``, then normalized. For a floor-attached interface with
    nodes ordered left to right it points away from the solid.
    """
    starts, ends = mesh.segment_starts, mesh.segment_ends
    tangents = ends - starts
    lengths = np.hypot(tangents[:, 0], tangents[:, 1])
    bad = np.flatnonzero(lengths <= DEGENERATE_LENGTH)
    if bad.size:
        raise DegenerateSegmentError(int(bad[0]), float(lengths[bad[0]]))
    normals = np.column_stack([tangents[:, 1], -tangents[:, 0]]) / lengths[:, None]
    centers = 0.5 * (starts + ends)
    return SegmentFrames(centers, normals, lengths)


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def ray_cast_distance(mesh: InterfaceMesh, point, direction, point_index: int | None = None) -> float:
    """Distance along ``+-direction`` from ``point`` to the nearest mesh crossing.

    Both senses of the line ``point + t * direction`` are searched and the
    smallest ``|t|`` over all segment intersections is returned.

    Raises
    ------
    NoIntersectionError
        If the line misses every segment. ``point_index`` is attached to the
        error so callers can report which measurement point failed.
    """
    p = np.asarray(point, dtype=float)
    d = np.asarray(direction, dtype=float)
    norm = np.hypot(*d)
    if abs(norm - 1.0) > 1e-9:
        raise GeometryError(f"direction must be a unit vector, |d| = {norm}")
    a = mesh.segment_starts
    e = mesh.segment_vectors
    ap = a - p
    denom = _cross(d, e)
    best = np.inf

    regular = np.abs(denom) > _PARALLEL_TOL * np.hypot(e[:, 0], e[:, 1])
    if np.any(regular):
        den = denom[regular]
        t = _cross(ap[regular], e[regular]) / den
        s = _cross(ap[regular], d) / den
        hit = (s >= -1e-12) & (s <= 1.0 + 1e-12)
        if np.any(hit):
            best = float(np.min(np.abs(t[hit])))

    # collinear segments: the ray runs along the segment itself
    par = ~regular
    if np.any(par):
        off_line = np.abs(_cross(ap[par], d))
        on = off_line <= 1e-12
        if np.any(on):
            ta = ap[par][on] @ d
            tb = (ap[par][on] + e[par][on]) @ d
            straddle = ta * tb <= 0.0
            cand = np.where(straddle, 0.0, np.minimum(np.abs(ta), np.abs(tb)))
            best = min(best, float(np.min(cand)))

    if not np.isfinite(best):
        raise NoIntersectionError(point_index)
    # points on the interface up to roundoff count as exactly on it
    return 0.0 if best <= ON_SEGMENT_TOL else best


def _segment_point_distances(starts, vecs, points):
    # (n_points, n_segments) distance matrix
    rel = points[:, None, :] - starts[None, :, :]
    seg_len2 = np.einsum("ij,ij->i", vecs, vecs)
    s = np.einsum("pij,ij->pi", rel, vecs) / seg_len2
    s = np.clip(s, 0.0, 1.0)
    foot = starts[None, :, :] + s[..., None] * vecs[None, :, :]
    return np.linalg.norm(points[:, None, :] - foot, axis=2)


def closest_point_distances(mesh: InterfaceMesh, points) -> np.ndarray:
    """Vectorized :func:`closest_point_distance` for an ``(n, 2)`` array."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.empty(pts.shape[0])
    chunk = max(1, 200_000 // max(mesh.n_segments, 1))
    for i in range(0, pts.shape[0], chunk):
        dist = _segment_point_distances(mesh.segment_starts, mesh.segment_vectors, pts[i:i + chunk])
        out[i:i + chunk] = dist.min(axis=1)
    return out


def closest_point_distance(mesh: InterfaceMesh, point) -> float:
    """Euclidean distance from ``point`` to the closest point of the polyline."""
    return float(closest_point_distances(mesh, np.asarray(point, dtype=float)[None, :])[0])


@dataclass(frozen=True)
class MeasurementSpec:
    """Points on the observed interface and the directions used to probe it."""

    points: np.ndarray
    directions: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.array(self.points, dtype=float))
        dirs = np.atleast_2d(np.array(self.directions, dtype=float))
        if pts.shape != dirs.shape or pts.shape[1] != 2 or pts.shape[0] < 1:
            raise GeometryError("points and directions must both have shape (n_mp, 2), n_mp >= 1")
        norms = np.hypot(dirs[:, 0], dirs[:, 1])
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise GeometryError("measurement directions must have unit norm")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "directions", dirs)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def to_dict(self) -> dict:
        return {"points": self.points.tolist(), "directions": self.directions.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "MeasurementSpec":
        return cls(data["points"], data["directions"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "MeasurementSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def measurement_spec_from_mesh(mesh: InterfaceMesh, n_points: int = 10) -> MeasurementSpec:
    """Pick ``n_points`` segment midpoints spread along ``mesh``, probed along their normals."""
    frames = compute_frames(mesh)
    n_points = min(n_points, len(frames))
    idx = np.unique(np.round(np.linspace(0, len(frames) - 1, n_points + 2)[1:-1]).astype(int))
    return MeasurementSpec(frames.centers[idx], frames.normals[idx])
