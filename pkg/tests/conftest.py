import math

import numpy as np
import pytest

from shapecal.geometry import InterfaceMesh


def random_polyline(rng, n_nodes, scale=1.0):
    """Random open polyline with well separated consecutive nodes."""
    steps = rng.normal(size=(n_nodes - 1, 2))
    steps /= np.linalg.norm(steps, axis=1)[:, None]
    steps *= rng.uniform(0.1, 1.0, size=(n_nodes - 1, 1))
    start = rng.uniform(-1, 1, size=2)
    return InterfaceMesh(scale * np.vstack([start, start + np.cumsum(steps, axis=0)]))


def point_segment_distance(p, a, b):
    """Plain-python distance from p to segment [a, b]."""
    ax, ay = a
    bx, by = b
    px, py = p
    dx, dy = bx - ax, by - ay
    t = ((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy)
    t = min(1.0, max(0.0, t))
    return math.hypot(px - (ax + t * dx), py - (ay + t * dy))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
