"""Forward models: (material parameters, conditions) -> deformed interface.

The built-in :class:`BendingBumpModel` is a closed-form stand-in for a fluid
structure interaction solve. A semicircular bump attached to the floor is
sheared downstream by the inflow; stiffness is resolved in horizontal height
bands so that heterogeneous materials can be represented.

External solvers plug in through :class:`SubprocessForwardModel`, which
exchanges JSON files with a user command.
"""

from __future__ import annotations

import json
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .geometry import InterfaceMesh

BUMP_CENTER = (1.0, 0.0)


class ForwardModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelParams:
    """Young's modulus (Pa) and Poisson's ratio per subdomain."""

    E: tuple
    nu: tuple

    def __post_init__(self):
        E = tuple(float(e) for e in np.atleast_1d(self.E))
        nu = tuple(float(v) for v in np.atleast_1d(self.nu))
        if len(E) != len(nu) or len(E) == 0:
            raise ForwardModelError("E and nu need the same, non-zero length")
        if any(not e > 0 for e in E):
            raise ForwardModelError(f"Young's moduli must be positive, got {E}")
        if any(not -1.0 < v < 0.5 for v in nu):
            raise ForwardModelError(f"Poisson's ratios must lie in (-1, 0.5), got {nu}")
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "nu", nu)

    @property
    def n_subdomains(self) -> int:
        return len(self.E)

    @classmethod
    def from_vector(cls, x) -> "ModelParams":
        """Build from the interleaved vector ``[E_1, nu_1, E_2, nu_2, ...]``."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 1 or x.size % 2:
            raise ForwardModelError("parameter vector must be [E_1, nu_1, ..., E_K, nu_K]")
        return cls(tuple(x[0::2]), tuple(x[1::2]))

    def to_vector(self) -> np.ndarray:
        return np.ravel(np.column_stack([self.E, self.nu]))


@dataclass(frozen=True)
class UncertainConditions:
    v_in: float = 100.0  # inflow volume rate, mm^2/s

    def __post_init__(self):
        if not self.v_in >= 0:
            raise ForwardModelError(f"inflow rate must be non-negative, got {self.v_in}")


@dataclass(frozen=True)
class ForwardResult:
    """Either a deformed mesh or a failure reason; failures are values, not exceptions."""

    mesh: InterfaceMesh | None = None
    reason: str | None = None

    @property
    def ok(self) -> bool:
        return self.mesh is not None

    @classmethod
    def deformed(cls, mesh: InterfaceMesh) -> "ForwardResult":
        return cls(mesh=mesh)

    @classmethod
    def failed(cls, reason: str) -> "ForwardResult":
        return cls(reason=reason)


class ForwardModel(Protocol):
    def reference(self) -> InterfaceMesh: ...

    def deform(self, params: ModelParams, theta: UncertainConditions) -> ForwardResult: ...


def reference_bump(R: float, n_seg: int) -> InterfaceMesh:
    """Semicircular arc of radius ``R`` centered at (1, 0), ordered left to right."""
    if not R > 0:
        raise ForwardModelError("radius must be positive")
    if n_seg < 4:
        raise ForwardModelError("need at least 4 segments")
    phi = np.pi - np.arange(n_seg + 1) * np.pi / n_seg
    nodes = np.column_stack([BUMP_CENTER[0] + R * np.cos(phi), R * np.sin(phi)])
    # exact endpoints and non-negative heights
    nodes[0] = (BUMP_CENTER[0] - R, 0.0)
    nodes[-1] = (BUMP_CENTER[0] + R, 0.0)
    nodes[:, 1] = np.maximum(nodes[:, 1], 0.0)
    return InterfaceMesh(nodes, closed=False)


def band_compliance(y, E, nu, R, kappa=0.5):
    """Cumulative compliances ``s(y)`` and ``s_nu(y)`` for K equal height bands.

    ``s(y) = int_0^y (2 t / R^2) / Ebar(t) dt`` with ``Ebar = E (1 + kappa nu)``
    constant per band; ``s_nu`` carries an extra factor ``nu(t)``. Both are
    evaluated in closed form.
    """
    y = np.clip(np.asarray(y, dtype=float), 0.0, R)
    E = np.asarray(E, dtype=float)
    nu = np.asarray(nu, dtype=float)
    K = E.size
    e_bar = E * (1.0 + kappa * nu)
    edges = np.arange(K + 1) * (R / K)
    s = np.zeros_like(y)
    s_nu = np.zeros_like(y)
    for k in range(K):
        lo, hi = edges[k], edges[k + 1]
        top = np.clip(y, lo, hi)
        frac = (top**2 - lo**2) / R**2
        s += frac / e_bar[k]
        s_nu += frac * nu[k] / e_bar[k]
    return s, s_nu


@dataclass(frozen=True)
class BendingBumpModel:
    """Closed-form bending response of a floor-attached bump.

    Node displacements are ``u_x = A V R s(y)`` and ``u_y = -beta A V R s_nu(y)``.
    A run fails with reason ``"distortion"`` when the largest ``u_x`` exceeds
    ``u_max`` (mimicking mesh breakdown of very soft materials).
    """

    radius: float = 0.25
    n_seg: int = 64
    kappa: float = 0.5
    beta: float = 0.3
    amplitude: float = 0.92
    u_max: float = 0.15
    _ref: InterfaceMesh = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_ref", reference_bump(self.radius, self.n_seg))

    def reference(self) -> InterfaceMesh:
        return self._ref

    def displacements(self, params: ModelParams, theta: UncertainConditions, reference=None):
        ref = self._ref if reference is None else reference
        y = ref.nodes[:, 1]
        s, s_nu = band_compliance(y, params.E, params.nu, self.radius, self.kappa)
        load = self.amplitude * theta.v_in * self.radius
        return load * s, -self.beta * load * s_nu

    def deform(self, params: ModelParams, theta: UncertainConditions, reference=None) -> ForwardResult:
        ref = self._ref if reference is None else reference
        ux, uy = self.displacements(params, theta, ref)
        if np.max(ux) > self.u_max:
            return ForwardResult.failed("distortion")
        return ForwardResult.deformed(ref.with_nodes(ref.nodes + np.column_stack([ux, uy])))


def deform(reference: InterfaceMesh, params: ModelParams, theta: UncertainConditions,
           radius: float | None = None, **constants) -> ForwardResult:
    """Deform a bump reference mesh with the built-in bending model.

    ``radius`` defaults to the largest node distance from the bump center.
    ``constants`` override ``kappa``, ``beta``, ``amplitude`` and ``u_max``.
    """
    if radius is None:
        radius = float(np.max(np.hypot(reference.nodes[:, 0] - BUMP_CENTER[0], reference.nodes[:, 1])))
    model = BendingBumpModel(radius=radius, n_seg=max(reference.n_segments, 4), **constants)
    return model.deform(params, theta, reference=reference)


@dataclass
class SubprocessForwardModel:
    """Adapter for an external solver driven through JSON files.

    ``command`` is run with two extra arguments, the params file and the
    result file. The params file holds ``{"E": [...], "nu": [...], "v_in": v}``.
    The solver writes either a mesh JSON (``{"nodes": ..., "closed": ...}``)
    or a failure record ``{"failed": true, "reason": "..."}``.
    """

    command: Sequence[str]
    reference_mesh: InterfaceMesh
    timeout: float | None = None

    def reference(self) -> InterfaceMesh:
        return self.reference_mesh

    def deform(self, params: ModelParams, theta: UncertainConditions) -> ForwardResult:
        with tempfile.TemporaryDirectory() as tmp:
            pin = Path(tmp) / "params.json"
            pout = Path(tmp) / "result.json"
            pin.write_text(json.dumps({"E": list(params.E), "nu": list(params.nu), "v_in": theta.v_in}))
            try:
                proc = subprocess.run([*self.command, str(pin), str(pout)], capture_output=True,
                                      timeout=self.timeout)
            except subprocess.TimeoutExpired:
                return ForwardResult.failed("timeout")
            if proc.returncode != 0 or not pout.exists():
                return ForwardResult.failed(f"solver exit code {proc.returncode}")
            return read_forward_result(pout)


def read_forward_result(path) -> ForwardResult:
    data = json.loads(Path(path).read_text())
    if data.get("failed"):
        return ForwardResult.failed(str(data.get("reason", "unknown")))
    return ForwardResult.deformed(InterfaceMesh.from_dict(data))


def write_forward_result(result: ForwardResult, path) -> None:
    if result.ok:
        payload = result.mesh.to_dict()
    else:
        payload = {"failed": True, "reason": result.reason}
    Path(path).write_text(json.dumps(payload))
