"""Newtonian impact-pressure oracle: surface pressure, drag and its vertex gradient."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, MeshError
from ..geometry import Mesh

# Frontal area of the largest sphere that fits the normalization margin
# (radius 0.45), so a normalized sphere scores C_d = 1.
DEFAULT_A_REF = float(np.pi * 0.45 ** 2)


@dataclass
class FlowSpec:
    """Free-stream context.

    ``direction`` points upstream: faces whose outward normal has a positive
    component along it face the oncoming stream.
    """

    direction: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    a_ref: float = DEFAULT_A_REF

    def __post_init__(self) -> None:
        u = np.asarray(self.direction, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(u)
        if not np.isfinite(norm) or norm == 0:
            raise ConfigError("flow direction must be a nonzero finite vector")
        self.direction = u / norm
        if not self.a_ref > 0:
            raise ConfigError(f"reference area must be positive, got {self.a_ref}")


def _cross(mesh: Mesh) -> np.ndarray:
    w = mesh.face_cross()
    if mesh.n_faces and (np.linalg.norm(w, axis=1) < 1e-14).any():
        raise MeshError("mesh has degenerate (zero-area) faces")
    return w


def face_pressure(mesh: Mesh, flow: FlowSpec) -> np.ndarray:
    """Per-face c_p = 2 cos^2 on windward faces, 0 elsewhere."""
    w = _cross(mesh)
    cos = w @ flow.direction / np.linalg.norm(w, axis=1)
    return np.where(cos > 0, 2.0 * cos ** 2, 0.0)


def newtonian_pressure(mesh: Mesh, flow: FlowSpec | None = None) -> np.ndarray:
    """Vertex pressure coefficient: area-weighted mean of adjacent face values."""
    flow = flow or FlowSpec()
    cp = face_pressure(mesh, flow)
    area = mesh.face_areas()
    num = np.zeros(mesh.n_vertices)
    den = np.zeros(mesh.n_vertices)
    for k in range(3):
        np.add.at(num, mesh.faces[:, k], area * cp)
        np.add.at(den, mesh.faces[:, k], area)
    if (den == 0).any():
        raise MeshError("mesh has vertices not used by any face")
    return num / den


def oracle_drag(mesh: Mesh, flow: FlowSpec | None = None) -> float:
    """C_d = (1/A_ref) sum over windward faces of c_p A (n.u).

    With w the face cross product this is sum (w.u)^3 / |w|^2 / A_ref.
    """
    flow = flow or FlowSpec()
    w = _cross(mesh)
    wu = w @ flow.direction
    wu = np.where(wu > 0, wu, 0.0)
    return float(np.sum(wu ** 3 / (w * w).sum(axis=1)) / flow.a_ref)


def oracle_drag_gradient(mesh: Mesh, flow: FlowSpec | None = None) -> np.ndarray:
    """Analytic dC_d/dv for every vertex, shape (n_vertices, 3)."""
    flow = flow or FlowSpec()
    u = flow.direction
    tri = mesh.vertices[mesh.faces]
    e1, e2 = tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    w = _cross(mesh)
    wu = w @ u
    wind = wu > 0
    ww = (w * w).sum(axis=1)
    g = np.zeros_like(w)
    g[wind] = (3 * wu[wind, None] ** 2 * u / ww[wind, None]
               - 2 * wu[wind, None] ** 3 * w[wind] / ww[wind, None] ** 2)
    g /= flow.a_ref
    d1 = np.cross(e2, g)
    d2 = np.cross(g, e1)
    grad = np.zeros_like(mesh.vertices)
    np.add.at(grad, mesh.faces[:, 0], -(d1 + d2))
    np.add.at(grad, mesh.faces[:, 1], d1)
    np.add.at(grad, mesh.faces[:, 2], d2)
    return grad
