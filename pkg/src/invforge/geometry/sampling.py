from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, MeshError
from .mesh import Mesh, is_watertight


@dataclass
class PointSamples:
    """Struct-of-arrays point cloud: positions (n,3), unit normals (n,3), optional values (n,c)."""

    positions: np.ndarray
    normals: np.ndarray
    values: np.ndarray | None = None
    face_index: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, idx) -> "PointSamples":
        return PointSamples(self.positions[idx], self.normals[idx],
                            None if self.values is None else self.values[idx],
                            None if self.face_index is None else self.face_index[idx])


def sample_surface(mesh: Mesh, n: int, rng: np.random.Generator, vertex_values: np.ndarray | None = None,
                   allow_open: bool = False) -> PointSamples:
    """Area-weighted uniform surface sampling with face normals.

    ``vertex_values`` (per-vertex scalars or (V, c) arrays) are interpolated
    barycentrically at each sample.
    """
    if n < 1:
        raise ConfigError("need at least one sample")
    if not allow_open and not is_watertight(mesh):
        raise MeshError("surface sampling requires a watertight mesh (pass allow_open=True to override)")
    w = mesh.face_cross()
    areas = 0.5 * np.linalg.norm(w, axis=1)
    cdf = np.cumsum(areas)
    face = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
    face = np.minimum(face, mesh.n_faces - 1)
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    bary = np.stack([1.0 - s, s * (1.0 - r2), s * r2], axis=1)
    tri = mesh.vertices[mesh.faces[face]]
    pos = np.einsum("nk,nkd->nd", bary, tri)
    normals = w[face] / np.linalg.norm(w[face], axis=1, keepdims=True)
    values = None
    if vertex_values is not None:
        vv = np.asarray(vertex_values, dtype=float)
        vv = vv.reshape(len(vv), -1)
        values = np.einsum("nk,nkc->nc", bary, vv[mesh.faces[face]])
    return PointSamples(pos, normals, values, face)
