from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import MeshError


@dataclass
class Mesh:
    """Triangle mesh; faces are counter-clockwise seen from outside."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self) -> None:
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError("face index out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def is_empty(self) -> bool:
        return self.n_faces == 0

    def copy(self) -> "Mesh":
        return Mesh(self.vertices.copy(), self.faces.copy())

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        return Mesh(vertices, self.faces.copy())

    def face_cross(self) -> np.ndarray:
        """(v1 - v0) x (v2 - v0) per face: twice the area times the unit normal."""
        v = self.vertices[self.faces]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        w = self.face_cross()
        n = np.linalg.norm(w, axis=1, keepdims=True)
        if np.any(n <= 0.0):
            raise MeshError("degenerate face has no normal")
        return w / n

    def edges(self) -> np.ndarray:
        """Unique undirected edges, sorted (i < j)."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def edge_face_counts(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    e = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]])
    return np.unique(np.sort(e, axis=1), axis=0, return_counts=True)


def is_watertight(mesh: Mesh) -> bool:
    """Every edge has exactly two incident faces, traversed in opposite directions."""
    if mesh.is_empty():
        return False
    _, counts = edge_face_counts(mesh)
    if np.any(counts != 2):
        return False
    directed = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]])
    return len(np.unique(directed, axis=0)) == len(directed)


def euler_characteristic(mesh: Mesh) -> int:
    used = len(np.unique(mesh.faces))
    return used - len(mesh.edges()) + mesh.n_faces


def check_mesh(mesh: Mesh, watertight: bool = True, min_area: float = 1e-12) -> None:
    if mesh.is_empty():
        raise MeshError("mesh has no faces")
    if np.any(mesh.face_areas() <= min_area):
        raise MeshError("mesh has degenerate faces")
    if watertight and not is_watertight(mesh):
        raise MeshError("mesh is not watertight")


def mesh_volume(mesh: Mesh) -> float:
    """Enclosed volume by the divergence theorem (absolute value)."""
    if not is_watertight(mesh):
        raise MeshError("volume requires a watertight mesh")
    return abs(signed_volume(mesh))


def signed_volume(mesh: Mesh) -> float:
    v = mesh.vertices[mesh.faces]
    return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)


def orient_outward(mesh: Mesh) -> Mesh:
    if signed_volume(mesh) < 0:
        return Mesh(mesh.vertices, mesh.faces[:, ::-1])
    return mesh


def vertex_areas(mesh: Mesh) -> np.ndarray:
    """One third of the area of each incident face (barycentric dual area)."""
    out = np.zeros(mesh.n_vertices)
    a = mesh.face_areas() / 3.0
    for k in range(3):
        np.add.at(out, mesh.faces[:, k], a)
    return out


def box_mesh(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)) -> Mesh:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    verts = lo + corners * (hi - lo)
    # index = 4x + 2y + z
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = []
    for a, b, c, d in quads:
        faces += [(a, b, c), (a, c, d)]
    return orient_outward(Mesh(verts, faces))


def normalize_to_unit_cube(mesh: Mesh, margin: float = 0.05) -> tuple[Mesh, float, np.ndarray]:
    """Uniformly scale and shift so the bounding box is centred in [margin, 1 - margin]^3.

    Returns the new mesh together with ``scale`` and ``offset`` such that
    ``v_new = scale * v + offset``; fields attached to the mesh (pressure
    coefficients here) are dimensionless and need no rescaling.
    """
    if mesh.n_vertices == 0:
        raise MeshError("cannot normalize an empty mesh")
    lo, hi = mesh.bounds()
    extent = float((hi - lo).max())
    if extent <= 0.0:
        raise MeshError("mesh has zero extent")
    scale = (1.0 - 2.0 * margin) / extent
    offset = 0.5 - scale * 0.5 * (lo + hi)
    return mesh.with_vertices(mesh.vertices * scale + offset), scale, offset
