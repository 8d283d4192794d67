from __future__ import annotations

import logging

import numpy as np
from skimage import measure

from .mesh import Mesh, orient_outward

log = logging.getLogger(__name__)


def marching_cubes(grid: np.ndarray, iso: float, origin=(0.0, 0.0, 0.0), spacing=None) -> Mesh:
    """Isosurface of a scalar lattice as an outward-oriented triangle mesh.

    ``grid[i, j, k]`` sits at ``origin + (i, j, k) * spacing``. Orientation
    is fixed from the sign of the enclosed volume, so occupancy-like and
    signed-distance fields both come out with outward normals. Returns an
    empty mesh (with a warning) when ``iso`` is not crossed.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or min(grid.shape) < 2:
        raise ValueError("marching cubes needs a 3D grid of at least 2^3 samples")
    if spacing is None:
        spacing = 1.0 / (np.array(grid.shape) - 1)
    spacing = np.broadcast_to(np.asarray(spacing, dtype=float), (3,))
    lo, hi = float(grid.min()), float(grid.max())
    if not lo < iso < hi:
        log.warning("iso level %.4g outside field range [%.4g, %.4g]; surface is empty", iso, lo, hi)
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    # Samples sitting on (or within a hair of) the iso level produce zero-area
    # or sliver triangles; push them off the level by a small fraction of the range.
    tol = 1e-3 * (hi - lo)
    near = np.abs(grid - iso) < tol
    if near.any():
        grid = np.where(near, iso + np.where(grid >= iso, tol, -tol), grid)

    verts, faces, _, _ = measure.marching_cubes(grid, level=iso, spacing=tuple(spacing),
                                                allow_degenerate=False)
    verts = verts + np.asarray(origin, dtype=float)
    return _drop_unused(orient_outward(Mesh(verts, faces)))


def _drop_unused(mesh: Mesh) -> Mesh:
    used = np.unique(mesh.faces)
    if len(used) == mesh.n_vertices:
        return mesh
    remap = -np.ones(mesh.n_vertices, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return Mesh(mesh.vertices[used], remap[mesh.faces])


def sample_grid(fn, resolution: int, lo: float = 0.0, hi: float = 1.0, chunk: int = 65536) -> np.ndarray:
    """Evaluate ``fn(points) -> values`` on a regular ``resolution^3`` lattice over [lo, hi]^3."""
    axis = np.linspace(lo, hi, resolution)
    pts = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = np.concatenate([np.asarray(fn(pts[s:s + chunk])).reshape(-1) for s in range(0, len(pts), chunk)])
    return vals.reshape(resolution, resolution, resolution)
