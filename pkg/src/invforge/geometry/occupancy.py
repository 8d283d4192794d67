"""Unsigned distance, ray-parity inside test and semi-continuous occupancy targets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ..errors import ConfigError, MeshError
from .mesh import Mesh, is_watertight

# Generic directions so rays rarely graze an edge or vertex of axis-aligned tessellations.
_RAY_DIRS = np.array([
    [0.5773502691896258, 0.5773502691896258, 0.5773502691896258],
    [-0.2672612419124244, 0.5345224838248488, 0.8017837257372732],
    [0.8164965809277261, -0.4082482904638631, 0.4082482904638631],
]) + np.array([[1e-3, -2e-3, 3e-3], [2.7e-3, 1.3e-3, -1.1e-3], [-1.7e-3, 2.9e-3, 0.7e-3]])
_RAY_DIRS /= np.linalg.norm(_RAY_DIRS, axis=1, keepdims=True)


@dataclass
class OccupancyResult:
    distance: np.ndarray   # unsigned distance to the surface
    inside: np.ndarray     # bool, ray-parity majority vote
    occupancy: np.ndarray  # semi-continuous target in [0, 1]
    face_index: np.ndarray  # face holding the closest surface point
    bary: np.ndarray        # barycentric coordinates of that point


def _chunk_size(n_faces: int, budget: int = 400_000) -> int:
    return max(1, budget // max(n_faces, 1))


def _closest_on_faces(p, a, b, c):
    """Closest point of each query to each candidate triangle: (squared distance, v, w), shape (Q, F)."""
    shape = np.broadcast_shapes(p.shape, a.shape)
    a, b, c = (np.broadcast_to(x, shape) for x in (a, b, c))
    ab, ac = b - a, c - a
    ap = p - a
    d1 = np.einsum("qfd,qfd->qf", ap, ab)
    d2 = np.einsum("qfd,qfd->qf", ap, ac)
    bp = p - b
    d3 = np.einsum("qfd,qfd->qf", bp, ab)
    d4 = np.einsum("qfd,qfd->qf", bp, ac)
    cp = p - c
    d5 = np.einsum("qfd,qfd->qf", cp, ab)
    d6 = np.einsum("qfd,qfd->qf", cp, ac)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        den = 1.0 / (va + vb + vc)
    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
    ]
    one, zero = np.ones_like(d1), np.zeros_like(d1)
    v = np.select(conds, [zero, one, t_ab, zero, zero, 1.0 - t_bc], vb * den)
    w = np.select(conds, [zero, zero, zero, one, t_ac, t_bc], vc * den)
    q = a + v[..., None] * ab + w[..., None] * ac
    return ((p - q) ** 2).sum(-1), v, w


def _pick(d2q, v, w, faces_of):
    best = d2q.argmin(axis=1)
    rows = np.arange(len(best))
    vv, ww = v[rows, best], w[rows, best]
    return np.sqrt(d2q[rows, best]), faces_of[rows, best], np.stack([1.0 - vv - ww, vv, ww], axis=1)


def closest_points(mesh: Mesh, points: np.ndarray, candidates: int = 32):
    """Closest surface point for each query: (distance, face index, barycentrics).

    Faces are pruned to the ``candidates`` nearest centroids. A query keeps
    that answer only when no other face can be closer (centroid distance minus
    the largest face radius); the rest retry with 8x more candidates and
    finally against every face. Ties go to the lowest face index, so the
    result equals an exhaustive search.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    tri = mesh.vertices[mesh.faces]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    n_q, n_f = len(points), mesh.n_faces
    dist = np.empty(n_q)
    fidx = np.empty(n_q, dtype=np.int64)
    bary = np.empty((n_q, 3))
    todo = np.arange(n_q)
    if candidates < n_f:
        centroid = tri.mean(axis=1)
        radius = float(np.linalg.norm(tri - centroid[:, None], axis=2).max())
        tree = cKDTree(centroid)
        k = candidates
        while k < n_f and len(todo):
            c_dist, cand = tree.query(points[todo], k=k)
            cand = np.sort(cand, axis=1)  # lowest index first so argmin ties match the exhaustive search
            step = max(1, 200_000 // k)
            for s in range(0, len(todo), step):
                idx, f = todo[s:s + step], cand[s:s + step]
                d2q, v, w = _closest_on_faces(points[idx, None, :], a[f], b[f], c[f])
                dist[idx], fidx[idx], bary[idx] = _pick(d2q, v, w, f)
            todo = todo[dist[todo] >= c_dist[:, -1] - radius]
            k *= 8
    step = _chunk_size(n_f)
    all_faces = np.arange(n_f)
    for s in range(0, len(todo), step):
        idx = todo[s:s + step]
        f = np.broadcast_to(all_faces, (len(idx), n_f))
        d2q, v, w = _closest_on_faces(points[idx, None, :], a[None], b[None], c[None])
        dist[idx], fidx[idx], bary[idx] = _pick(d2q, v, w, f)
    return dist, fidx, bary


def _parity(mesh: Mesh, points: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Ray-crossing parity along ``direction`` (Moller-Trumbore, expressed as dot products)."""
    tri = mesh.vertices[mesh.faces]
    v0 = tri[:, 0]
    e1, e2 = tri[:, 1] - v0, tri[:, 2] - v0
    pvec = np.cross(direction, e2)
    det = np.einsum("fd,fd->f", e1, pvec)
    ok = np.abs(det) > 1e-15
    det = np.where(ok, det, 1.0)
    pu = pvec / det[:, None]
    pv = np.cross(e1, direction) / det[:, None]
    pt = np.cross(e1, e2) / det[:, None]
    cu, cv, ct = (v0 * pu).sum(1), (v0 * pv).sum(1), (v0 * pt).sum(1)
    out = np.empty(len(points), dtype=bool)
    step = _chunk_size(mesh.n_faces, 2_000_000)
    for s in range(0, len(points), step):
        q = points[s:s + step]
        u = q @ pu.T - cu
        v = q @ pv.T - cv
        t = q @ pt.T - ct
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
        out[s:s + step] = hit.sum(axis=1) % 2 == 1
    return out


def inside_mesh(mesh: Mesh, points: np.ndarray) -> np.ndarray:
    """Inside test by majority vote over three ray-parity casts."""
    if not is_watertight(mesh):
        raise MeshError("inside/outside parity is undefined for a non-watertight mesh")
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    votes = sum(_parity(mesh, points, d).astype(int) for d in _RAY_DIRS)
    return votes >= 2


def _column_crossings(mesh: Mesh, axis: int, coords: np.ndarray) -> np.ndarray:
    """Crossing counts below each lattice node along columns parallel to ``axis``.

    Returns an int array (R, R, R) in (x, y, z) order counting surface
    crossings of the ray from each node towards -``axis``.
    """
    r = len(coords)
    a1, a2 = [k for k in range(3) if k != axis]
    tri = mesh.vertices[mesh.faces]
    p0, p1, p2 = tri[:, 0], tri[:, 1], tri[:, 2]
    # 2D barycentrics of column (s, t) against each projected triangle
    x0, y0 = p0[:, a1], p0[:, a2]
    d1x, d1y = p1[:, a1] - x0, p1[:, a2] - y0
    d2x, d2y = p2[:, a1] - x0, p2[:, a2] - y0
    det = d1x * d2y - d2x * d1y
    ok = np.abs(det) > 1e-15
    det = np.where(ok, det, 1.0)
    counts = np.zeros((r, r, r + 1), dtype=np.int64)
    ss, tt = np.meshgrid(coords, coords, indexing="ij")
    cols_s, cols_t = ss.reshape(-1), tt.reshape(-1)
    step = _chunk_size(mesh.n_faces, 2_000_000)
    for s in range(0, len(cols_s), step):
        cs = cols_s[s:s + step, None] - x0
        ct = cols_t[s:s + step, None] - y0
        u = (cs * d2y - d2x * ct) / det
        v = (d1x * ct - cs * d1y) / det
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1)
        ci, fi = np.nonzero(hit)
        if len(ci) == 0:
            continue
        uu, vv = u[ci, fi], v[ci, fi]
        h = p0[fi, axis] + uu * (p1[fi, axis] - p0[fi, axis]) + vv * (p2[fi, axis] - p0[fi, axis])
        col = ci + s
        pos = np.searchsorted(coords, h, side="right")
        np.add.at(counts, (col // r, col % r, pos), 1)
    below = np.cumsum(counts, axis=2)[:, :, :r]
    # below[i, j, k]: crossings at height <= coords[k]; rearrange to (x, y, z)
    return np.moveaxis(below, 2, axis) if axis != 2 else below


def inside_grid(mesh: Mesh, resolution: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Inside test on a regular lattice via column ray casting along x, y and z.

    Same parity rule as :func:`inside_mesh` (majority of three ray
    directions) but one ray per lattice column, which makes dense grids cheap.
    """
    if not is_watertight(mesh):
        raise MeshError("inside/outside parity is undefined for a non-watertight mesh")
    coords = np.linspace(lo, hi, resolution)
    votes = sum((_column_crossings(mesh, k, coords) % 2).astype(int) for k in range(3))
    return votes >= 2


def semi_continuous(distance: np.ndarray, inside: np.ndarray, h: float) -> np.ndarray:
    """Linear ramp of width 2h centred on the surface: 1 deep inside, 0 far outside."""
    if h <= 0:
        raise ConfigError("band half-width must be positive")
    s = np.where(inside, 1.0, -1.0)
    return np.clip(0.5 + s * distance / (2.0 * h), 0.0, 1.0)


def occupancy_of(mesh: Mesh, points: np.ndarray, h: float) -> OccupancyResult:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    inside = inside_mesh(mesh, points)
    dist, fidx, bary = closest_points(mesh, points)
    return OccupancyResult(dist, inside, semi_continuous(dist, inside, h), fidx, bary)


def band_halfwidth(grid_resolution: int) -> float:
    """Default band: two voxels of the reference grid."""
    return 2.0 / grid_resolution
