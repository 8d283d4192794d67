"""Triplane features and the occupancy / physical-field mapping heads."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.special import expit

from .diffcore import MLP, Module, load_checkpoint, save_checkpoint
from .errors import ConfigError, DegenerateLatentError
from .geometry import Mesh, marching_cubes

log = logging.getLogger(__name__)

PLANE_NAMES = ("xy", "xz", "yz")
PLANE_AXES = ((0, 1), (0, 2), (1, 2))

# named presets: (resolution R, channels d_t)
TRIPLANE_PRESETS = {"desk": (32, 16), "full": (256, 64)}


@dataclass
class Triplane:
    """Three axis-aligned feature planes stored as one (3, R, R, d_t) array."""

    planes: np.ndarray

    def __post_init__(self) -> None:
        self.planes = np.asarray(self.planes, dtype=np.float64)
        if self.planes.ndim != 4 or self.planes.shape[0] != 3 or self.planes.shape[1] != self.planes.shape[2]:
            raise ConfigError(f"triplane must be (3, R, R, d_t), got {self.planes.shape}")

    @property
    def resolution(self) -> int:
        return self.planes.shape[1]

    @property
    def channels(self) -> int:
        return self.planes.shape[3]

    def save(self, path) -> None:
        save_checkpoint(path, {f"triplane.{n}": self.planes[i] for i, n in enumerate(PLANE_NAMES)})

    @classmethod
    def load(cls, path) -> "Triplane":
        t, _ = load_checkpoint(path)
        return cls(np.stack([t[f"triplane.{n}"] for n in PLANE_NAMES]))


def _bilinear(coord: np.ndarray, r: int):
    """Node-aligned cell index and fraction for coordinates in [0, 1]."""
    u = coord * (r - 1)
    i0 = np.clip(np.floor(u).astype(np.int64), 0, r - 2)
    return i0, u - i0


def triplane_forward(planes: np.ndarray, q: np.ndarray):
    """Sum of bilinear plane lookups at the 2D projections of ``q``.

    ``planes`` is (B, 3, R, R, d) and ``q`` is (B, Q, 3). Returns
    features (B, Q, d) and a cache for :func:`triplane_backward`.
    """
    b, _, r, _, d = planes.shape
    nq = q.shape[1]
    outside = (q < 0.0) | (q > 1.0)
    if outside.any():
        log.warning("clamping %d query coordinates into the unit cube", int(outside.sum()))
    qc = np.clip(q, 0.0, 1.0)
    feat = np.zeros((b, nq, d))
    rows = np.repeat(np.arange(b * nq), 4)
    mats, corners = [], []
    for p, (ax0, ax1) in enumerate(PLANE_AXES):
        i0, fx = _bilinear(qc[..., ax0], r)
        j0, fy = _bilinear(qc[..., ax1], r)
        w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
        base = np.arange(b)[:, None] * r * r
        idx = np.stack([i0 * r + j0, (i0 + 1) * r + j0, i0 * r + j0 + 1, (i0 + 1) * r + j0 + 1], -1) + base[..., None]
        mat = sparse.csr_matrix((w.reshape(-1), (rows, idx.reshape(-1))), shape=(b * nq, b * r * r))
        flat = planes[:, p].reshape(b * r * r, d)
        feat += (mat @ flat).reshape(b, nq, d)
        mats.append(mat)
        corners.append((idx, fx, fy))
    return feat, (planes.shape, mats, corners, ~outside)


def triplane_backward(planes: np.ndarray, cache, dfeat: np.ndarray):
    """Adjoint of :func:`triplane_forward`: gradients w.r.t. planes and query points."""
    shape, mats, corners, inside = cache
    b, _, r, _, d = shape
    nq = dfeat.shape[1]
    dplanes = np.zeros(shape)
    dq = np.zeros((b, nq, 3))
    g = dfeat.reshape(b * nq, d)
    for p, (ax0, ax1) in enumerate(PLANE_AXES):
        dplanes[:, p] = (mats[p].T @ g).reshape(b, r, r, d)
        idx, fx, fy = corners[p]
        flat = planes[:, p].reshape(b * r * r, d)
        c00, c10, c01, c11 = (flat[idx[..., k]] for k in range(4))
        ddx = (1 - fy)[..., None] * (c10 - c00) + fy[..., None] * (c11 - c01)
        ddy = (1 - fx)[..., None] * (c01 - c00) + fx[..., None] * (c11 - c10)
        dq[..., ax0] += (ddx * dfeat).sum(-1) * (r - 1)
        dq[..., ax1] += (ddy * dfeat).sum(-1) * (r - 1)
    return dplanes, dq * inside


def triplane_sample(tp: Triplane, q: np.ndarray) -> np.ndarray:
    """Aggregated feature t_q for points (Q, 3) or a single point (3,)."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    feat, _ = triplane_forward(tp.planes[None], q.reshape(1, -1, 3))
    return feat[0, 0] if single else feat[0]


class MappingHeads(Module):
    """Two parallel MLPs on the aggregated triplane feature: occupancy logit and field values.

    ``field_shift``/``field_scale`` convert the field head's normalized
    output back to physical units when a design is extracted.
    """

    def __init__(self, d_t: int, rng: np.random.Generator, hidden: int = 32, layers: int = 3,
                 field_channels: int = 1, act: str = "silu") -> None:
        super().__init__()
        if layers < 1:
            raise ConfigError("mapping heads need at least one layer")
        widths = [d_t] + [hidden] * (layers - 1)
        self.d_t = d_t
        self.field_channels = field_channels
        self.occ = self.add_child("occ", MLP(widths + [1], rng, act=act))
        self.field = self.add_child("field", MLP(widths + [field_channels], rng, act=act))
        self.field_shift = np.zeros(field_channels)
        self.field_scale = np.ones(field_channels)

    def forward(self, feat):
        logit, co = self.occ.forward(feat)
        fld, cf = self.field.forward(feat)
        return (logit[..., 0], fld), (co, cf)

    def backward(self, cache, dlogit, dfield):
        co, cf = cache
        return self.occ.backward(co, dlogit[..., None]) + self.field.backward(cf, dfield)


def query_fields(tp: Triplane, heads: MappingHeads, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Occupancy probability and normalized field values at query points."""
    feat = triplane_sample(tp, q)
    (logit, fld), _ = heads.forward(feat)
    return expit(logit), fld


def occupancy_grid(tp: Triplane, heads: MappingHeads, grid_res: int, chunk: int = 32768) -> np.ndarray:
    axis = np.linspace(0.0, 1.0, grid_res)
    pts = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), -1).reshape(-1, 3)
    occ = np.concatenate([query_fields(tp, heads, pts[s:s + chunk])[0] for s in range(0, len(pts), chunk)])
    return occ.reshape(grid_res, grid_res, grid_res)


def mesh_occupancy(occ: np.ndarray) -> Mesh:
    """0.5-level surface of an occupancy lattice sampled on [0, 1]^3 nodes."""
    if not (occ.min() < 0.5 < occ.max()):
        raise DegenerateLatentError("decoded occupancy never crosses 0.5")
    h = 1.0 / (occ.shape[0] - 1)
    padded = np.pad(occ, 1, constant_values=0.0)
    mesh = marching_cubes(padded, 0.5, origin=(-h, -h, -h), spacing=h)
    if mesh.is_empty():
        raise DegenerateLatentError("decoded occupancy yields an empty surface")
    return mesh


def extract_design(tp: Triplane, heads: MappingHeads, grid_res: int = 64) -> tuple[Mesh, np.ndarray]:
    """Mesh the 0.5 occupancy level and evaluate the field head at its vertices.

    The occupancy lattice is padded with an empty layer so the surface is
    closed even if the decoded shape touches the cube boundary. The field is
    returned in physical units (first channel only when several exist).
    """
    if grid_res < 16:
        raise ConfigError("extraction grid must be at least 16^3")
    mesh = mesh_occupancy(occupancy_grid(tp, heads, grid_res))
    # vertices on the padding layer sit just outside the cube; read the field at the nearest face of it
    _, fld = query_fields(tp, heads, np.clip(mesh.vertices, 0.0, 1.0))
    phi = heads.field_shift + heads.field_scale * fld
    return mesh, phi[:, 0]
