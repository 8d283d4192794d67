"""Free-form deformation refinement: Bernstein lattice, cell-volume penalty, descent loop."""

from __future__ import annotations

import csv
import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import comb

from .diffcore import AdamW, Module
from .errors import ConfigError, DimensionError, MeshError
from .geometry import Mesh

log = logging.getLogger(__name__)

# objective(vertices) -> (value, d value / d vertices)
Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]

FULL_SCALE_COUNTS = (20, 6, 6)

# Six tetrahedra sharing the main diagonal 0-7 of a hexahedral cell; corner
# c = i + 2j + 4k for local offsets (i, j, k). All are positively oriented on
# an undeformed axis-aligned cell.
_TETS = np.array([[0, 1, 3, 7], [0, 3, 2, 7], [0, 2, 6, 7], [0, 6, 4, 7], [0, 4, 5, 7], [0, 5, 1, 7]])


def bernstein_weights(u, n: int) -> np.ndarray:
    """Degree n-1 Bernstein basis at ``u``; shape (n,) for scalar u, (m, n) for arrays."""
    if n < 2:
        raise ConfigError("a lattice axis needs at least two control points")
    u = np.asarray(u, dtype=np.float64)
    if np.any(u < 0) or np.any(u > 1) or not np.all(np.isfinite(u)):
        raise ValueError("Bernstein coordinates must lie in [0, 1]")
    k = np.arange(n)
    uu = u[..., None]
    return comb(n - 1, k) * uu ** k * (1.0 - uu) ** (n - 1 - k)


@dataclass
class ControlLattice:
    counts: tuple[int, int, int]
    lo: np.ndarray
    hi: np.ndarray
    rest: np.ndarray  # (nx, ny, nz, 3)
    points: np.ndarray  # current positions, same shape
    rest_volumes: np.ndarray = field(default=None)  # (nx-1, ny-1, nz-1)

    def __post_init__(self) -> None:
        if self.rest_volumes is None:
            self.rest_volumes = cell_volumes(self.rest)

    @property
    def n_points(self) -> int:
        return int(np.prod(self.counts))

    def with_points(self, points: np.ndarray) -> "ControlLattice":
        return ControlLattice(self.counts, self.lo, self.hi, self.rest, np.asarray(points, dtype=np.float64),
                              self.rest_volumes)

    @property
    def offsets(self) -> np.ndarray:
        return self.points - self.rest


@dataclass
class FFDBinding:
    vertices: np.ndarray  # rest vertex positions
    params: np.ndarray  # (V, 3) parametric coordinates in [0, 1]
    weights: np.ndarray  # (V, K) Bernstein products, lattice points in C order


def build_lattice(mesh: Mesh, counts=(5, 4, 4), margin: float = 0.05) -> tuple[ControlLattice, FFDBinding]:
    """Regular lattice over the mesh bounding box grown by ``margin`` times its extent per side."""
    counts = tuple(int(c) for c in counts)
    if len(counts) != 3 or min(counts) < 2:
        raise ConfigError(f"lattice counts must be three integers >= 2, got {counts}")
    if margin < 0:
        raise ConfigError("lattice margin must be non-negative")
    if mesh.is_empty():
        raise MeshError("cannot build a lattice around an empty mesh")
    bmin, bmax = mesh.bounds()
    ext = np.maximum(bmax - bmin, 1e-9)
    lo, hi = bmin - margin * ext, bmax + margin * ext
    axes = [np.linspace(lo[d], hi[d], counts[d]) for d in range(3)]
    rest = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    lattice = ControlLattice(counts, lo, hi, rest, rest.copy())
    return lattice, bind(mesh.vertices, lattice)


def bind(vertices: np.ndarray, lattice: ControlLattice) -> FFDBinding:
    vertices = np.asarray(vertices, dtype=np.float64)
    params = (vertices - lattice.lo) / (lattice.hi - lattice.lo)
    if params.min() < 0 or params.max() > 1:
        raise MeshError("vertex lies outside the control lattice box")
    nx, ny, nz = lattice.counts
    wx = bernstein_weights(params[:, 0], nx)
    wy = bernstein_weights(params[:, 1], ny)
    wz = bernstein_weights(params[:, 2], nz)
    w = (wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]).reshape(len(vertices), -1)
    return FFDBinding(vertices.copy(), params, w)


def deform(binding: FFDBinding, lattice: ControlLattice) -> np.ndarray:
    """Deformed vertices sum_i B_i(v) c_i, evaluated as v + sum_i B_i(v) (c_i - c_i^rest).

    The two forms agree because the Bernstein lattice reproduces linear
    functions; the displacement form returns the rest vertices bitwise when
    the lattice has not moved.
    """
    if binding.weights.shape[1] != lattice.n_points:
        raise DimensionError(f"binding has {binding.weights.shape[1]} weights per vertex, lattice has "
                             f"{lattice.n_points} points")
    return binding.vertices + binding.weights @ lattice.offsets.reshape(-1, 3)


def _cell_corners(points: np.ndarray) -> np.ndarray:
    """(cells..., 8, 3) corner positions with corner index i + 2j + 4k."""
    corners = []
    for k in (0, 1):
        for j in (0, 1):
            for i in (0, 1):
                corners.append(points[i:points.shape[0] - 1 + i, j:points.shape[1] - 1 + j,
                                      k:points.shape[2] - 1 + k])
    return np.stack(corners, axis=-2)


def cell_volumes(points: np.ndarray) -> np.ndarray:
    """Signed volume of each lattice cell from its six-tetrahedron decomposition."""
    c = _cell_corners(points)
    a, b, cc, d = (c[..., _TETS[:, m], :] for m in range(4))
    vols = np.einsum("...d,...d->...", b - a, np.cross(cc - a, d - a)) / 6.0
    return vols.sum(axis=-1)


def cell_volumes_backward(points: np.ndarray, dvol: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`cell_volumes`: gradient w.r.t. lattice points."""
    c = _cell_corners(points)
    a, b, cc, d = (c[..., _TETS[:, m], :] for m in range(4))
    g = dvol[..., None, None] / 6.0
    db = np.cross(cc - a, d - a) * g
    dc = np.cross(d - a, b - a) * g
    dd = np.cross(b - a, cc - a) * g
    da = -(db + dc + dd)
    dcorner = np.zeros(c.shape)
    for m, dm in enumerate((da, db, dc, dd)):
        for t in range(len(_TETS)):
            dcorner[..., _TETS[t, m], :] += dm[..., t, :]
    out = np.zeros_like(points)
    nx, ny, nz = points.shape[:3]
    idx = 0
    for k in (0, 1):
        for j in (0, 1):
            for i in (0, 1):
                out[i:nx - 1 + i, j:ny - 1 + j, k:nz - 1 + k] += dcorner[..., idx, :]
                idx += 1
    return out


@dataclass
class LossTerms:
    total: float
    objective: float
    smooth: float
    volume: float


def refinement_loss(lattice: ControlLattice, binding: FFDBinding, objective: Objective, lam_smooth: float = 1e-2,
                    lam_vol: float = 1e-1) -> tuple[LossTerms, np.ndarray]:
    """Objective of the deformed mesh plus offset and cell-volume-ratio penalties, with dL/dC."""
    verts = deform(binding, lattice)
    j, dj = objective(verts)
    delta = lattice.offsets
    smooth = float(np.sum(delta ** 2))
    ratio = cell_volumes(lattice.points) / lattice.rest_volumes
    vol = float(np.sum((ratio - 1.0) ** 2))
    grad = (binding.weights.T @ np.asarray(dj)).reshape(delta.shape)
    grad += 2.0 * lam_smooth * delta
    grad += cell_volumes_backward(lattice.points, lam_vol * 2.0 * (ratio - 1.0) / lattice.rest_volumes)
    total = float(j) + lam_smooth * smooth + lam_vol * vol
    return LossTerms(total, float(j), smooth, vol), grad


@dataclass
class RefineConfig:
    counts: tuple[int, int, int] = (5, 4, 4)
    margin: float = 0.05
    steps: int = 100
    lr: float = 1e-2
    min_lr: float = 0.0
    weight_decay: float = 0.0
    lam_smooth: float = 1e-2
    lam_vol: float = 1e-1
    min_face_area: float = 1e-10


@dataclass
class RefineResult:
    mesh: Mesh
    rejected: bool
    reason: str
    trace: list[dict]
    lattice: ControlLattice


class _Offsets(Module):
    def __init__(self, shape) -> None:
        super().__init__()
        self.add_param("offsets", np.zeros(shape))


def refine(mesh: Mesh, objective: Objective, cfg: RefineConfig | None = None) -> RefineResult:
    """AdamW descent on control-point offsets; the face list is never touched."""
    cfg = cfg or RefineConfig()
    lattice, binding = build_lattice(mesh, cfg.counts, cfg.margin)
    trace: list[dict] = []
    if cfg.steps == 0:
        return RefineResult(mesh, False, "", trace, lattice)
    holder = _Offsets(lattice.rest.shape)
    opt = AdamW(holder, lr=cfg.lr, weight_decay=cfg.weight_decay, total_steps=cfg.steps, min_lr=cfg.min_lr)
    last_good = lattice
    for step in range(cfg.steps):
        current = lattice.with_points(lattice.rest + holder.p("offsets"))
        terms, grad = refinement_loss(current, binding, objective, cfg.lam_smooth, cfg.lam_vol)
        if not (np.isfinite(terms.total) and np.all(np.isfinite(grad))):
            log.warning("non-finite refinement gradient at step %d; stopping at the last valid state", step)
            break
        last_good = current
        holder.zero_grad()
        holder.g("offsets")[...] = grad
        eta = opt.step()
        trace.append({"step": step, "loss": terms.total, "objective": terms.objective, "smooth": terms.smooth,
                      "volume": terms.volume, "eta": eta})
    else:
        last_good = lattice.with_points(lattice.rest + holder.p("offsets"))
    out = mesh.with_vertices(deform(binding, last_good))
    reason = ""
    if (cell_volumes(last_good.points) <= 0).any():
        reason = "lattice cell inverted"
    elif out.face_areas().min() < cfg.min_face_area:
        reason = "face area collapsed"
    if reason:
        log.warning("refinement rejected (%s); returning the initial mesh", reason)
        return RefineResult(mesh, True, reason, trace, last_good)
    return RefineResult(out, False, "", trace, last_good)


TRACE_COLUMNS = ("step", "loss", "objective", "smooth", "volume", "eta")


def write_trace_csv(path: Path, trace: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow([row["step"]] + [repr(float(row[k])) for k in TRACE_COLUMNS[1:]])
