"""Synthetic superellipsoid dataset: generation, on-disk layout and training samples."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import make_rng
from .errors import ConfigError, DataError
from .fields import mesh_occupancy
from .geometry import (Mesh, PointSamples, SuperellipsoidSpec, inside_function, make_superellipsoid,
                       normalize_to_unit_cube, occupancy_of, read_field_csv, read_obj, sample_grid, sample_surface,
                       write_field_csv, write_obj)
from .surrogate import FlowSpec, newtonian_pressure, oracle_drag

log = logging.getLogger(__name__)


@dataclass
class FamilyConfig:
    """Parameter box of the synthetic shape family."""

    n_shapes: int = 40
    n_spheres: int = 1  # exact spheres placed first, a sanity anchor for the oracle
    axis_range: tuple[float, float] = (0.3, 0.5)
    exponent_range: tuple[float, float] = (0.5, 1.5)
    resolution: int = 32

    def __post_init__(self) -> None:
        lo, hi = self.axis_range
        if not 0 < lo <= hi:
            raise ConfigError("axis range must be positive and ordered")
        lo, hi = self.exponent_range
        if not 0.3 <= lo <= hi <= 2.0:
            raise ConfigError("exponent range must lie within [0.3, 2]")
        if self.n_shapes < 1 or not 0 <= self.n_spheres <= self.n_shapes:
            raise ConfigError("need at least one shape and at most n_shapes spheres")


@dataclass
class ShapeRecord:
    index: int
    spec: SuperellipsoidSpec
    mesh: Mesh  # normalized into the unit cube
    field: np.ndarray  # vertex pressure coefficient
    drag: float
    scale: float
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))


def sample_specs(cfg: FamilyConfig, rng: np.random.Generator) -> list[SuperellipsoidSpec]:
    specs = []
    for i in range(cfg.n_shapes):
        if i < cfg.n_spheres:
            specs.append(SuperellipsoidSpec(0.4, 0.4, 0.4))
            continue
        a, b, c = rng.uniform(*cfg.axis_range, size=3)
        e1, e2 = rng.uniform(*cfg.exponent_range, size=2)
        specs.append(SuperellipsoidSpec(float(a), float(b), float(c), float(e1), float(e2)))
    return specs


def make_record(index: int, spec: SuperellipsoidSpec, resolution: int, flow: FlowSpec) -> ShapeRecord:
    mesh, scale, offset = normalize_to_unit_cube(make_superellipsoid(spec, resolution))
    return ShapeRecord(index, spec, mesh, newtonian_pressure(mesh, flow), oracle_drag(mesh, flow), scale, offset)


def remesh_record(record: ShapeRecord, grid_res: int, flow: FlowSpec | None = None) -> tuple[Mesh, np.ndarray, float]:
    """The record's shape re-tessellated by marching cubes on a ``grid_res^3`` lattice, like a decoded design.

    The smooth level function ``1 / (1 + F)`` of the analytic inside function
    crosses 0.5 exactly on the surface. Returns the mesh, its pressure field
    and its oracle drag.
    """
    flow = flow or FlowSpec()

    def level(p):
        return 1.0 / (1.0 + inside_function(record.spec, (p - record.offset) / record.scale))
    mesh = mesh_occupancy(sample_grid(level, grid_res))
    return mesh, newtonian_pressure(mesh, flow), oracle_drag(mesh, flow)


def generate_dataset(cfg: FamilyConfig, seed: int, flow: FlowSpec | None = None) -> list[ShapeRecord]:
    flow = flow or FlowSpec()
    specs = sample_specs(cfg, make_rng(seed, "data", "specs"))
    return [make_record(i, s, cfg.resolution, flow) for i, s in enumerate(specs)]


def write_dataset(root: Path, records: list[ShapeRecord], extra: dict | None = None) -> Path:
    root = Path(root)
    (root / "shapes").mkdir(parents=True, exist_ok=True)
    (root / "fields").mkdir(parents=True, exist_ok=True)
    entries = []
    for r in records:
        write_obj(root / "shapes" / f"{r.index:04d}.obj", r.mesh)
        write_field_csv(root / "fields" / f"{r.index:04d}.csv", r.field)
        entries.append({"index": r.index, "spec": r.spec.to_dict(), "scale": r.scale,
                        "offset": [float(x) for x in r.offset], "drag": r.drag})
    manifest = {"shapes": entries, **(extra or {})}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_dataset(root: Path) -> list[ShapeRecord]:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise DataError(f"no dataset manifest at {path}; run gen-data first")
    manifest = json.loads(path.read_text())
    out = []
    for e in manifest["shapes"]:
        i = int(e["index"])
        mesh = read_obj(root / "shapes" / f"{i:04d}.obj")
        fld = read_field_csv(root / "fields" / f"{i:04d}.csv", mesh.n_vertices)
        out.append(ShapeRecord(i, SuperellipsoidSpec.from_dict(e["spec"]), mesh, fld, float(e["drag"]),
                               float(e["scale"]), np.asarray(e["offset"], dtype=float)))
    return out


def split_indices(n: int, n_train: int) -> tuple[list[int], list[int]]:
    """First ``n_train`` shapes train, the rest are held out."""
    if not 0 < n_train <= n:
        raise ConfigError(f"cannot train on {n_train} of {n} shapes")
    return list(range(n_train)), list(range(n_train, n))


@dataclass
class Supervision:
    """Query points with semi-continuous occupancy and field targets."""

    points: np.ndarray
    occupancy: np.ndarray
    field: np.ndarray  # (n, channels)


def field_at_closest(mesh: Mesh, values: np.ndarray, face_index: np.ndarray, bary: np.ndarray) -> np.ndarray:
    """Vertex field interpolated at the closest surface point of each query."""
    corner = values[mesh.faces[face_index]]
    return (corner * bary).sum(axis=1)


def make_supervision(record: ShapeRecord, n: int, h: float, rng: np.random.Generator,
                     near_fraction: float = 0.5) -> Supervision:
    """Half near-surface (jittered by N(0, h)), half uniform in the cube."""
    n_near = int(round(n * near_fraction))
    surf = sample_surface(record.mesh, n_near, rng)
    near = surf.positions + rng.normal(0.0, h, size=(n_near, 3))
    pts = np.clip(np.concatenate([near, rng.random((n - n_near, 3))]), 0.0, 1.0)
    occ = occupancy_of(record.mesh, pts, h)
    fld = field_at_closest(record.mesh, record.field, occ.face_index, occ.bary)
    return Supervision(pts, occ.occupancy, fld[:, None])


def surface_samples(record: ShapeRecord, n: int, rng: np.random.Generator) -> PointSamples:
    return sample_surface(record.mesh, n, rng, vertex_values=record.field)


def family_to_dict(cfg: FamilyConfig) -> dict:
    return asdict(cfg)
