"""Wavefront OBJ meshes and ``vertex_index,value`` CSV field sidecars."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import DataError
from .mesh import Mesh


def write_obj(path: str | Path, mesh: Mesh) -> None:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {i + 1} {j + 1} {k + 1}" for i, j, k in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_obj(path: str | Path) -> Mesh:
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(t) for t in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(t.split("/")[0]) - 1 for t in parts[1:]]
                faces += [[idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1)]
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: malformed OBJ record") from exc
    return Mesh(np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_field_csv(path: str | Path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype=float).reshape(-1)
    rows = ["vertex_index,value"] + [f"{i},{v:.17g}" for i, v in enumerate(values)]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def read_field_csv(path: str | Path, n_vertices: int | None = None) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != "vertex_index,value":
        raise DataError(f"{path}: expected header 'vertex_index,value'")
    data = {}
    for line in lines[1:]:
        if line.strip():
            i, v = line.split(",")
            data[int(i)] = float(v)
    n = n_vertices if n_vertices is not None else len(data)
    if sorted(data) != list(range(n)):
        raise DataError(f"{path}: field does not cover vertices 0..{n - 1}")
    return np.array([data[i] for i in range(n)])
