"""Meshes, the superellipsoid family, sampling, occupancy and isosurfaces."""

from .io import read_field_csv, read_obj, write_field_csv, write_obj
from .isosurface import marching_cubes, sample_grid
from .mesh import (Mesh, box_mesh, check_mesh, euler_characteristic, is_watertight, mesh_volume,
                   normalize_to_unit_cube, orient_outward, signed_volume, vertex_areas)
from .occupancy import (OccupancyResult, band_halfwidth, closest_points, inside_grid, inside_mesh, occupancy_of,
                        semi_continuous)
from .sampling import PointSamples, sample_surface
from .superellipsoid import SuperellipsoidSpec, analytic_volume, inside_function, make_superellipsoid

__all__ = [
    "Mesh", "OccupancyResult", "PointSamples", "SuperellipsoidSpec", "analytic_volume", "band_halfwidth",
    "box_mesh", "check_mesh", "closest_points", "euler_characteristic", "inside_function", "inside_grid", "inside_mesh",
    "is_watertight", "make_superellipsoid", "marching_cubes", "mesh_volume", "normalize_to_unit_cube",
    "occupancy_of", "orient_outward", "read_field_csv", "read_obj", "sample_grid", "sample_surface",
    "semi_continuous", "signed_volume", "vertex_areas", "write_field_csv", "write_obj",
]
