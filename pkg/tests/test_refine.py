import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invforge.diffcore import grad_check, make_rng
from invforge.errors import ConfigError, DimensionError
from invforge.geometry import SuperellipsoidSpec, box_mesh, make_superellipsoid, normalize_to_unit_cube
from invforge.refine import (FULL_SCALE_COUNTS, RefineConfig, bernstein_weights, build_lattice, cell_volumes, deform,
                             refine, refinement_loss, write_trace_csv)
from invforge.surrogate import oracle_drag, oracle_drag_gradient


def _sphere(res=24):
    return normalize_to_unit_cube(make_superellipsoid(SuperellipsoidSpec(1, 1, 1), res))[0]


def test_bernstein_examples():
    np.testing.assert_array_equal(bernstein_weights(0.0, 4), [1, 0, 0, 0])
    np.testing.assert_allclose(bernstein_weights(0.5, 3), [0.25, 0.5, 0.25], atol=1e-15)
    with pytest.raises(ValueError):
        bernstein_weights(1.2, 3)
    with pytest.raises(ConfigError):
        bernstein_weights(0.3, 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 20), st.integers(0, 2 ** 31))
def test_partition_of_unity(n, seed):
    u = make_rng(seed).random(10_000)
    w = bernstein_weights(u, n)
    assert np.abs(w.sum(axis=1) - 1).max() <= 1e-12
    assert w.min() >= 0


def test_trilinear_case_and_corner_vertex():
    box = box_mesh()
    lattice, binding = build_lattice(box, (2, 2, 2), margin=0.0)
    # the unit box's corner (0,0,0) sits on lattice corner 0
    v0 = np.where((box.vertices == 0).all(axis=1))[0][0]
    assert binding.weights[v0, 0] == 1.0 and binding.weights[v0].sum() == 1.0
    s, t, u = 0.3, 0.6, 0.8
    w = bernstein_weights(np.array([s, t, u]), 2)
    expected = np.einsum("i,j,k->ijk", *w).reshape(-1)
    from invforge.refine import bind
    np.testing.assert_allclose(bind(np.array([[s, t, u]]), lattice).weights[0], expected, atol=1e-15)


def test_rest_reproduction_is_bitwise():
    m = _sphere()
    for counts in [(2, 2, 2), (5, 4, 4), FULL_SCALE_COUNTS]:
        lattice, binding = build_lattice(m, counts)
        assert np.array_equal(deform(binding, lattice), m.vertices)


def test_translation_and_affine_precision():
    m = _sphere()
    lattice, binding = build_lattice(m, (6, 5, 4))
    d = np.array([0.1, -0.2, 0.05])
    np.testing.assert_allclose(deform(binding, lattice.with_points(lattice.rest + d)), m.vertices + d, atol=1e-12)
    a = make_rng(0).normal(size=(3, 3)) * 0.3 + np.eye(3)
    b = np.array([0.3, 0.1, -0.4])
    moved = lattice.with_points(lattice.rest @ a.T + b)
    assert np.abs(deform(binding, moved) - (m.vertices @ a.T + b)).max() <= 1e-10


def test_single_corner_displacement_moves_centre_by_eighth():
    lattice, _ = build_lattice(box_mesh(), (2, 2, 2), margin=0.0)
    from invforge.refine import bind
    binding = bind(np.array([[0.5, 0.5, 0.5]]), lattice)
    delta = np.array([0.8, -0.4, 0.16])
    pts = lattice.rest.copy()
    pts[1, 1, 1] += delta
    np.testing.assert_allclose(deform(binding, lattice.with_points(pts))[0] - 0.5, delta / 8, atol=1e-15)


def test_full_scale_lattice_preset():
    lattice, binding = build_lattice(_sphere(16), FULL_SCALE_COUNTS)
    assert lattice.rest.shape == (20, 6, 6, 3) and binding.weights.shape[1] == 720


def test_count_mismatch():
    m = _sphere(16)
    l1, b1 = build_lattice(m, (3, 3, 3))
    l2, _ = build_lattice(m, (4, 3, 3))
    with pytest.raises(DimensionError):
        deform(b1, l2)


def test_cell_volume_examples():
    lattice, _ = build_lattice(box_mesh(), (3, 4, 2), margin=0.0)
    np.testing.assert_allclose(lattice.rest_volumes.sum(), 1.0, atol=1e-14)
    assert np.array_equal(cell_volumes(lattice.rest), lattice.rest_volumes)
    s = 1.7
    ratio = cell_volumes(lattice.rest * s) / lattice.rest_volumes
    np.testing.assert_allclose(ratio, s ** 3, rtol=1e-12)
    shear = np.array([[1, 0.4, -0.3], [0, 1, 0.7], [0, 0, 1.0]])
    ratio = cell_volumes(lattice.rest @ shear.T) / lattice.rest_volumes
    assert np.abs(ratio - 1).max() <= 1e-12


def _oracle(mesh):
    return lambda v: (oracle_drag(mesh.with_vertices(v)), oracle_drag_gradient(mesh.with_vertices(v)))


def test_refinement_loss_trivial_cases():
    m = _sphere(16)
    lattice, binding = build_lattice(m, (4, 3, 3))
    terms, _ = refinement_loss(lattice, binding, _oracle(m))
    assert terms.total == oracle_drag(m) and terms.smooth == 0 and terms.volume == 0
    d = np.array([0.1, 0.2, -0.3])
    terms, _ = refinement_loss(lattice.with_points(lattice.rest + d), binding, _oracle(m))
    assert terms.volume == pytest.approx(0.0, abs=1e-24)
    assert terms.smooth == pytest.approx(lattice.n_points * d @ d, rel=1e-12)


def test_refinement_loss_gradient():
    m = _sphere(12)
    lattice, binding = build_lattice(m, (3, 3, 3))
    rng = make_rng(2)
    start = lattice.rest + rng.normal(scale=0.03, size=lattice.rest.shape)

    def fn(pts):
        terms, grad = refinement_loss(lattice.with_points(pts), binding, _oracle(m), 0.5, 2.0)
        return terms.total, grad

    assert grad_check(fn, start, h=1e-6) < 1e-4


def test_zero_steps_returns_input():
    m = _sphere(16)
    res = refine(m, _oracle(m), RefineConfig(steps=0))
    assert res.mesh is m and not res.rejected


def test_huge_smoothness_keeps_lattice_at_rest():
    m = _sphere(16)
    res = refine(m, _oracle(m), RefineConfig(steps=30, lam_smooth=1e6, lr=1e-3))
    assert np.abs(res.lattice.offsets).max() < 2e-3


def test_sphere_streamlining_against_oracle(tmp_path):
    m = _sphere(32)
    cfg = RefineConfig(counts=(5, 4, 4), steps=200)
    res = refine(m, _oracle(m), cfg)
    assert not res.rejected
    cd0, cd = oracle_drag(m), oracle_drag(res.mesh)
    objective = [row["objective"] for row in res.trace[:50]]
    assert np.all(np.diff(objective) < 0)
    assert cd <= 0.8 * cd0
    assert np.array_equal(res.mesh.faces, m.faces) and res.mesh.n_vertices == m.n_vertices
    again = refine(m, _oracle(m), cfg)
    assert np.array_equal(again.mesh.vertices, res.mesh.vertices)
    write_trace_csv(tmp_path / "trace.csv", res.trace)
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "step,loss,objective,smooth,volume,eta" and len(lines) == 201


def test_inverted_result_is_rejected():
    m = _sphere(16)
    # an objective that rewards collapsing the mesh through the x = 0.5 plane
    def collapse(v):
        return float(np.sum((v[:, 0] - 0.5) * np.sign(m.vertices[:, 0] - 0.5))), \
            np.stack([np.sign(m.vertices[:, 0] - 0.5), np.zeros(len(v)), np.zeros(len(v))], axis=1)
    res = refine(m, collapse, RefineConfig(steps=150, lr=5e-2, lam_vol=0.0, lam_smooth=0.0))
    assert res.rejected and res.mesh is m
