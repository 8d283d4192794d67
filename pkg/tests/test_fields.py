import numpy as np
import pytest
from scipy.special import logit

from invforge.diffcore import AdamW, Module, grad_check, make_rng
from invforge.errors import ConfigError, DegenerateLatentError
from invforge.fields import (MappingHeads, Triplane, extract_design, mesh_occupancy, query_fields,
                             triplane_backward, triplane_forward, triplane_sample)
from invforge.geometry import is_watertight, make_superellipsoid, mesh_volume, SuperellipsoidSpec

SPHERE_VOL = 4.0 / 3.0 * np.pi * 0.4 ** 3


def _zero_heads(d_t, rng, bias=0.0, field_bias=0.0):
    heads = MappingHeads(d_t, rng, hidden=8, layers=2)
    for _, p, _ in heads.named_parameters():
        p[...] = 0.0
    heads.occ.layers[-1].p("bias")[...] = bias
    heads.field.layers[-1].p("bias")[...] = field_bias
    return heads


def test_zero_planes_give_zero_feature():
    tp = Triplane(np.zeros((3, 8, 8, 4)))
    assert np.array_equal(triplane_sample(tp, [0.3, 0.7, 0.1]), np.zeros(4))


def test_constant_planes_sum():
    planes = np.zeros((3, 5, 5, 2))
    planes[0], planes[1], planes[2] = 1.0, 2.0, -0.5
    q = make_rng(0).random((20, 3))
    np.testing.assert_allclose(triplane_sample(Triplane(planes), q), 2.5, atol=1e-14)


def test_two_by_two_cell_centre():
    # corner values 0,1,2,3 laid out on a 2x2 plane, same plane three times
    plane = np.array([[0.0, 1.0], [2.0, 3.0]])[..., None]
    tp = Triplane(np.stack([plane] * 3))
    assert triplane_sample(tp, [0.5, 0.5, 0.5])[0] == pytest.approx(4.5, abs=1e-14)


def test_planes_add_linearly():
    rng = make_rng(1)
    planes = rng.normal(size=(3, 6, 6, 3))
    q = rng.random((30, 3))
    full = triplane_sample(Triplane(planes), q)
    for p in range(3):
        only = np.zeros_like(planes)
        only[p] = planes[p]
        dropped = planes.copy()
        dropped[p] = 0.0
        diff = full - triplane_sample(Triplane(dropped), q)
        np.testing.assert_allclose(diff, triplane_sample(Triplane(only), q), atol=1e-12)


def test_out_of_cube_clamps(caplog):
    planes = make_rng(2).normal(size=(3, 4, 4, 2))
    tp = Triplane(planes)
    with caplog.at_level("WARNING"):
        out = triplane_sample(tp, [1.3, -0.2, 0.5])
    assert "clamping" in caplog.text
    np.testing.assert_allclose(out, triplane_sample(tp, [1.0, 0.0, 0.5]))


def test_triplane_shape_validation():
    with pytest.raises(ConfigError):
        Triplane(np.zeros((2, 4, 4, 3)))


def test_query_fields_trivial():
    tp = Triplane(np.zeros((3, 8, 8, 4)))
    occ, fld = query_fields(tp, _zero_heads(4, make_rng(0)), np.full((1, 3), 0.4))
    assert occ[0] == 0.5 and fld[0, 0] == 0.0
    occ, _ = query_fields(tp, _zero_heads(4, make_rng(0), bias=50.0), np.full((1, 3), 0.4))
    assert occ[0] > 1 - 1e-12


def _end_to_end(planes, heads, q, w_occ, w_fld):
    feat, c1 = triplane_forward(planes[None], q[None])
    (lg, fld), c2 = heads.forward(feat[0])
    val = float(np.sum(w_occ * lg) + np.sum(w_fld * fld))
    dfeat = heads.backward(c2, w_occ, w_fld)
    dplanes, dq = triplane_backward(planes[None], c1, dfeat[None])
    return val, dplanes[0], dq[0]


def test_gradient_wrt_planes_and_points():
    rng = make_rng(3)
    planes = rng.normal(size=(3, 5, 5, 4))
    heads = MappingHeads(4, rng, hidden=8, layers=3)
    q = rng.uniform(0.05, 0.95, size=(7, 3))
    w_occ, w_fld = rng.normal(size=7), rng.normal(size=(7, 1))
    err_p = grad_check(lambda p: (lambda r: (r[0], r[1]))(_end_to_end(p, heads, q, w_occ, w_fld)), planes)
    err_q = grad_check(lambda x: (lambda r: (r[0], r[2]))(_end_to_end(planes, heads, x, w_occ, w_fld)), q)
    assert err_p < 1e-4 and err_q < 1e-4


def test_extract_constant_occupancy_is_degenerate():
    tp = Triplane(np.zeros((3, 8, 8, 4)))
    with pytest.raises(DegenerateLatentError):
        extract_design(tp, _zero_heads(4, make_rng(0), bias=float(logit(0.4))), 16)
    with pytest.raises(ConfigError):
        extract_design(tp, _zero_heads(4, make_rng(0)), 8)


def test_injected_sphere_occupancy_volume():
    axis = np.linspace(0, 1, 64)
    pts = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), -1)
    # linear ramp of half-width one voxel around the analytic sphere
    d = np.linalg.norm(pts - 0.5, axis=-1) - 0.4
    occ = np.clip(0.5 - d * 63 / 2, 0, 1)
    m = mesh_occupancy(occ)
    assert is_watertight(m)
    ref = mesh_volume(make_superellipsoid(SuperellipsoidSpec(0.4, 0.4, 0.4), 64))
    assert abs(mesh_volume(m) / ref - 1) < 0.02


def test_constant_field_head():
    # single-layer heads: logit = 40 * (t_q + 0.09) with t_q ~ -|q - 0.5|^2, a sphere of radius 0.3
    r = 64
    axis = np.linspace(0, 1, r)
    u, v = np.meshgrid(axis, axis, indexing="ij")
    planes = np.zeros((3, r, r, 2))
    planes[..., 0] = -0.5 * ((u - 0.5) ** 2 + (v - 0.5) ** 2)
    heads = MappingHeads(2, make_rng(0), layers=1)
    heads.occ.layers[0].p("weight")[...] = [[40.0], [0.0]]
    heads.occ.layers[0].p("bias")[...] = 40.0 * 0.09
    heads.field.layers[0].p("weight")[...] = 0.0
    heads.field.layers[0].p("bias")[...] = 0.7
    mesh, phi = extract_design(Triplane(planes), heads, 48)
    assert is_watertight(mesh)
    assert abs(mesh_volume(mesh) / (4 / 3 * np.pi * 0.3 ** 3) - 1) < 0.05
    np.testing.assert_allclose(phi, 0.7, atol=1e-12)


class _Planes(Module):
    def __init__(self, planes):
        super().__init__()
        self.add_param("planes", planes)


@pytest.fixture(scope="module")
def toy_sphere():
    """Triplane + heads fitted to the occupancy of a radius-0.35 sphere."""
    rng = make_rng(7)
    r, d = 16, 8
    holder = _Planes(rng.normal(scale=0.1, size=(3, r, r, d)))
    heads = MappingHeads(d, rng, hidden=32, layers=3)
    opt_p = AdamW(holder, lr=3e-2, weight_decay=0.0, total_steps=400)
    opt_h = AdamW(heads, lr=3e-3, weight_decay=0.0, total_steps=400)
    for _ in range(400):
        q = rng.random((512, 3))
        target = (np.linalg.norm(q - 0.5, axis=1) < 0.35).astype(float)
        holder.zero_grad()
        heads.zero_grad()
        feat, c1 = triplane_forward(holder.p("planes")[None], q[None])
        (lg, fld), c2 = heads.forward(feat[0])
        prob = 1 / (1 + np.exp(-lg))
        dfeat = heads.backward(c2, (prob - target) / len(q), np.zeros_like(fld))
        dplanes, _ = triplane_backward(holder.p("planes")[None], c1, dfeat[None])
        holder.g("planes")[...] += dplanes[0]
        opt_p.step()
        opt_h.step()
    return Triplane(holder.p("planes")), heads


def test_trained_sphere_centre_and_resolution_stability(toy_sphere):
    tp, heads = toy_sphere
    occ, _ = query_fields(tp, heads, np.full((1, 3), 0.5))
    assert occ[0] > 0.9
    v32 = mesh_volume(extract_design(tp, heads, 32)[0])
    v64 = mesh_volume(extract_design(tp, heads, 64)[0])
    assert abs(v32 / v64 - 1) < 0.05


def test_triplane_checkpoint_names(tmp_path):
    from invforge.diffcore import load_checkpoint
    tp = Triplane(make_rng(0).normal(size=(3, 4, 4, 2)))
    tp.save(tmp_path / "t.ckpt")
    names, _ = load_checkpoint(tmp_path / "t.ckpt")
    assert set(names) == {"triplane.xy", "triplane.xz", "triplane.yz"}
    assert np.array_equal(Triplane.load(tmp_path / "t.ckpt").planes, tp.planes)
