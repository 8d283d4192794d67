import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invforge.diffcore import make_rng
from invforge.errors import ConfigError, DataError
from invforge.geometry import Mesh, SuperellipsoidSpec, make_superellipsoid, normalize_to_unit_cube
from invforge.metrics import (TABLE_COLUMNS, CEMConfig, Design, cem_search, coverage, d2_descriptor, default_tau,
                              evaluate, latent_backprop, novelty, write_table_csv)

arrays = st.integers(1, 6).flatmap(lambda n: st.lists(
    st.lists(st.floats(-5, 5, allow_nan=False), min_size=3, max_size=3), min_size=n, max_size=n))


def test_novelty_hand_instance():
    g = np.array([[0.0, 0.0], [3.0, 4.0], [1.0, 1.0]])
    t = np.array([[0.0, 1.0], [3.0, 0.0]])
    # minima: g0 -> t0 = 1; g1 -> t1 = 4; g2 -> t0 = 1
    assert novelty(g, t) == pytest.approx(2.0, abs=1e-15)
    brute = np.mean([min(np.linalg.norm(a - b) for b in t) for a in g])
    assert novelty(g, t) == brute
    assert novelty(np.array([[1.0, 0.0]]), np.array([[0.0, 0.0]])) == 1.0


@settings(max_examples=60, deadline=None)
@given(arrays, st.integers(0, 1000))
def test_novelty_self_zero_and_permutation(x, seed):
    x = np.array(x)
    assert novelty(x, x) == 0.0
    rng = make_rng(seed)
    y = x + rng.normal(size=x.shape)
    assert novelty(y[rng.permutation(len(y))], x[rng.permutation(len(x))]) == pytest.approx(novelty(y, x), rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays, arrays, st.floats(1e-3, 10), st.floats(1e-3, 10))
def test_coverage_properties(g, t, a, b):
    g, t = np.array(g), np.array(t)
    assert coverage(t, t, a) == 1.0
    lo, hi = sorted((a, b))
    assert coverage(g, t, lo) <= coverage(g, t, hi)
    assert coverage(g, t, lo) <= coverage(np.vstack([g, t[:1] + 0.1]), t, lo)
    assert 0.0 <= coverage(g, t, lo) <= 1.0


def test_coverage_examples():
    t = np.array([[0.0], [1.0], [2.0], [3.0]])
    assert coverage(np.array([[0.5]]), t, 0.6) == 0.5
    assert coverage(np.array([[10.0]]), t, 1e-12) == 0.0
    with pytest.raises(ConfigError):
        coverage(t, t, 0.0)
    with pytest.raises(DataError):
        coverage(t, np.zeros((0, 1)), 1.0)
    with pytest.raises(DataError):
        novelty(np.zeros((0, 1)), t)
    # with k = 2 a training point needs two generated neighbours within tau
    assert coverage(np.array([[0.4], [0.6]]), t, 0.65, k=2) == 0.5


def test_default_tau_is_median_nn_distance():
    t = np.array([[0.0], [1.0], [3.0], [7.0]])
    assert default_tau(t) == pytest.approx(np.median([1, 1, 2, 4]))


def _shape(a, b, c, e1=1.0, e2=1.0, res=24):
    return normalize_to_unit_cube(make_superellipsoid(SuperellipsoidSpec(a, b, c, e1, e2), res))[0]


def test_d2_descriptor_contract():
    m = _shape(0.4, 0.3, 0.3)
    d = d2_descriptor(m)
    assert d.shape == (64,) and d.min() >= 0 and np.linalg.norm(d) == pytest.approx(1.0, abs=1e-14)
    assert np.array_equal(d, d2_descriptor(m))
    assert not np.array_equal(d, d2_descriptor(m, seed=1))
    other = d2_descriptor(_shape(0.5, 0.1, 0.1))
    assert np.linalg.norm(d - other) > np.linalg.norm(d - d2_descriptor(m, seed=1))


def test_cem_converges_on_quadratic():
    z_star = np.array([0.3, -0.7, 1.1, 0.2])
    obj = lambda z: ((z - z_star) ** 2).sum(axis=-1)
    init = make_rng(0).normal(size=(32, 4))
    res = cem_search(obj, init, CEMConfig(iterations=200), seed=1)
    assert np.abs(res.mean - z_star).max() < 0.05
    assert np.all(np.diff(res.history) <= 0)
    again = cem_search(obj, init, CEMConfig(iterations=200), seed=1)
    assert np.array_equal(again.best, res.best)


def test_cem_degenerate_cases():
    obj = lambda z: ((z - 5.0) ** 2).sum(axis=-1)
    init = make_rng(0).normal(size=(16, 2))
    res = cem_search(obj, init, CEMConfig(iterations=0), seed=0)
    assert np.array_equal(res.best, init[np.argmin(obj(init))])
    with pytest.raises(ConfigError):
        CEMConfig(population=10, elite_fraction=0.1)
    with pytest.raises(ConfigError):
        CEMConfig(smoothing=1.5)
    # all samples are elites: the mean follows the population mean, which is unbiased about the start
    full = cem_search(obj, init, CEMConfig(population=512, elite_fraction=1.0, iterations=5), seed=0)
    assert np.abs(full.mean - init.mean(axis=0)).max() < 0.3


def test_latent_backprop_cases():
    z_star = np.array([[1.0, -2.0], [0.5, 0.25]])
    fn = lambda z: (float(((z - z_star) ** 2).sum()), 2 * (z - z_star))
    z0 = np.zeros((2, 2))
    res = latent_backprop(fn, z0, steps=600, lr=0.05)
    assert np.linalg.norm(res.best - z_star) < 1e-3
    assert np.array_equal(latent_backprop(fn, z0, 0, 0.05).best, z0)
    assert np.array_equal(latent_backprop(fn, z0, 50, 0.0).best, z0)


def test_latent_backprop_stops_on_nan():
    calls = []

    def fn(z):
        calls.append(z.copy())
        bad = len(calls) > 3
        return (np.nan if bad else float((z ** 2).sum())), 2 * z

    res = latent_backprop(fn, np.ones(3), steps=20, lr=0.1)
    assert np.all(np.isfinite(res.best)) and np.array_equal(res.best, calls[2])


def test_evaluate_on_training_set(tmp_path):
    train = [_shape(0.4, 0.3, 0.3), _shape(0.5, 0.2, 0.3, 0.6), _shape(0.3, 0.3, 0.3, 1.4, 0.7)]
    rep = evaluate([Design(m) for m in train], train, None)
    assert rep.aggregate["coverage"] == 1.0 and rep.aggregate["novelty"]["mean"] == 0.0
    assert rep.aggregate["n_valid"] == 3
    rep.to_json(tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["aggregate"]["tau"] > 0
    write_table_csv(tmp_path / "t.csv", [rep])
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == ",".join(TABLE_COLUMNS)


def test_evaluate_sphere_and_open_mesh_exclusion():
    sphere = _shape(1, 1, 1, res=64)
    plate = Mesh([[0, 0, 0], [0, 1, 0], [0, 1, 1]], [[0, 1, 2]])
    rep = evaluate([Design(sphere), Design(plate)], [sphere, _shape(0.5, 0.3, 0.3)], None)
    assert rep.aggregate["n_excluded"] == 1 and rep.designs[1]["watertight"] is False
    assert rep.aggregate["sim_drag"]["mean"] == pytest.approx(1.0, abs=0.02)
    with pytest.raises(DataError):
        evaluate([Design(plate)], [sphere, sphere], None)
    with pytest.raises(DataError):
        evaluate([], [sphere, sphere], None)
