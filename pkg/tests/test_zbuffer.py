import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from zbufdepth.errors import InvalidInput
from zbufdepth.geometry import DepthMap, Intrinsics, PointCloud, Status, project
from zbufdepth.zbuffer import (cell_multiplicity, heuristic_filter, register,
                               self_registration, zbuffer_parallel,
                               zbuffer_serial_oracle)


@st.composite
def instances(draw, max_side=64, max_mult=8, tie_prone=False):
    """Random scatter problems: each used cell receives 1..max_mult points."""
    w = draw(st.integers(1, max_side))
    h = draw(st.integers(1, max_side))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    cells = rng.choice(w * h, size=min(w * h, draw(st.integers(1, 200))), replace=False)
    mult = rng.integers(1, max_mult + 1, size=len(cells))
    k = np.repeat(cells, mult)
    if tie_prone:
        d = rng.integers(1, 4, size=len(k)).astype(float)
    else:
        d = rng.uniform(0.5, 80.0, size=len(k))
    order = rng.permutation(len(k))
    return d[order], k[order], w * h


def assert_same(a, b):
    np.testing.assert_array_equal(a.visible, b.visible)
    np.testing.assert_array_equal(a.zbuffer, b.zbuffer)


def test_two_point_occlusion():
    for fn in (zbuffer_parallel, zbuffer_serial_oracle):
        r = fn([5.0, 3.0], [7, 7], 10)
        assert list(r.visible) == [1]
        assert r.zbuffer[7] == 3.0
        assert np.isinf(r.zbuffer[:7]).all()


def test_tie_keeps_all_minimal():
    for fn in (zbuffer_parallel, zbuffer_serial_oracle):
        assert list(fn([2.0, 2.0], [7, 7], 10).visible) == [0, 1]


def test_distinct_cells_one_iteration():
    r = zbuffer_parallel(np.arange(1.0, 11.0), np.arange(10), 10)
    assert r.iterations == 1
    assert list(r.visible) == list(range(10))


def test_empty_input():
    r = zbuffer_parallel([], [], 5)
    assert len(r.visible) == 0 and r.iterations == 1


@pytest.mark.parametrize("bad", [
    dict(depths=[1.0], raster_indices=[5], cell_count=5),
    dict(depths=[1.0], raster_indices=[-1], cell_count=5),
    dict(depths=[0.0], raster_indices=[0], cell_count=5),
    dict(depths=[-1.0], raster_indices=[0], cell_count=5),
    dict(depths=[np.inf], raster_indices=[0], cell_count=5),
    dict(depths=[np.nan], raster_indices=[0], cell_count=5),
    dict(depths=[1.0, 2.0], raster_indices=[0], cell_count=5),
])
def test_invalid_inputs(bad):
    with pytest.raises(InvalidInput):
        zbuffer_parallel(**bad)
    with pytest.raises(InvalidInput):
        zbuffer_serial_oracle(**bad)


def test_bad_mode_and_order():
    with pytest.raises(InvalidInput):
        zbuffer_parallel([1.0], [0], 1, mode="gpu")
    with pytest.raises(InvalidInput):
        zbuffer_parallel([1.0, 2.0], [0, 0], 1, scatter_order=[0, 0])
    with pytest.raises(InvalidInput):
        zbuffer_parallel([1.0], [0], 1, mode="threaded", scatter_order=[0])


@pytest.mark.parametrize("m", [1, 2, 3, 4, 5])
def test_every_scatter_order_on_a_stack(m):
    depths = np.arange(1.0, m + 1.0)
    ref = zbuffer_serial_oracle(depths, np.zeros(m, int), 1)
    worst = 0
    for perm in itertools.permutations(range(m)):
        r = zbuffer_parallel(depths, np.zeros(m, int), 1, scatter_order=perm)
        assert_same(r, ref)
        assert r.iterations <= m
        worst = max(worst, r.iterations)
    # farthest-first order lets the farthest point win every race
    assert worst == m


@given(instances())
def test_oracle_equivalence(inst):
    d, k, cells = inst
    ref = zbuffer_serial_oracle(d, k, cells)
    r = zbuffer_parallel(d, k, cells)
    assert_same(r, ref)
    assert 1 <= r.iterations <= cell_multiplicity(k, cells).max()


@given(instances(max_side=16, tie_prone=True))
def test_oracle_equivalence_with_ties(inst):
    d, k, cells = inst
    assert_same(zbuffer_parallel(d, k, cells), zbuffer_serial_oracle(d, k, cells))


@given(instances(max_side=16), st.integers(0, 2**32 - 1))
def test_adversarial_orders_and_progress(inst, seed):
    d, k, cells = inst
    perm = np.random.default_rng(seed).permutation(len(d))
    r = zbuffer_parallel(d, k, cells, scatter_order=perm)
    assert_same(r, zbuffer_serial_oracle(d, k, cells))
    assert all(a > b for a, b in zip(r.round_sizes, r.round_sizes[1:]))
    assert r.iterations <= cell_multiplicity(k, cells).max()


@given(instances())
def test_visibility_soundness(inst):
    d, k, cells = inst
    r = zbuffer_parallel(d, k, cells)
    mask = r.visible_mask(len(d))
    assert np.all(d[mask] == r.zbuffer[k[mask]])
    assert np.all(d[~mask] > r.zbuffer[k[~mask]])
    populated = np.isfinite(r.zbuffer)
    np.testing.assert_array_equal(populated, cell_multiplicity(k, cells) > 0)


@pytest.mark.parametrize("threads", [1, 2, 4])
def test_threaded_mode_matches_oracle(threads, rng):
    k = rng.integers(0, 500, size=20000)
    d = rng.uniform(1, 50, size=len(k))
    ref = zbuffer_serial_oracle(d, k, 500)
    for _ in range(3):
        assert_same(zbuffer_parallel(d, k, 500, mode="threaded", threads=threads), ref)


def test_heuristic_examples():
    target = DepthMap.from_array(np.full((1, 2), 5.0))
    assert list(heuristic_filter([5.0], target, [0])) == [0]
    assert list(heuristic_filter([5.01], target, [0])) == []
    assert list(heuristic_filter([5.01], target, [0], tolerance=0.02)) == [0]


def test_heuristic_invalid_cells_pass():
    target = DepthMap(np.array([[5.0, 0.0]]), np.array([[True, False]]))
    assert list(heuristic_filter([9.0, 9.0], target, [0, 1])) == [1]
    with pytest.raises(InvalidInput):
        heuristic_filter([1.0], target, [2])


@given(instances(max_side=16))
def test_heuristic_superset_with_exact_target(inst):
    d, k, cells = inst
    r = zbuffer_parallel(d, k, cells)
    z = np.where(np.isfinite(r.zbuffer), r.zbuffer, 0.0).reshape(1, cells)
    target = DepthMap(z, z > 0)
    kept = set(heuristic_filter(d, target, k).tolist())
    assert set(r.visible.tolist()) <= kept


def _cloud_at(points, w, h):
    src = [(p % w, p // w) for p in range(len(points))]
    return PointCloud(points, src, w, h)


def test_register_single_point():
    intr = Intrinsics(1.0, 1.0, 0.0, 0.0, 3, 3)
    pc = _cloud_at(np.array([[0.0, 0.0, 3.0]]), 3, 3)
    out = project(pc, intr)
    reg = register(pc, out, zbuffer_parallel(out.depth, out.raster_index, 9), intr)
    np.testing.assert_array_equal(reg.coords[0, 0], [0, 0, 3])
    assert reg.populated.sum() == 1


def test_register_keeps_nearer_and_lowest_index_on_tie():
    intr = Intrinsics(1.0, 1.0, 0.0, 0.0, 3, 3)
    pts = np.array([[0.0, 0.0, 5.0], [0.0, 0.0, 2.0], [0.0, 0.0, 2.0], [2.0, 0.0, 2.0]])
    pc = _cloud_at(pts, 3, 3)
    out = project(pc, intr)
    zres = zbuffer_parallel(out.depth, out.raster_index, 9)
    assert list(zres.visible) == [1, 2, 3]
    reg = register(pc, out, zres, intr)
    assert reg.owner[0, 0] == 1
    assert reg.owner[0, 1] == 3
    assert reg.populated.sum() == 2
    assert np.all(reg.coords[~reg.populated] == 0)


def test_register_rejects_negative_points():
    intr = Intrinsics(1.0, 1.0, 0.0, 0.0, 3, 3)
    pc = _cloud_at(np.array([[0.0, 0.0, -1.0]]), 3, 3)
    out = project(pc, intr)
    assert out.status[0] == Status.NEGATIVE_IN_FRAME
    with pytest.raises(InvalidInput):
        register(pc, out, np.array([0]), intr)


def test_identity_registration_is_reshaped_cloud(rng):
    from zbufdepth.geometry import inverse_project
    intr = Intrinsics(20.0, 20.0, 7.5, 5.5, 16, 12)
    depth = DepthMap(rng.uniform(1, 10, (12, 16)), rng.random((12, 16)) < 0.9)
    pc = inverse_project(depth, intr)
    out = project(pc, intr)
    zres = zbuffer_parallel(out.depth[out.in_frame_positive],
                            out.raster_index[out.in_frame_positive], intr.cell_count)
    reg = register(pc, out, zres, intr)
    ref = self_registration(pc, intr)
    np.testing.assert_array_equal(reg.populated, depth.validity)
    np.testing.assert_array_equal(reg.coords, ref.coords)
