import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctba.pointcloud import (
    Scan,
    VoxelHashMap,
    build_map,
    estimate_normals,
    grid_subsample,
    nearest_in_27,
    pca_normals,
    preprocess_scan,
    voxel_key,
)


def grouping_oracle(points, size):
    """Closest-to-center representative per voxel via a plain dict."""
    best = {}
    for i, p in enumerate(points):
        k = tuple(int(v) for v in np.floor(p / size))
        d2 = float(np.sum((p - (np.array(k) + 0.5) * size) ** 2))
        if k not in best or d2 < best[k][0]:
            best[k] = (d2, i)
    return {k: v[1] for k, v in best.items()}


def brute_nearest(points, cells, size, q):
    """Linear scan over the representatives stored in the 27 cells around ``q``."""
    kq = np.floor(q / size).astype(int)
    best = None
    for off in itertools.product((-1, 0, 1), repeat=3):
        i = cells.get(tuple(int(v) for v in kq + off))
        if i is None:
            continue
        d = float(np.linalg.norm(points[i] - q))
        if best is None or d < best[1] or (d == best[1] and i < best[0]):
            best = (i, d)
    return best


def scan_of(points, normals=None):
    n = len(points)
    return Scan(0, points, np.linspace(0.0, 0.1, n), 0.0, 0.1, normals)


# -- voxel_key ----------------------------------------------------------------


def test_voxel_key_examples():
    assert voxel_key([0, 0, 0], 0.3) == (0, 0, 0)
    assert voxel_key([0.31, -0.01, 0.0], 0.3) == (1, -1, 0)
    assert voxel_key([-0.3, 0, 0], 0.3) == (-1, 0, 0)


def test_voxel_key_rejects_bad_input():
    with pytest.raises(ValueError):
        voxel_key([0, 0, 0], 0.0)
    with pytest.raises(ValueError):
        voxel_key([np.nan, 0, 0], 0.3)


@settings(max_examples=200, deadline=None)
@given(
    st.tuples(*[st.floats(0.05, 0.25)] * 3),
    st.tuples(*[st.integers(-50, 50)] * 3),
    st.tuples(*[st.integers(-1000, 1000)] * 3),
)
def test_voxel_key_translation_consistent(frac, base, shift):
    size = 0.3
    # keep away from cell faces so float rounding cannot move a point across
    p = (np.array(base) + np.array(frac) / size) * size
    k0 = np.array(voxel_key(p, size))
    k1 = np.array(voxel_key(p + size * np.array(shift), size))
    np.testing.assert_array_equal(k1, k0 + shift)


# -- build_map ----------------------------------------------------------------


def test_single_point_map():
    m = build_map(np.array([[0.1, 0.1, 0.1]]), 0.3)
    assert m.cells() == {(0, 0, 0): 0}


def test_closest_to_center_wins():
    pts = np.array([[0.01, 0.01, 0.01], [0.14, 0.16, 0.15]])
    assert build_map(pts, 0.3).cells() == {(0, 0, 0): 1}


def test_center_tie_goes_to_lower_index():
    pts = np.array([[0.1, 0.15, 0.15], [0.2, 0.15, 0.15], [0.1, 0.15, 0.15]])
    assert build_map(pts, 0.3).cells() == {(0, 0, 0): 0}
    assert build_map(pts[::-1].copy(), 0.3).cells() == {(0, 0, 0): 0}


def test_map_matches_grouping_oracle(rng):
    pts = rng.uniform(-3, 3, size=(10_000, 3))
    m = build_map(pts, 0.3)
    assert m.cells() == grouping_oracle(pts, 0.3)
    assert len(m) == len(m.cells())


def test_map_rebuild_is_deterministic(rng):
    pts = rng.uniform(-3, 3, size=(5000, 3))
    assert build_map(pts, 0.3).cells() == build_map(pts, 0.3).cells()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 300), st.just(3)), elements=st.floats(-5, 5)))
def test_map_property_matches_oracle(pts):
    m = build_map(pts, 0.4)
    assert m.cells() == grouping_oracle(pts, 0.4)
    assert all(0 <= i < len(pts) for i in m.indices())


# -- nearest_in_27 ----------------------------------------------------------------


def test_query_at_stored_point():
    pts = np.array([[1.0, 2.0, 3.0]])
    m = build_map(pts, 0.3)
    assert nearest_in_27(m, pts[0], pts) == (0, 0.0)


def test_query_in_empty_region():
    pts = np.array([[1.0, 2.0, 3.0]])
    assert nearest_in_27(build_map(pts, 0.3), [5.0, 5.0, 5.0], pts) is None


def test_nearest_rejects_foreign_backing_points():
    pts = np.zeros((1, 3))
    with pytest.raises(ValueError):
        nearest_in_27(build_map(pts, 0.3), [0, 0, 0], np.ones((1, 3)))


def test_nearest_matches_linear_scan_oracle(rng):
    pts = rng.uniform(-2, 2, size=(10_000, 3))
    m = build_map(pts, 0.3)
    cells = m.cells()
    queries = rng.uniform(-2.5, 2.5, size=(1000, 3))
    for q in queries:
        got = nearest_in_27(m, q, pts)
        want = brute_nearest(pts, cells, 0.3, q)
        assert got == (None if want is None else (want[0], pytest.approx(want[1], abs=1e-12)))


def test_vectorised_nearest_equals_scalar(rng):
    pts = rng.uniform(-2, 2, size=(3000, 3))
    m = build_map(pts, 0.3)
    queries = rng.uniform(-2.5, 2.5, size=(300, 3))
    idx, dist = m.nearest(queries)
    for q, i, d in zip(queries, idx, dist):
        r = nearest_in_27(m, q)
        assert (r is None and i == -1) or (r == (i, d))


# -- grid_subsample ----------------------------------------------------------------


def test_subsample_single_cell():
    pts = np.array([[0.01, 0.02, 0.03], [0.1, 0.1, 0.1], [0.05, 0.0, 0.12]])
    assert len(grid_subsample(scan_of(pts), 0.15)) == 1


def test_subsample_keeps_distant_points(rng):
    pts = np.array(list(itertools.product([0.0, 1.0, 2.0], repeat=3))) + 0.07
    assert len(grid_subsample(scan_of(pts), 0.15)) == len(pts)


def test_subsample_unit_cube_count(rng):
    pts = rng.uniform(0, 1, size=(20_000, 3))
    out = grid_subsample(scan_of(pts), 0.15)
    assert len(out) <= int(np.ceil(1 / 0.15)) ** 3
    assert len(out) == len(grouping_oracle(pts, 0.15))


def test_subsample_is_idempotent(rng):
    s = scan_of(rng.uniform(-2, 2, size=(4000, 3)))
    once = grid_subsample(s, 0.15)
    assert grid_subsample(once, 0.15) == once


def test_subsample_carries_times_and_normals(rng):
    pts = rng.uniform(-1, 1, size=(500, 3))
    nrm = np.tile([0.0, 0.0, 1.0], (500, 1))
    s = scan_of(pts, nrm)
    out = grid_subsample(s, 0.3)
    idx = [int(np.flatnonzero((pts == p).all(axis=1))[0]) for p in out.points]
    np.testing.assert_array_equal(out.times, s.times[idx])
    np.testing.assert_array_equal(out.normals, nrm[idx])


# -- normals ----------------------------------------------------------------


def test_plane_normals_exact(rng):
    xy = rng.uniform(-1, 1, size=(400, 2))
    pts = np.c_[xy, np.full(400, -1.5)]
    out = estimate_normals(scan_of(pts), k=30)
    assert out.valid_normals.all()
    np.testing.assert_allclose(np.abs(out.normals[:, 2]), 1.0, atol=1e-6)
    # oriented towards the sensor at the origin (above the plane)
    assert np.all(out.normals[:, 2] > 0)


def test_noisy_plane_matches_pca_oracle(rng):
    # 200 points per square meter: neighbourhoods about 0.2 m across
    n = 200
    pts = np.c_[rng.uniform(-0.5, 0.5, size=(n, 2)), rng.normal(0, 0.01, n)] + [0, 0, -2]
    out = estimate_normals(scan_of(pts), k=30)
    # interior: a full neighbourhood away from the border
    interior = np.all(np.abs(pts[:, :2]) < 0.25, axis=1)
    ang = np.degrees(np.arccos(np.clip(np.abs(out.normals[interior, 2]), 0, 1)))
    assert ang.max() < 5.0

    # independent oracle: brute-force neighbours and an SVD plane fit
    for i in np.flatnonzero(interior):
        nbr = np.argsort(np.linalg.norm(pts - pts[i], axis=1), kind="stable")[:30]
        x = pts[nbr] - pts[nbr].mean(axis=0)
        ref = np.linalg.svd(x)[2][-1]
        assert abs(abs(ref @ out.normals[i]) - 1.0) < 1e-9


def test_collinear_points_invalid():
    pts = np.c_[np.linspace(0, 1, 10), np.zeros(10), np.zeros(10)] + [1, 1, 1]
    out = estimate_normals(scan_of(pts), k=30)
    assert not out.valid_normals.any()


def test_curvature_filter_rejects_edges():
    g = np.linspace(-1, 1, 21)
    floor = np.array([(x, y, 0.0) for x in g for y in g])
    wall = np.array([(1.0, y, z) for y in g for z in np.linspace(0.05, 1, 20)])
    pts = np.vstack([floor, wall]) + [0, 0, -1]
    plain = pca_normals(pts, 30)
    filt = pca_normals(pts, 30, max_curvature=1e-3)
    assert (~np.isnan(filt).any(axis=1)).sum() < (~np.isnan(plain).any(axis=1)).sum()
    ok = ~np.isnan(filt).any(axis=1)
    # every surviving normal is one of the two face normals
    assert np.all(np.max(np.abs(filt[ok]), axis=1) > 1 - 1e-6)


def test_viewpoint_orientation(rng):
    pts = np.c_[rng.uniform(-1, 1, size=(200, 2)), np.zeros(200)]
    up = pca_normals(pts, 20, viewpoints=np.tile([0, 0, 5.0], (200, 1)))
    down = pca_normals(pts, 20, viewpoints=np.tile([0, 0, -5.0], (200, 1)))
    np.testing.assert_allclose(up[:, 2], 1.0, atol=1e-9)
    np.testing.assert_allclose(down[:, 2], -1.0, atol=1e-9)


def test_preprocess_computes_normals_before_subsampling(rng):
    xy = rng.uniform(-2, 2, size=(3000, 2))
    s = scan_of(np.c_[xy, np.full(3000, -1.0)])
    out = preprocess_scan(s, subsample_cell=0.3, normal_k=30)
    assert len(out) < len(s)
    assert out.valid_normals.all()


# -- Scan validation ----------------------------------------------------------------


def test_scan_validation():
    with pytest.raises(ValueError, match="timing"):
        Scan(0, np.zeros((1, 3)), [0.0], 0.0, 0.0)
    with pytest.raises(ValueError, match="outside"):
        Scan(0, np.zeros((1, 3)), [0.2], 0.0, 0.1)
    with pytest.raises(ValueError, match="unit"):
        Scan(0, np.zeros((1, 3)), [0.0], 0.0, 0.1, [[0.0, 0.0, 2.0]])
    s = Scan(0, np.zeros((2, 3)), [0.0, 0.1], 0.0, 0.1, [[0.0, 0.0, 1.0], [np.nan] * 3])
    np.testing.assert_array_equal(s.valid_normals, [True, False])
