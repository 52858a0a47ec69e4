import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deskrecon.coverage import (
    CoverageField,
    FrustumCache,
    HashFeature,
    VoxelGrid,
    build_grid,
    dilate,
    depth_range,
    dump_field,
    frustum_voxels,
    hamming_distance,
    hash_encode,
    load_field,
    mark_observed,
    rank_candidates,
    retained_count,
    spatial_hash,
)
from deskrecon.errors import EmptyScene, SizeMismatch
from deskrecon.geom import CameraView, Intrinsics, Pose, project

from conftest import orbit_view


def _unit_field(res=32, radius=0):
    grid = VoxelGrid(np.zeros(3), np.ones(3), res)
    return CoverageField.empty(grid, radius)


def _brute_dilate(mask, r):
    out = np.zeros_like(mask)
    X, Y, Z = mask.shape
    for i, j, k in zip(*np.nonzero(mask)):
        for di, dj, dk in itertools.product(range(-r, r + 1), repeat=3):
            a, b, c = i + di, j + dj, k + dk
            if 0 <= a < X and 0 <= b < Y and 0 <= c < Z:
                out[a, b, c] = True
    return out


def _feature(bits):
    bits = np.asarray(bits, dtype=bool)
    return HashFeature(bits, len(bits))


class TestBuildGrid:
    def test_single_point(self):
        f = build_grid([[0.3, 0.4, 0.5]], resolution=8, min_points=1)
        assert f.n_raw() == 1
        ijk, _ = f.grid.voxel_coords([[0.3, 0.4, 0.5]])
        assert f.raw_occupied[tuple(ijk[0])]

    def test_min_points_threshold(self):
        pts = np.array([[0.0, 0.0, 0.0], [0.05, 0.05, 0.05], [1.0, 1.0, 1.0]])
        f = build_grid(pts, resolution=4, min_points=2)
        assert f.raw_occupied[0, 0, 0]
        assert not f.raw_occupied[3, 3, 3]  # holds one point only
        assert f.n_raw() == 1

    def test_matches_direct_binning(self, rng):
        pts = rng.uniform(-2, 3, size=(1000, 3))
        for m in (1, 2, 3):
            f = build_grid(pts, resolution=16, min_points=m)
            lo, hi = pts.min(0), pts.max(0)
            counts = np.zeros((16, 16, 16), dtype=int)
            for p in pts:
                idx = [min(int(np.floor((p[d] - lo[d]) / ((hi[d] - lo[d]) / 16))), 15) for d in range(3)]
                counts[tuple(idx)] += 1
            np.testing.assert_array_equal(f.raw_occupied, counts >= m)

    def test_empty_raises(self):
        with pytest.raises(EmptyScene):
            build_grid(np.zeros((0, 3)))

    def test_flat_axis_padded(self):
        f = build_grid([[0, 0, 0], [1, 1, 0]], resolution=4)
        assert f.grid.aabb_max[2] - f.grid.aabb_min[2] == pytest.approx(1.0)


class TestMarkObserved:
    def test_empty_set_unchanged(self):
        f = _unit_field(8)
        assert mark_observed(f, np.zeros((0, 3))) is f

    def test_boundary_goes_to_lower_voxel(self):
        f = mark_observed(_unit_field(4), [[0.25, 0.1, 0.1]])
        # 0.25 is the face between voxel 0 and voxel 1 along x: floor puts it in voxel 1
        ijk = np.argwhere(f.raw_occupied)
        assert ijk.tolist() == [[1, 0, 0]]

    def test_upper_face_belongs_to_last_voxel(self):
        f = mark_observed(_unit_field(4), [[1.0, 1.0, 1.0]])
        assert np.argwhere(f.raw_occupied).tolist() == [[3, 3, 3]]

    def test_outside_points_counted(self):
        f = mark_observed(_unit_field(4), [[2.0, 0.5, 0.5], [0.5, 0.5, 0.5]])
        assert f.n_raw() == 1 and f.outside_count == 1

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.lists(st.floats(-0.2, 1.2), min_size=3, max_size=3), max_size=30), st.integers(0, 2))
    def test_monotone(self, pts, r):
        f = _unit_field(8, r)
        before_raw, before_dil = f.n_raw(), f.n_dilated()
        g = mark_observed(f, np.array(pts, dtype=float).reshape(-1, 3))
        assert g.n_raw() >= before_raw and g.n_dilated() >= before_dil
        assert np.all(g.raw_occupied >= f.raw_occupied)

    def test_union_cardinality(self, rng):
        f = _unit_field(16)
        a, b = rng.uniform(0, 1, (200, 3)), rng.uniform(0, 1, (200, 3))
        fa = mark_observed(f, a)
        fab = mark_observed(fa, b)
        fb = mark_observed(f, b)
        assert fab.n_raw() == int((fa.raw_occupied | fb.raw_occupied).sum())


class TestDilate:
    def test_zero_radius_identity(self, rng):
        f = _unit_field(8)
        f = mark_observed(f, rng.uniform(0, 1, (20, 3)))
        np.testing.assert_array_equal(dilate(f, 0).dilated_occupied, f.raw_occupied)

    def test_single_voxel_radius_two(self):
        f = mark_observed(_unit_field(16), [[0.5, 0.5, 0.5]])
        assert dilate(f, 2).n_dilated() == 125

    def test_clipped_at_border(self):
        f = mark_observed(_unit_field(16), [[0.0, 0.0, 0.0]])
        assert dilate(f, 2).n_dilated() == 27

    @pytest.mark.parametrize("r", [1, 2])
    def test_matches_triple_loop(self, rng, r):
        raw = rng.random((32, 32, 32)) < 0.01
        f = CoverageField(VoxelGrid(np.zeros(3), np.ones(3), 32), raw, raw.copy())
        np.testing.assert_array_equal(dilate(f, r).dilated_occupied, _brute_dilate(raw, r))

    def test_nested_in_radius(self, rng):
        raw = rng.random((16, 16, 16)) < 0.02
        f = CoverageField(VoxelGrid(np.zeros(3), np.ones(3), 16), raw, raw.copy())
        prev = raw
        for r in range(4):
            cur = dilate(f, r).dilated_occupied
            assert np.all(cur >= prev)
            prev = cur

    def test_negative_radius(self):
        with pytest.raises(ValueError):
            dilate(_unit_field(4), -1)


class TestFrustum:
    def test_far_plane_before_every_centre(self):
        f = _unit_field(8)
        v = CameraView(0, Intrinsics.from_fov(32, 32, 60.0), Pose.look_at([0.5, 0.5, -3.0], [0.5, 0.5, 0.5], up=(0, 1, 0)))
        assert not frustum_voxels(f, v, 0.1, 1.0).any()

    def test_principal_axis_centre_included(self):
        f = _unit_field(8)
        c = f.grid.centers()[np.ravel_multi_index((4, 4, 4), (8, 8, 8))]
        v = CameraView(0, Intrinsics.from_fov(32, 32, 60.0), Pose.look_at(c - [0, 0, 2.0], c, up=(0, 1, 0)))
        m = frustum_voxels(f, v, 1.5, 2.5)
        assert m[4, 4, 4]

    def test_matches_per_voxel_projection(self, rng):
        pts = rng.uniform(-1, 1, (500, 3))
        f = build_grid(pts, resolution=32)
        centres = f.grid.centers()
        for k in range(3):
            v = orbit_view(k, 120.0 * k + 10, radius=2.5, size=32)
            near, far = depth_range(v, pts)
            got = frustum_voxels(f, v, near, far).ravel()
            want = np.zeros(len(centres), dtype=bool)
            for i, c in enumerate(centres):
                z = v.pose.transform(c)[2]
                want[i] = project(v, c) is not None and near <= z <= far
            np.testing.assert_array_equal(got, want)

    def test_invalid_planes(self):
        with pytest.raises(ValueError):
            frustum_voxels(_unit_field(4), orbit_view(0, 0.0), 2.0, 1.0)


class TestHashing:
    def test_empty_set_all_zero(self):
        g = VoxelGrid(np.zeros(3), np.ones(3), 8)
        assert hash_encode(np.zeros((8, 8, 8), bool), g, 64).popcount() == 0

    def test_no_collision_popcount(self, rng):
        g = VoxelGrid(np.zeros(3), np.ones(3), 16)
        vox = rng.random((16, 16, 16)) < 0.1
        assert hash_encode(vox, g, None).popcount() == int(vox.sum())

    def test_hash_in_range_and_deterministic(self, rng):
        ijk = rng.integers(0, 64, (1000, 3))
        for H in (1, 7, 2**11):
            h = spatial_hash(ijk, H)
            assert h.min() >= 0 and h.max() < H
            np.testing.assert_array_equal(h, spatial_hash(ijk, H))

    def test_hash_formula(self):
        ijk = np.array([[3, 5, 7]])
        want = (3 * 1 ^ (5 * 2654435761) & 0xFFFFFFFF ^ (7 * 805459861) & 0xFFFFFFFF) % 1000
        assert spatial_hash(ijk, 1000)[0] == want

    def test_distance_examples(self):
        a = _feature([0, 1, 1, 0])
        assert hamming_distance(a, a) == 0
        assert hamming_distance(a, _feature([1, 0, 0, 1])) == 1
        assert hamming_distance(a, _feature([0, 1, 0, 1])) == 0.5

    def test_size_mismatch(self):
        with pytest.raises(SizeMismatch):
            hamming_distance(_feature([0, 1]), _feature([0, 1, 1]))

    def test_metric_axioms_random_triples(self, rng):
        for _ in range(10_000):
            a, b, c = (_feature(rng.random(16) < 0.5) for _ in range(3))
            dab, dba = hamming_distance(a, b), hamming_distance(b, a)
            assert dab >= 0 and dab == dba
            assert (dab == 0) == np.array_equal(a.bits, b.bits)
            assert hamming_distance(a, c) <= dab + hamming_distance(b, c) + 1e-15


def _candidate_ring(n=30, size=32):
    return [orbit_view(i, 360.0 * i / n, radius=2.5 + 0.3 * np.sin(i), height=0.3 + 0.5 * (i % 3), size=size) for i in range(n)]


class TestRankCandidates:
    def test_single_candidate_always_retained(self):
        f = build_grid(np.random.default_rng(0).uniform(-1, 1, (300, 3)), 16)
        for N in (1, 50, 100):
            assert rank_candidates(f, [orbit_view(7, 0.0)], N, None).retained == [7]

    def test_xor_counting(self):
        f = _unit_field(8)
        obs = np.zeros((8, 8, 8), bool)
        obs[:2] = True
        f = CoverageField(f.grid, obs, obs.copy())
        full = CameraView(0, Intrinsics.from_fov(8, 8, 60.0), Pose.identity())
        none = CameraView(1, Intrinsics.from_fov(8, 8, 60.0), Pose.identity())
        other = np.zeros_like(obs)
        other[5:, :2] = True

        class Fixed(FrustumCache):
            def get(self, fld, view, near_far=None):
                return obs if view.id == 0 else other

        r = rank_candidates(f, [full, none], 50, None, near_far=(0.1, 1.0), cache=Fixed())
        assert r.entries[0][0] == 1 and r.entries[1] == (0, 0.0)
        assert r.retained == [1]

    def test_equals_direct_symmetric_difference(self, rng):
        pts = rng.uniform(-1, 1, (500, 3))
        f = dilate(mark_observed(build_grid(pts, 32).cleared(), pts[:150] * 0.5), 2)
        cams = _candidate_ring()
        r = rank_candidates(f, cams, 20, None)
        direct = []
        for v in cams:
            fr = frustum_voxels(f, v, *depth_range(v, pts))
            direct.append((v.id, np.count_nonzero(f.dilated_occupied ^ fr) / f.grid.K))
        direct.sort(key=lambda e: (-e[1], e[0]))
        assert r.entries == direct
        assert len(r.retained) == 6 and r.retained == [e[0] for e in direct[:6]]

    def test_scale_invariance(self, rng):
        pts = rng.uniform(-1, 1, (500, 3))
        f = dilate(mark_observed(build_grid(pts, 16).cleared(), pts[:100]), 1)
        cams = _candidate_ring(size=24)
        base = rank_candidates(f, cams, 30, None)
        s = 3.7
        g = dilate(mark_observed(build_grid(pts * s, 16).cleared(), pts[:100] * s), 1)
        scaled = [v.with_pose(Pose(v.pose.rotation, v.pose.translation * s)) for v in cams]
        other = rank_candidates(g, scaled, 30, None)
        assert [e[0] for e in other.entries] == [e[0] for e in base.entries]

    def test_hashed_converges_to_exact(self, rng):
        pts = rng.uniform(-1, 1, (500, 3))
        f = dilate(mark_observed(build_grid(pts, 16).cleared(), pts[:120]), 1)
        cams = _candidate_ring(size=24)
        exact = set(rank_candidates(f, cams, 20, None).retained)
        big = set(rank_candidates(f, cams, 20, 2**24).retained)
        small = set(rank_candidates(f, cams, 20, 2**6).retained)
        assert big == exact
        assert len(small & exact) <= len(big & exact)

    def test_prior_restricts_both_sets(self, rng):
        pts = rng.uniform(-1, 1, (400, 3))
        f = dilate(mark_observed(build_grid(pts, 16).cleared(), pts[:80]), 1)
        prior = dilate(build_grid(pts, 16), 1).dilated_occupied
        cams = _candidate_ring(10, size=24)
        r = rank_candidates(f, cams, 50, None, prior=prior)
        for vid, d in r.entries:
            v = cams[vid]
            fr = frustum_voxels(f, v, *depth_range(v, pts)) & prior
            assert d == np.count_nonzero((f.dilated_occupied & prior) ^ fr) / f.grid.K

    def test_retained_count(self):
        assert retained_count(40, 20) == 8
        assert retained_count(30, 20) == 6
        assert retained_count(3, 1) == 1
        assert retained_count(7, 100) == 7

    def test_rejects_bad_inputs(self):
        f = _unit_field(4)
        with pytest.raises(ValueError):
            rank_candidates(f, [], 20)
        with pytest.raises(ValueError):
            rank_candidates(f, [orbit_view(0, 0.0)], 0, near_far=(0.1, 1.0))


class TestDump:
    def test_round_trip(self, rng):
        pts = rng.uniform(-1, 1, (300, 3))
        f = dilate(build_grid(pts, 12, 1), 1)
        g = load_field(dump_field(f))
        np.testing.assert_array_equal(g.raw_occupied, f.raw_occupied)
        np.testing.assert_array_equal(g.dilated_occupied, f.dilated_occupied)
        np.testing.assert_array_equal(g.grid.aabb_min, f.grid.aabb_min)
        assert g.dilation_radius == 1
