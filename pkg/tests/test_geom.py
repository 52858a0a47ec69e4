import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deskrecon.errors import BehindCamera, DegenerateGeometry
from deskrecon.geom import (
    CameraView,
    Correspondence,
    Intrinsics,
    Pose,
    SAPoint,
    filter_sa_points,
    project,
    project_many,
    quat_to_rotmat,
    random_rotation,
    reprojection_error,
    reprojection_errors,
    triangulate,
    triangulate_many,
)

from conftest import orbit_view


def _brute_project(view, X):
    """Homogeneous K[R|t]X followed by division, written out longhand."""
    K = np.array([[view.intrinsics.fx, 0, view.intrinsics.cx], [0, view.intrinsics.fy, view.intrinsics.cy], [0, 0, 1.0]])
    Rt = np.hstack([view.pose.rotation, view.pose.translation.reshape(3, 1)])
    x = K @ Rt @ np.append(X, 1.0)
    return x[:2] / x[2], x[2]


class TestIntrinsics:
    def test_rejects_nonpositive_focal(self):
        with pytest.raises(ValueError):
            Intrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)

    def test_rejects_principal_point_outside(self):
        with pytest.raises(ValueError):
            Intrinsics(1.0, 1.0, 4.0, 1.0, 4, 4)

    def test_from_fov_centre_and_focal(self):
        k = Intrinsics.from_fov(100, 80, 90.0)
        assert k.fx == pytest.approx(50.0)
        assert (k.cx, k.cy) == (50.0, 40.0)
        assert isinstance(k.fx, float)


class TestPose:
    def test_rejects_reflection(self):
        with pytest.raises(ValueError):
            Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_look_at_puts_target_on_axis(self):
        p = Pose.look_at([3.0, 1.0, 2.0], [0.0, 0.0, 0.0])
        c = p.transform(np.zeros(3))
        assert c[0] == pytest.approx(0.0, abs=1e-12) and c[1] == pytest.approx(0.0, abs=1e-12)
        assert c[2] == pytest.approx(np.sqrt(14.0))
        np.testing.assert_allclose(p.center, [3.0, 1.0, 2.0], atol=1e-12)

    def test_inverse_composes_to_identity(self, rng):
        p = Pose(random_rotation(rng), rng.normal(size=3))
        q = p.compose(p.inverse())
        np.testing.assert_allclose(q.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(q.translation, 0.0, atol=1e-12)

    def test_long_composition_chain_stays_orthonormal(self, rng):
        # 10^6 compositions in total: 1000 independent chains, 1000 steps each
        steps = np.stack([random_rotation(rng) for _ in range(1000)])
        acc = np.broadcast_to(np.eye(3), (1000, 3, 3)).copy()
        for k in range(1000):
            acc = acc @ np.roll(steps, k, axis=0)
        err = np.abs(np.einsum("nji,njk->nik", acc, acc) - np.eye(3)).max()
        assert err < 1e-9
        assert np.abs(np.linalg.det(acc) - 1.0).max() < 1e-9

    def test_compose_chain_through_pose_type(self, rng):
        p = Pose.identity()
        step = Pose(random_rotation(rng), rng.normal(size=3) * 0.1)
        for _ in range(20000):
            p = p.compose(step)  # raises if orthonormality drifts past tolerance
        R = p.rotation
        assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9


class TestProject:
    def test_principal_point(self):
        v = CameraView(0, Intrinsics(100.0, 100.0, 50.0, 50.0, 100, 100), Pose.identity())
        np.testing.assert_allclose(project(v, [0.0, 0.0, 1.0]), [50.0, 50.0])

    @pytest.mark.parametrize("z", [0.0, -1.0])
    def test_behind_camera_is_absent(self, z):
        v = CameraView(0, Intrinsics(100.0, 100.0, 50.0, 50.0, 100, 100), Pose.identity())
        assert project(v, [0.0, 0.0, z]) is None

    def test_out_of_frame_is_absent(self):
        v = CameraView(0, Intrinsics(100.0, 100.0, 50.0, 50.0, 100, 100), Pose.identity())
        assert project(v, [10.0, 0.0, 1.0]) is None

    def test_non_finite_rejected(self):
        v = CameraView(0, Intrinsics(100.0, 100.0, 50.0, 50.0, 100, 100), Pose.identity())
        with pytest.raises(ValueError):
            project(v, [np.nan, 0.0, 1.0])

    def test_matches_homogeneous_product(self, rng):
        intr = Intrinsics(120.0, 110.0, 63.2, 47.9, 128, 96)
        hits = 0
        for _ in range(500):
            v = CameraView(0, intr, Pose(random_rotation(rng), rng.normal(size=3)))
            X = rng.normal(size=3) * 3
            uv, z = _brute_project(v, X)
            got = project(v, X)
            inside = z > 0 and 0 <= uv[0] < 128 and 0 <= uv[1] < 96
            if inside:
                hits += 1
                np.testing.assert_allclose(got, uv, rtol=1e-12, atol=1e-9)
            else:
                assert got is None
        assert hits > 20


class TestTriangulate:
    def test_recovers_known_point(self, view_pair):
        a, b = view_pair
        X = np.array([0.1, -0.2, 0.15])
        X_hat = triangulate(a, b, Correspondence(project(a, X), project(b, X)))
        assert np.linalg.norm(X_hat - X) < 1e-9

    def test_zero_baseline(self):
        a = orbit_view(0, 0.0)
        b = CameraView(1, a.intrinsics, Pose.look_at(a.center, [0.0, 0.5, 0.0]))
        with pytest.raises(DegenerateGeometry):
            triangulate(a, b, Correspondence([32.0, 32.0], [30.0, 32.0]))

    def test_parallel_rays(self):
        intr = Intrinsics(50.0, 50.0, 32.0, 32.0, 64, 64)
        a = CameraView(0, intr, Pose.identity())
        b = CameraView(1, intr, Pose(np.eye(3), [-1.0, 0.0, 0.0]))
        # same pixel in both views of a pure sideways translation: rays are parallel
        with pytest.raises(DegenerateGeometry):
            triangulate(a, b, Correspondence([32.0, 32.0], [32.0, 32.0]))

    def test_hundred_random_points(self, view_pair, rng):
        a, b = view_pair
        X = rng.uniform(-0.5, 0.5, size=(100, 3))
        ua, _, va = project_many(a, X)
        ub, _, vb = project_many(b, X)
        assert va.all() and vb.all()
        pts, ok = triangulate_many(a, b, ua, ub)
        assert ok.all()
        assert np.linalg.norm(pts - X, axis=1).max() < 1e-7

    @settings(max_examples=60, deadline=None)
    @given(st.floats(-0.8, 0.8), st.floats(-0.8, 0.8), st.floats(-0.8, 0.8), st.floats(20.0, 160.0))
    def test_round_trip_property(self, x, y, z, sep):
        a, b = orbit_view(0, 0.0), orbit_view(1, sep)
        X = np.array([x, y, z])
        pa, pb = project(a, X), project(b, X)
        if pa is None or pb is None:
            return
        assert np.linalg.norm(triangulate(a, b, Correspondence(pa, pb)) - X) < 1e-7


class TestReprojectionError:
    def test_zero_for_consistent_data(self, view_pair):
        a, b = view_pair
        X = np.array([0.05, 0.1, -0.1])
        c = Correspondence(project(a, X), project(b, X))
        assert reprojection_error(a, b, c, triangulate(a, b, c)) < 1e-9

    def test_two_pixel_shift_in_one_image(self, view_pair):
        a, b = view_pair
        X = np.array([0.05, 0.1, -0.1])
        c = Correspondence(project(a, X) + [2.0, 0.0], project(b, X))
        assert reprojection_error(a, b, c, X) == pytest.approx(1.0, abs=1e-12)

    def test_matches_direct_formula(self, view_pair, rng):
        a, b = view_pair
        for _ in range(50):
            X = rng.uniform(-0.5, 0.5, 3)
            pa = project(a, X) + rng.normal(size=2)
            pb = project(b, X) + rng.normal(size=2)
            X_hat = triangulate(a, b, Correspondence(pa, pb))
            want = 0.5 * (np.hypot(*(pa - project(a, X_hat))) + np.hypot(*(pb - project(b, X_hat))))
            assert reprojection_error(a, b, Correspondence(pa, pb), X_hat) == pytest.approx(want, rel=1e-12)

    def test_symmetric_under_swap(self, view_pair, rng):
        a, b = view_pair
        X = rng.uniform(-0.5, 0.5, 3)
        c = Correspondence(project(a, X) + [0.7, -0.3], project(b, X) + [-1.1, 0.4])
        assert reprojection_error(a, b, c, X) == reprojection_error(b, a, c.swapped(), X)

    def test_behind_camera_raises(self, view_pair):
        a, b = view_pair
        with pytest.raises(BehindCamera):
            reprojection_error(a, b, Correspondence([1.0, 1.0], [1.0, 1.0]), a.center * 2)

    def test_vectorised_agrees(self, view_pair, rng):
        a, b = view_pair
        X = rng.uniform(-0.5, 0.5, size=(30, 3))
        ua = project_many(a, X)[0] + rng.normal(size=(30, 2))
        ub = project_many(b, X)[0] + rng.normal(size=(30, 2))
        err, ok = reprojection_errors(a, b, ua, ub, X)
        assert ok.all()
        for i in range(30):
            assert err[i] == pytest.approx(reprojection_error(a, b, Correspondence(ua[i], ub[i]), X[i]), rel=1e-12)


class TestFilter:
    def _pts(self, errs):
        return [SAPoint(np.zeros(3), e, 0) for e in errs]

    def test_identity_when_all_below(self):
        pts = self._pts([0.1, 0.2, 0.3])
        assert filter_sa_points(pts, 1.0) == pts

    def test_strict_boundary(self):
        kept = filter_sa_points(self._pts([0.1, 0.5, 0.9]), 0.5)
        assert [p.reproj_error for p in kept] == [0.1]

    def test_nonpositive_tau_rejected(self):
        with pytest.raises(ValueError):
            filter_sa_points([], 0.0)

    @given(st.lists(st.floats(0, 10), max_size=40), st.floats(0.01, 10))
    def test_subset_and_idempotent(self, errs, tau):
        pts = self._pts(errs)
        once = filter_sa_points(pts, tau)
        assert all(any(p is q for q in pts) for p in once)
        assert filter_sa_points(once, tau) == once

    def test_retained_fraction_grows_with_tau(self, view_pair, rng):
        a, b = view_pair
        X = rng.uniform(-0.5, 0.5, size=(2000, 3))
        ua = project_many(a, X)[0] + rng.normal(scale=1.0, size=(2000, 2))
        ub = project_many(b, X)[0] + rng.normal(scale=1.0, size=(2000, 2))
        P, ok = triangulate_many(a, b, ua, ub)
        err, front = reprojection_errors(a, b, ua, ub, P)
        pts = [SAPoint(p, e, 0) for p, e, k in zip(P, err, ok & front) if k]
        fracs = [len(filter_sa_points(pts, t)) / len(pts) for t in (0.5, 1.0, 2.0)]
        # independent count over the generated noise
        assert fracs == [np.mean([p.reproj_error < t for p in pts]) for t in (0.5, 1.0, 2.0)]
        assert fracs[0] < fracs[1] < fracs[2]


class TestQuaternion:
    def test_unit_quaternion_gives_rotation(self, rng):
        for _ in range(20):
            q = rng.normal(size=4)
            R = quat_to_rotmat(q / np.linalg.norm(q))
            np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
            assert np.linalg.det(R) == pytest.approx(1.0)
