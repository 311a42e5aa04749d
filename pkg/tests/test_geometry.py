import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from objvid3d.geometry import (
    Box3D,
    CameraTrack,
    Ellipsoid,
    ObjectPose,
    Ray,
    box_iou,
    circumscribing_ellipsoid,
    cuboid_corners,
    pose_to_transform,
    project,
    projected_ellipsoid_bounds,
    ray_ellipsoid_intersect,
    ray_for_pixel,
    rot_y,
)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def random_extrinsic(rng):
    E = np.eye(4)
    E[:3, :3] = random_rotation(rng)
    E[:3, 3] = rng.normal(size=3)
    return E


@pytest.fixture
def cam():
    return CameraTrack((10.0, 10.0, 16.0, 16.0), np.eye(4)[None], 32, 32)


class TestPose:
    def test_identity(self):
        np.testing.assert_array_equal(pose_to_transform(ObjectPose([0, 0, 0], 0.0)), np.eye(4))

    def test_translation(self):
        T = pose_to_transform(ObjectPose([1, 0, 2], 0.0))
        np.testing.assert_array_equal(T[:3, :3], np.eye(3))
        np.testing.assert_array_equal(T[:3, 3], [1, 0, 2])

    def test_quarter_turn_maps_x_to_minus_z(self):
        T = pose_to_transform(ObjectPose([0, 0, 0], np.pi / 2))
        np.testing.assert_allclose(T @ [1, 0, 0, 1], [0, 0, -1, 1], atol=1e-12)


class TestCamera:
    def test_rejects_non_orthonormal(self):
        E = np.eye(4)
        E[0, 0] = 2.0
        with pytest.raises(ValueError):
            CameraTrack((1, 1, 0, 0), E[None], 4, 4)

    def test_flatten_length(self, rng):
        track = CameraTrack((1, 1, 0, 0), np.stack([np.eye(4), random_extrinsic(rng)]), 4, 4)
        assert track.flatten().shape == (24,)

    def test_rebased_starts_at_identity(self, rng):
        track = CameraTrack((1, 1, 0, 0), np.stack([random_extrinsic(rng) for _ in range(4)]), 4, 4)
        sub = track.rebased(1, 3)
        assert sub.is_ego_centric()
        # a world point keeps its camera-space coordinates after rebasing
        p = np.append(rng.normal(size=3), 1)
        p_new = track.extrinsics[1] @ p  # the point in the new world frame
        for k in range(3):
            np.testing.assert_allclose(sub.extrinsics[k] @ p_new, track.extrinsics[1 + k] @ p, atol=1e-9)

    def test_json_round_trip(self, rng):
        track = CameraTrack((3, 4, 5, 6), np.stack([np.eye(4), random_extrinsic(rng)]), 8, 6)
        back = CameraTrack.from_json(track.to_json())
        np.testing.assert_array_equal(back.extrinsics, track.extrinsics)
        assert back.intrinsics == track.intrinsics


class TestProject:
    def test_on_axis(self, cam):
        uv, z, clipped = project(np.array([0.0, 0.0, 2.0]), cam, 0)
        np.testing.assert_allclose(uv, [16, 16])
        assert z == 2 and not clipped

    def test_offset(self, cam):
        uv, _, _ = project(np.array([1.0, 0.0, 2.0]), cam, 0)
        np.testing.assert_allclose(uv, [21, 16])

    def test_behind_is_clipped(self, cam):
        assert project(np.array([0.0, 0.0, -1.0]), cam, 0)[2]


class TestRays:
    def test_centre_pixel_looks_forward(self, cam):
        r = ray_for_pixel(np.array([16.0, 16.0]), cam, 0)
        np.testing.assert_allclose(r.direction, [0, 0, 1])
        np.testing.assert_allclose(r.origin, 0)

    def test_round_trip_depth_three(self, cam):
        px = np.array([3.25, 27.5])
        r = ray_for_pixel(px, cam, 0)
        uv, z, _ = project(r.origin + 3 * r.direction, cam, 0)
        np.testing.assert_allclose(uv, px, atol=1e-9)
        assert z == pytest.approx(3 * r.direction[2])

    def test_round_trip_random_cameras(self, rng):
        for _ in range(10):
            cam = CameraTrack((rng.uniform(5, 50),) * 2 + (16.0, 12.0), random_extrinsic(rng)[None], 32, 24)
            px = rng.uniform([0, 0], [32, 24], size=(100, 2))
            r = ray_for_pixel(px, cam, 0)
            uv, _, clipped = project(r.at(rng.uniform(0.5, 10, size=100)), cam, 0)
            assert not clipped.any()
            assert np.abs(uv - px).max() < 1e-4

    def test_rotated_camera_matches_inverse(self, rng):
        E = random_extrinsic(rng)
        cam = CameraTrack((10, 10, 16, 16), E[None], 32, 32)
        px = np.array([7.5, 20.5])
        r = ray_for_pixel(px, cam, 0)
        # oracle: back-project through the inverse of the full camera matrix
        K = np.array([[10, 0, 16], [0, 10, 16], [0, 0, 1.0]])
        Einv = np.linalg.inv(E)
        near = Einv @ np.append(np.linalg.solve(K, [px[0], px[1], 1.0]), 1)
        origin = Einv @ [0, 0, 0, 1]
        d = near[:3] - origin[:3]
        np.testing.assert_allclose(r.origin, origin[:3], atol=1e-12)
        np.testing.assert_allclose(r.direction, d / np.linalg.norm(d), atol=1e-12)

    def test_direction_is_normalised(self):
        assert np.linalg.norm(Ray([0, 0, 0], [3, 4, 0]).direction) == pytest.approx(1.0)


class TestIntersect:
    def test_unit_sphere(self):
        i1, i2 = ray_ellipsoid_intersect(Ray([0, 0, -2], [0, 0, 1]), Ellipsoid([0, 0, 0], [1, 1, 1]))
        np.testing.assert_allclose(i1, [0, 0, -1])
        np.testing.assert_allclose(i2, [0, 0, 1])

    def test_miss(self):
        assert ray_ellipsoid_intersect(Ray([0, 2, -2], [0, 0, 1]), Ellipsoid([0, 0, 0], [1, 1, 1])) is None

    def test_stretched(self):
        i1, i2 = ray_ellipsoid_intersect(Ray([-3, 0, 0], [1, 0, 0]), Ellipsoid([0, 0, 0], [2, 1, 1]))
        np.testing.assert_allclose(i1, [-2, 0, 0])
        np.testing.assert_allclose(i2, [2, 0, 0])

    def test_rejects_bad_radii(self):
        with pytest.raises(ValueError):
            Ellipsoid([0, 0, 0], [1, 0, 1])

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_points_on_surface_and_direction_flip(self, seed):
        rng = np.random.default_rng(seed)
        e = Ellipsoid(rng.normal(size=3), rng.uniform(0.2, 3, size=3), rng.uniform(-np.pi, np.pi))
        target = e.center + rot_y(e.azimuth) @ (rng.uniform(-0.5, 0.5, size=3) * e.radii)
        origin = e.center + rng.normal(size=3) * 6
        ray = Ray(origin, target - origin)
        hit = ray_ellipsoid_intersect(ray, e)
        assert hit is not None
        i1, i2 = hit
        assert np.abs(e.implicit(np.stack([i1, i2]))).max() < 1e-6
        assert np.linalg.norm(i1 - origin) <= np.linalg.norm(i2 - origin) + 1e-12
        j1, j2 = ray_ellipsoid_intersect(Ray(origin, -ray.direction), e)
        np.testing.assert_allclose(j1, i2, atol=1e-9)
        np.testing.assert_allclose(j2, i1, atol=1e-9)

    def test_vectorised_matches_scalar(self, rng):
        e = Ellipsoid([0, 0, 5], [1, 2, 1.5], 0.4)
        d = rng.normal(size=(50, 3)) * 0.2 + [0, 0, 1]
        rays = Ray(np.zeros((50, 3)), d)
        i1, i2, hit = ray_ellipsoid_intersect(rays, e)
        for k in range(50):
            single = ray_ellipsoid_intersect(Ray(np.zeros(3), d[k]), e)
            assert (single is not None) == hit[k]
            if single is not None:
                np.testing.assert_allclose(single[0], i1[k])


class TestCircumscribing:
    def test_unit_cube(self):
        e = circumscribing_ellipsoid([0.5, 0.5, 0.5], ObjectPose([0, 0, 0]))
        np.testing.assert_allclose(e.radii, np.sqrt(3) / 2)
        assert e.implicit(np.array([0.5, 0.5, 0.5])) == pytest.approx(0, abs=1e-12)

    def test_corners_on_surface_posed(self, rng):
        h = np.array([1.0, 2.0, 3.0])
        pose = ObjectPose(rng.normal(size=3), 0.7)
        e = circumscribing_ellipsoid(h, pose)
        np.testing.assert_allclose(e.radii, np.sqrt(3) * h)
        np.testing.assert_allclose(e.implicit(cuboid_corners(h, pose)), 0, atol=1e-12)
        np.testing.assert_allclose(e.center, pose.location)

    def test_lattice_contained(self, rng):
        h = rng.uniform(0.1, 2, size=3)
        pose = ObjectPose(rng.normal(size=3), rng.uniform(-3, 3))
        e = circumscribing_ellipsoid(h, pose)
        g = np.linspace(-1, 1, 10)
        local = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3) * h
        world = local @ rot_y(pose.azimuth).T + pose.location
        assert (e.implicit(world) <= 1e-12).all()


class TestSilhouetteBounds:
    def test_matches_dense_surface_sampling(self, rng):
        cam = CameraTrack((12, 12, 16, 16), np.eye(4)[None], 32, 32)
        e = Ellipsoid([0.4, -0.3, 5], [0.6, 1.0, 0.8], 0.9)
        u0, u1, v0, v1 = projected_ellipsoid_bounds(e, cam, 0)
        s = rng.normal(size=(100000, 3))
        s /= np.linalg.norm(s, axis=1, keepdims=True)
        pts = (s * e.radii) @ rot_y(e.azimuth).T + e.center
        uv, _, _ = project(pts, cam, 0)
        assert uv[:, 0].min() >= u0 - 1e-9 and uv[:, 0].max() <= u1 + 1e-9
        assert uv[:, 0].min() - u0 < 1e-2 and u1 - uv[:, 0].max() < 1e-2
        assert uv[:, 1].min() - v0 < 1e-2 and v1 - uv[:, 1].max() < 1e-2

    def test_straddling_near_plane(self):
        cam = CameraTrack((12, 12, 16, 16), np.eye(4)[None], 32, 32)
        assert projected_ellipsoid_bounds(Ellipsoid([0, 0, 0.5], [1, 1, 1]), cam, 0) is None


class TestBoxIou:
    def test_identical(self):
        assert box_iou(Box3D([0, 0, 0], [1, 1, 1]), Box3D([0, 0, 0], [1, 1, 1])) == 1.0

    def test_half_overlap(self):
        assert box_iou(Box3D([0, 0, 0], [2, 1, 1]), Box3D([1, 0, 0], [3, 1, 1])) == pytest.approx(1 / 3)

    def test_disjoint(self):
        assert box_iou(Box3D([0, 0, 0], [1, 1, 1]), Box3D([2, 2, 2], [3, 3, 3])) == 0.0
