import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artrec.geometry import (
    Aabb,
    CameraModel,
    Ray,
    RigidTransform,
    camera_ray,
    clip_ray_aabb,
    clip_rays_aabb,
    look_at_camera,
    matrix_to_quat,
    quat_from_axis_angle,
    quat_mul,
    quat_normalize,
    quat_pow,
    quat_rotate,
    quat_to_axis_angle,
    quat_to_matrix,
)

Z = np.array([0.0, 0.0, 1.0])


def random_quat(rng):
    q = rng.standard_normal(4)
    return quat_normalize(q)


class TestQuaternion:
    def test_zero_angle_is_identity(self):
        q = quat_from_axis_angle(Z, 0.0)
        np.testing.assert_allclose(q, [1, 0, 0, 0])

    def test_quarter_turn_about_z(self):
        q = quat_from_axis_angle(Z, np.pi / 2)
        np.testing.assert_allclose(q, [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)])

    def test_non_unit_axis_rejected(self):
        with pytest.raises(ValueError):
            quat_from_axis_angle(np.array([0, 0, 2.0]), 0.3)

    def test_axis_angle_round_trip(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            axis = rng.standard_normal(3)
            axis /= np.linalg.norm(axis)
            angle = rng.uniform(1e-3, np.pi - 1e-3)
            a2, g2 = quat_to_axis_angle(quat_from_axis_angle(axis, angle))
            assert abs(g2 - angle) < 1e-7
            np.testing.assert_allclose(a2, axis, atol=1e-7)

    def test_rotation_round_trip(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            q = random_quat(rng)
            v = rng.standard_normal(3)
            np.testing.assert_allclose(
                quat_rotate(q, quat_rotate(np.array([q[0], -q[1], -q[2], -q[3]]), v)),
                v,
                atol=1e-9,
            )

    def test_rotation_preserves_norm(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            q = random_quat(rng)
            v = rng.standard_normal(3)
            assert abs(np.linalg.norm(quat_rotate(q, v)) - np.linalg.norm(v)) < 1e-9

    def test_matrix_round_trip(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            q = random_quat(rng)
            if q[0] < 0:
                q = -q
            np.testing.assert_allclose(matrix_to_quat(quat_to_matrix(q)), q, atol=1e-9)


class TestQuatPow:
    def test_angle_halving(self):
        q = quat_from_axis_angle(Z, np.pi / 2)
        np.testing.assert_allclose(quat_pow(q, 0.5), quat_from_axis_angle(Z, np.pi / 4))

    def test_zero_power_is_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            np.testing.assert_allclose(quat_pow(random_quat(rng), 0.0), [1, 0, 0, 0])

    def test_near_identity_returns_identity(self):
        q = quat_from_axis_angle(Z, 1e-9)
        np.testing.assert_allclose(quat_pow(q, 0.5), [1, 0, 0, 0])

    def test_half_power_composes_to_full(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            q = random_quat(rng)
            if q[0] < 0:
                q = -q  # fix the double-cover branch
            h = quat_pow(q, 0.5)
            np.testing.assert_allclose(quat_mul(h, h), q, atol=1e-7)

    @given(
        a=st.floats(0, 1),
        b=st.floats(0, 1),
        seed=st.integers(0, 2**31),
    )
    @settings(max_examples=50, deadline=None)
    def test_power_additivity(self, a, b, seed):
        rng = np.random.default_rng(seed)
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        q = quat_from_axis_angle(axis, rng.uniform(0.01, np.pi - 0.01))
        lhs = quat_mul(quat_pow(q, a), quat_pow(q, b))
        rhs = quat_pow(q, a + b)
        np.testing.assert_allclose(lhs, rhs, atol=1e-7)


class TestRigidTransform:
    def test_inverse_round_trip(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            t = RigidTransform(random_quat(rng), rng.standard_normal(3))
            x = rng.standard_normal(3)
            np.testing.assert_allclose(t.inverse().apply(t.apply(x)), x, atol=1e-7)

    def test_compose_matches_matrix_form(self):
        rng = np.random.default_rng(19)
        for _ in range(50):
            t1 = RigidTransform(random_quat(rng), rng.standard_normal(3))
            t2 = RigidTransform(random_quat(rng), rng.standard_normal(3))
            np.testing.assert_allclose(
                t1.compose(t2).as_matrix(), t1.as_matrix() @ t2.as_matrix(), atol=1e-9
            )

    def test_compose_associative(self):
        rng = np.random.default_rng(23)
        ts = [RigidTransform(random_quat(rng), rng.standard_normal(3)) for _ in range(3)]
        a = ts[0].compose(ts[1]).compose(ts[2])
        b = ts[0].compose(ts[1].compose(ts[2]))
        np.testing.assert_allclose(a.as_matrix(), b.as_matrix(), atol=1e-12)


class TestRayAabb:
    def test_axis_aligned_hit(self):
        ray = Ray(np.array([0, 0, -3.0]), Z)
        box = Aabb(np.full(3, -0.5), np.full(3, 0.5))
        near, far = clip_ray_aabb(ray, box)
        assert near == pytest.approx(2.5)
        assert far == pytest.approx(3.5)

    def test_parallel_miss(self):
        ray = Ray(np.array([2.0, 0, -3.0]), Z)
        box = Aabb(np.full(3, -0.5), np.full(3, 0.5))
        assert clip_ray_aabb(ray, box) is None

    def test_endpoints_on_box(self):
        rng = np.random.default_rng(29)
        box = Aabb(np.array([-0.7, -0.4, -0.5]), np.array([0.3, 0.6, 0.5]))
        n = 1000
        origins = rng.uniform(-3, 3, (n, 3))
        origins[:, 2] = -3.0  # keep origins outside
        dirs = rng.standard_normal((n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        near, far, hit = clip_rays_aabb(origins, dirs, box)
        for o, d, hn, hf, h in zip(origins, dirs, near, far, hit):
            if not h:
                continue
            for t in (hn, hf):
                p = o + t * d
                dist = np.maximum(box.lo - p, p - box.hi).max()
                assert abs(dist) < 1e-6

    def test_shrinking_box_never_widens(self):
        rng = np.random.default_rng(31)
        big = Aabb(np.full(3, -1.0), np.full(3, 1.0))
        small = Aabb(np.full(3, -0.6), np.full(3, 0.8))
        origins = np.tile([0.0, 0.0, -4.0], (200, 1)) + rng.normal(0, 0.2, (200, 3))
        dirs = rng.normal([0, 0, 1], 0.2, (200, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        nb, fb, hb = clip_rays_aabb(origins, dirs, big)
        ns, fs, hs = clip_rays_aabb(origins, dirs, small)
        for i in range(200):
            if hs[i]:
                assert hb[i]
                assert ns[i] >= nb[i] - 1e-12
                assert fs[i] <= fb[i] + 1e-12


class TestCamera:
    def make_cam(self) -> CameraModel:
        return look_at_camera(np.array([0, 0, -3.0]), np.zeros(3), 150.0, 150.0, 128, 128)

    def test_principal_point_is_forward(self):
        cam = self.make_cam()
        ray = camera_ray(cam, (cam.cx, cam.cy))
        np.testing.assert_allclose(ray.direction, cam.forward, atol=1e-12)
        np.testing.assert_allclose(ray.origin, cam.center)

    def test_out_of_bounds_pixel_rejected(self):
        cam = self.make_cam()
        with pytest.raises(ValueError):
            camera_ray(cam, (-1.0, 4.0))
        with pytest.raises(ValueError):
            camera_ray(cam, (4.0, 128.0))

    def test_project_unproject_round_trip(self):
        cam = look_at_camera(
            np.array([1.2, -2.0, 1.7]), np.zeros(3), 180.0, 180.0, 128, 128
        )
        rng = np.random.default_rng(37)
        for _ in range(100):
            uv = rng.uniform(0, 128, 2)
            ray = camera_ray(cam, tuple(uv))
            p = ray.at(rng.uniform(0.5, 5.0))
            np.testing.assert_allclose(cam.project(p)[0], uv, atol=1e-4)

    def test_adjacent_pixel_angle(self):
        cam = self.make_cam()
        d1 = camera_ray(cam, (cam.cx, cam.cy)).direction
        d2 = camera_ray(cam, (cam.cx + 1, cam.cy)).direction
        angle = np.arccos(np.clip(d1 @ d2, -1, 1))
        assert angle == pytest.approx(1.0 / cam.fx, rel=1e-3)

    def test_unit_directions(self):
        cam = self.make_cam()
        uv = np.random.default_rng(0).uniform(0, 128, (50, 2))
        dirs = cam.pixel_dirs(uv)
        np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-12)
