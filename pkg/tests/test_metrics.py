import json

import numpy as np
import pytest

from artrec.dataset import generate_dataset
from artrec.geometry import Aabb
from artrec.grid import grid_init, paint_from_shape
from artrec.mesh import (
    TriMesh,
    extract_mesh,
    read_ply,
    sample_mesh_points,
    write_ply,
)
from artrec.metrics import (
    MetricsReport,
    axis_angular_error,
    axis_position_error,
    chamfer_l1,
    evaluate,
    joint_state_error,
    psnr,
    ssim,
)
from artrec.motion import Prismatic, Revolute, quat_from_axis_angle
from artrec.scenes import make_preset
from artrec.sdf import Sphere
from artrec.train import Checkpoint, TrainConfig

UNIT_BOX = Aabb(np.full(3, -1.0), np.full(3, 1.0))


def sphere_grid(radius=0.6, resolution=48):
    g = grid_init(resolution, UNIT_BOX, seed=0)
    paint_from_shape(g, Sphere(np.zeros(3), radius, np.array([0.8, 0.2, 0.2])))
    return g


class TestExtractMesh:
    def test_sphere_radius_within_two_cells(self):
        g = sphere_grid()
        mesh = extract_mesh(g)
        assert not mesh.is_empty
        radii = np.linalg.norm(mesh.vertices, axis=-1)
        cell = 2.0 / (g.resolution - 1)
        assert abs(radii - 0.6).max() < 2 * cell

    def test_threshold_above_max_gives_empty_mesh(self):
        mesh = extract_mesh(sphere_grid(), threshold=1e6)
        assert mesh.is_empty

    def test_sphere_euler_characteristic(self):
        mesh = extract_mesh(sphere_grid())
        edges = np.sort(
            np.concatenate(
                [mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]]
            ),
            axis=1,
        )
        n_edges = len(np.unique(edges, axis=0))
        n_verts = len(np.unique(mesh.faces.ravel()))
        assert n_verts - n_edges + len(mesh.faces) == 2

    def test_face_indices_validated(self):
        with pytest.raises(ValueError):
            TriMesh(np.zeros((2, 3)), np.array([[0, 1, 2]]))

    def test_sampled_points_on_surface(self):
        mesh = extract_mesh(sphere_grid())
        pts = sample_mesh_points(mesh, 2000, seed=0)
        radii = np.linalg.norm(pts, axis=-1)
        cell = 2.0 / 47
        assert abs(radii - 0.6).max() < 2 * cell
        # deterministic under the seed
        np.testing.assert_array_equal(pts, sample_mesh_points(mesh, 2000, seed=0))

    def test_ply_round_trip(self, tmp_path):
        mesh = extract_mesh(sphere_grid(resolution=16))
        write_ply(mesh, tmp_path / "m.ply")
        again = read_ply(tmp_path / "m.ply")
        np.testing.assert_allclose(again.vertices, mesh.vertices, atol=1e-6)
        np.testing.assert_array_equal(again.faces, mesh.faces)


class TestChamfer:
    def test_identical_sets_zero(self):
        pts = np.random.default_rng(0).normal(0, 1, (100, 3))
        assert chamfer_l1(pts, pts) == 0.0

    def test_single_pair_closed_form(self):
        assert chamfer_l1(np.zeros((1, 3)), np.array([[1.0, 0, 0]])) == pytest.approx(
            1000.0
        )

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            a = rng.normal(0, 1, (500, 3))
            b = rng.normal(0.5, 1, (500, 3))
            d = np.linalg.norm(a[:, None] - b[None], axis=-1)
            brute = 1000.0 * 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())
            assert chamfer_l1(a, b) == pytest.approx(brute, rel=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        a = rng.normal(0, 1, (200, 3))
        b = rng.normal(0, 1, (300, 3))
        assert chamfer_l1(a, b) == chamfer_l1(b, a)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            chamfer_l1(np.zeros((0, 3)), np.zeros((5, 3)))


Z = np.array([0.0, 0.0, 1.0])
X = np.array([1.0, 0.0, 0.0])


class TestAxisMetrics:
    def test_angular_closed_forms(self):
        assert axis_angular_error(Z, Z) == pytest.approx(0.0)
        assert axis_angular_error(Z, -Z) == pytest.approx(0.0)
        assert axis_angular_error(Z, X) == pytest.approx(90.0)
        diag = (Z + X) / np.sqrt(2)
        assert axis_angular_error(Z, diag) == pytest.approx(45.0)

    def test_angular_sign_flip_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a = rng.normal(0, 1, 3)
            b = rng.normal(0, 1, 3)
            a /= np.linalg.norm(a)
            b /= np.linalg.norm(b)
            e = axis_angular_error(a, b)
            assert axis_angular_error(-a, b) == pytest.approx(e)
            assert axis_angular_error(a, -b) == pytest.approx(e)
            assert 0.0 <= e <= 90.0

    def test_position_identical_lines(self):
        assert axis_position_error(np.zeros(3), Z, np.zeros(3), Z) == pytest.approx(0.0)

    def test_position_parallel_lines(self):
        assert axis_position_error(np.zeros(3), Z, X, Z) == pytest.approx(10.0)

    def test_position_skew_lines(self):
        # z-line through origin vs x-line through (0, 2, 5): common normal y
        off = np.array([0.0, 2.0, 5.0])
        assert axis_position_error(np.zeros(3), Z, off, X) == pytest.approx(20.0)

    def test_position_pivot_slide_gauge(self):
        rng = np.random.default_rng(4)
        p1, p2 = rng.normal(0, 1, (2, 3))
        a1 = rng.normal(0, 1, 3)
        a2 = rng.normal(0, 1, 3)
        a1 /= np.linalg.norm(a1)
        a2 /= np.linalg.norm(a2)
        base = axis_position_error(p1, a1, p2, a2)
        for lam in rng.normal(0, 5, 100):
            assert axis_position_error(p1 + lam * a1, a1, p2, a2) == pytest.approx(base)
            assert axis_position_error(p1, a1, p2 + lam * a2, a2) == pytest.approx(base)


class TestJointStateError:
    def test_identical_motions(self):
        r = Revolute(np.zeros(3), quat_from_axis_angle(Z, np.radians(30)))
        assert joint_state_error(r, r) == pytest.approx(0.0)
        p = Prismatic(X, 0.4)
        assert joint_state_error(p, p) == pytest.approx(0.0)

    def test_revolute_angle_difference(self):
        pred = Revolute(np.zeros(3), quat_from_axis_angle(Z, np.radians(40)))
        gt = Revolute(np.zeros(3), quat_from_axis_angle(Z, np.radians(30)))
        assert joint_state_error(pred, gt) == pytest.approx(10.0)

    def test_prismatic_sign_alignment(self):
        gt = Prismatic(X, 0.4)
        pred = Prismatic(-X, -0.38)  # same physical motion, flipped frame
        assert joint_state_error(pred, gt) == pytest.approx(0.02)

    def test_type_mismatch_flag(self):
        r = Revolute(np.zeros(3), quat_from_axis_angle(Z, 0.5))
        p = Prismatic(X, 0.3)
        assert joint_state_error(p, r) == "F"
        assert joint_state_error(r, p) == "F"


class TestImageMetrics:
    def test_identical_images(self):
        img = np.random.default_rng(5).uniform(0, 1, (32, 32, 3))
        assert psnr(img, img) == 100.0
        assert ssim(img, img) == pytest.approx(1.0)

    def test_psnr_formula(self):
        ref = np.zeros((10, 10, 3))
        img = ref + 0.1  # MSE = 0.01
        assert psnr(img, ref) == pytest.approx(20.0)

    def test_psnr_decreases_with_noise(self):
        rng = np.random.default_rng(6)
        ref = rng.uniform(0.3, 0.7, (24, 24, 3))
        vals = [
            psnr(np.clip(ref + rng.normal(0, amp, ref.shape), 0, 1), ref)
            for amp in (0.01, 0.03, 0.09)
        ]
        assert vals[0] > vals[1] > vals[2]

    def test_ssim_negative_worse_than_noise(self):
        rng = np.random.default_rng(7)
        ref = rng.uniform(0, 1, (32, 32, 3))
        noisy = np.clip(ref + rng.normal(0, 0.01, ref.shape), 0, 1)
        assert ssim(1.0 - ref, ref) < ssim(noisy, ref)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4, 3)), np.zeros((5, 5, 3)))
        with pytest.raises(ValueError):
            ssim(np.zeros((16, 16, 3)), np.zeros((17, 17, 3)))


def painted_gt_checkpoint(spec, resolution=48, tstar=0.5):
    box = spec.bounds()
    static = grid_init(resolution, box, seed=0)
    mobile = grid_init(resolution, box, seed=1)
    paint_from_shape(static, spec.static.shape)
    paint_from_shape(mobile, spec.movable_at(tstar))
    cfg = TrainConfig(
        motion_type="revolute", grid_resolution=resolution, tstar=tstar,
        iterations=1, rays_per_state=64,
    )
    return Checkpoint(static, mobile, spec.motion, {}, 0, cfg, [])


@pytest.fixture(scope="module")
def report():
    spec = make_preset("laptop")
    ds = generate_dataset(spec, views=2, resolution=24, seed=0, gt_points=2000)
    ckpt = painted_gt_checkpoint(spec)
    return evaluate(ckpt, ds, n_points=2000, n_views=2, seed=0)


class TestEvaluate:
    def test_gt_self_evaluation_chamfer(self, report):
        spec = make_preset("laptop")
        box = spec.bounds()
        cell = float((np.asarray(box.hi) - np.asarray(box.lo)).max()) / 47
        for cd in (report.cd_w, report.cd_s, report.cd_m):
            assert cd is not None and cd < 2 * cell * 1000

    def test_gt_self_evaluation_motion(self, report):
        assert report.motion_type_pred == "revolute"
        assert report.motion_type_gt == "revolute"
        assert report.ang_err_deg == pytest.approx(0.0, abs=1e-9)
        assert report.pos_err == pytest.approx(0.0, abs=1e-9)
        assert report.joint_state_err == pytest.approx(0.0, abs=1e-9)

    def test_image_metrics_present_and_finite(self, report):
        for t in ("0", "1"):
            assert np.isfinite(report.psnr_db[t])
            assert -1.0 <= report.ssim[t] <= 1.0

    def test_report_json_round_trip(self, report, tmp_path):
        report.save(tmp_path / "report.json")
        again = MetricsReport.load(tmp_path / "report.json")
        assert again == report
        # the file itself is valid standalone JSON
        assert json.loads((tmp_path / "report.json").read_text())["method"] == "ours"

    def test_missing_gt_partial_report(self):
        spec = make_preset("laptop")
        ds = generate_dataset(spec, views=2, resolution=24, seed=0, with_gt=False)
        ckpt = painted_gt_checkpoint(spec)
        rep = evaluate(ckpt, ds, n_points=500, n_views=2)
        assert rep.cd_w is None and rep.ang_err_deg is None
        assert np.isfinite(rep.psnr_db["0"])
