"""Acceptance gate: ten end-to-end and property criteria with pinned tolerances.

Each criterion prints exactly one [PASS]/[FAIL] line (bypassing pytest's
capture so the verdicts always appear in the run log) and then asserts.
Training criteria report their wall-clock time in the line; wall clock is not
asserted for them since it measures the machine, not the code.  The oracle
criteria (1, 2, 7) do assert their generous runtime budgets.
"""

from __future__ import annotations

import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from artrec.baseline import (
    baseline_motion,
    fit_single_state,
    hull_motion_init,
    register,
)
from artrec.cli import main as cli_main
from artrec.dataset import generate_dataset
from artrec.geometry import Aabb, RigidTransform, quat_from_axis_angle
from artrec.metrics import (
    axis_angular_error,
    axis_position_error,
    chamfer_l1,
    evaluate,
    joint_state_error,
    psnr,
    ssim,
)
from artrec.motion import FreeSE3, Prismatic, Revolute, rotation_geodesic_angle
from artrec.optim import loss_mask, loss_prob, loss_rgb, mobile_ratio_backward
from artrec.render import (
    RenderConfig,
    composite_rays,
    render_rays,
    render_rays_backward,
)
from artrec.scenes import make_preset
from artrec.grid import grid_init
from artrec.train import LossWeights, TrainConfig, prefit_motion, train


def _verdict(num: int, desc: str, checks: list) -> None:
    """checks: list of (label, value, tolerance-description, bool)."""
    ok = all(c[3] for c in checks)
    detail = "; ".join(f"{label}={value} [{tol}]" for label, value, tol, _ in checks)
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {desc} -- {detail}"
    print(line, file=sys.__stdout__, flush=True)
    assert ok, line


BOX = Aabb(np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))


def _random_grid(rng, r=4, scale=1.0):
    g = grid_init(r, BOX, seed=int(rng.integers(1 << 31)))
    g.raw_density[...] = rng.normal(0.0, 2.0 * scale, g.raw_density.shape)
    g.raw_color[...] = rng.normal(0.0, 1.0, g.raw_color.shape)
    return g


def _random_motion(rng, kind):
    if kind == "revolute":
        axis = rng.normal(0, 1, 3)
        axis /= np.linalg.norm(axis)
        return Revolute(
            rng.uniform(-0.3, 0.3, 3),
            quat_from_axis_angle(axis, rng.uniform(0.2, 1.2)),
        )
    return Prismatic(rng.normal(0, 1, 3), rng.uniform(-0.4, 0.4))


def _ray_batch(rng, n=2):
    origins = np.array([[0.0, 0.0, -3.0]]) + rng.normal(0, 0.2, (n, 3))
    target = rng.normal(0, 0.3, (n, 3))
    dirs = target - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return origins, dirs


# ---------------------------------------------------------------------------
# criterion 1: composite degeneracy
# ---------------------------------------------------------------------------


def test_criterion_1_composite_degeneracy():
    t0 = time.time()
    rng = np.random.default_rng(1001)
    n, s = 10_000, 24
    sigma = rng.uniform(0.0, 30.0, (n, s))
    rgb = rng.uniform(0.0, 1.0, (n, s, 3))
    delta = rng.uniform(1e-3, 0.2, (n, s))
    out = composite_rays(
        sigma, rgb, np.zeros((n, s)), rng.uniform(0, 1, (n, s, 3)), delta
    )
    # single-field quadrature reference: alpha compositing over white background
    alpha = 1.0 - np.exp(-sigma * delta)
    trans = np.cumprod(1.0 - alpha, axis=1)
    trans = np.concatenate([np.ones((n, 1)), trans[:, :-1]], axis=1)
    w = trans * alpha
    ref_color = (w[..., None] * rgb).sum(axis=1) + (1.0 - w.sum(axis=1))[:, None]
    ref_opacity = w.sum(axis=1)
    err_c = float(np.abs(out.color - ref_color).max())
    err_o = float(np.abs(out.opacity - ref_opacity).max())
    dt = time.time() - t0
    _verdict(1, "composite degeneracy (zero mobile field = single-field NeRF)", [
        ("max color err", f"{err_c:.2e}", "< 1e-12", err_c < 1e-12),
        ("max opacity err", f"{err_o:.2e}", "< 1e-12", err_o < 1e-12),
        ("rays", n, "= 1e4", True),
        ("runtime", f"{dt:.1f}s", "< 60s", dt < 60),
    ])


# ---------------------------------------------------------------------------
# criterion 2: gradient suite
# ---------------------------------------------------------------------------


def test_criterion_2_gradient_suite():
    t0 = time.time()
    cfg = RenderConfig(n_coarse=16, n_fine=0, jitter=False)
    rel_tol = 1e-3

    def render_loss(gs, gm, motion, t, origins, dirs, a_c, a_os, a_om):
        out, _ = render_rays(gs, gm, motion, t, origins, dirs, BOX, cfg)
        return float(
            (a_c * out.color).sum()
            + (a_os * out.opacity_static).sum()
            + (a_om * out.opacity_mobile).sum()
        )

    # (a) grid parameters through a full two-field render
    rng = np.random.default_rng(1002)
    worst_grid = 0.0
    for trial in range(50):
        gs, gm = _random_grid(rng), _random_grid(rng)
        motion = _random_motion(rng, ["revolute", "prismatic"][trial % 2])
        t = float(trial % 2)
        origins, dirs = _ray_batch(rng)
        a_c = rng.normal(0, 1, (2, 3))
        a_os, a_om = rng.normal(0, 1, 2), rng.normal(0, 1, 2)
        _, ctx = render_rays(gs, gm, motion, t, origins, dirs, BOX, cfg)
        grad_s, grad_m, _ = render_rays_backward(
            gs, gm, ctx, a_c, a_os, a_om, want_motion=False
        )
        step = 1e-5
        for grid, grad in ((gs, grad_s), (gm, grad_m)):
            for arr, garr in (
                (grid.raw_density, grad.density),
                (grid.raw_color, grad.color),
            ):
                idx = np.argwhere(garr != 0)
                if not len(idx):
                    continue
                i = tuple(idx[rng.integers(len(idx))])
                orig = arr[i]
                arr[i] = orig + step
                hi = render_loss(gs, gm, motion, t, origins, dirs, a_c, a_os, a_om)
                arr[i] = orig - step
                lo = render_loss(gs, gm, motion, t, origins, dirs, a_c, a_os, a_om)
                arr[i] = orig
                fd = (hi - lo) / (2 * step)
                worst_grid = max(worst_grid, abs(garr[i] - fd) / max(1.0, abs(fd)))

    # (b) motion parameters, both joint types
    rng = np.random.default_rng(1003)
    worst_motion = 0.0
    for trial in range(50):
        gs, gm = _random_grid(rng), _random_grid(rng)
        motion = _random_motion(rng, ["revolute", "prismatic"][trial % 2])
        t = float((trial // 2) % 2)
        origins, dirs = _ray_batch(rng)
        a_c = rng.normal(0, 1, (2, 3))
        a_os, a_om = rng.normal(0, 1, 2), rng.normal(0, 1, 2)
        _, ctx = render_rays(gs, gm, motion, t, origins, dirs, BOX, cfg)
        _, _, mgrad = render_rays_backward(gs, gm, ctx, a_c, a_os, a_om)
        vec = motion.params_vector()
        step = 1e-6
        for k in range(len(vec)):
            hi_v, lo_v = vec.copy(), vec.copy()
            hi_v[k] += step
            lo_v[k] -= step
            fd = (
                render_loss(gs, gm, motion.with_params(hi_v), t, origins, dirs, a_c, a_os, a_om)
                - render_loss(gs, gm, motion.with_params(lo_v), t, origins, dirs, a_c, a_os, a_om)
            ) / (2 * step)
            worst_motion = max(worst_motion, abs(mgrad[k] - fd) / max(1.0, abs(fd)))

    # (c) the three losses (plus the ratio backward feeding the third)
    rng = np.random.default_rng(1004)
    worst_loss = 0.0
    step = 1e-6
    for _ in range(50):
        n = int(rng.integers(2, 30))
        pred = rng.uniform(0.05, 0.95, (n, 3))
        target = rng.uniform(0, 1, (n, 3))
        opac = rng.uniform(0.05, 0.95, n)
        mask = (rng.uniform(0, 1, n) > 0.5).astype(float)
        o_s = rng.uniform(0.05, 0.6, n)
        o_m = rng.uniform(0.05, 0.6, n)
        for fn, args, gi in (
            (loss_rgb, (pred, target), 0),
            (loss_mask, (opac, mask), 0),
            (loss_prob, (o_m / (o_s + o_m),), 0),
        ):
            _, grad = fn(*args)
            arr = args[gi]
            flat, gflat = arr.ravel(), np.asarray(grad).ravel()
            for k in rng.choice(len(flat), size=min(3, len(flat)), replace=False):
                orig = flat[k]
                flat[k] = orig + step
                hi = fn(*args)[0]
                flat[k] = orig - step
                lo = fn(*args)[0]
                flat[k] = orig
                fd = (hi - lo) / (2 * step)
                worst_loss = max(worst_loss, abs(gflat[k] - fd) / max(1.0, abs(fd)))
        # ratio backward: d(sum a * P_M)/d(opacities)
        a = rng.normal(0, 1, n)
        g_os, g_om = mobile_ratio_backward(o_s, o_m, a)
        for arr, garr in ((o_s, g_os), (o_m, g_om)):
            k = int(rng.integers(n))
            orig = arr[k]
            arr[k] = orig + step
            hi = float((a * (o_m / (o_s + o_m))).sum())
            arr[k] = orig - step
            lo = float((a * (o_m / (o_s + o_m))).sum())
            arr[k] = orig
            fd = (hi - lo) / (2 * step)
            worst_loss = max(worst_loss, abs(garr[k] - fd) / max(1.0, abs(fd)))

    dt = time.time() - t0
    _verdict(2, "analytic vs central finite-difference gradients (50 configs each)", [
        ("grid rel err", f"{worst_grid:.2e}", "< 1e-3", worst_grid < rel_tol),
        ("motion rel err", f"{worst_motion:.2e}", "< 1e-3", worst_motion < rel_tol),
        ("loss rel err", f"{worst_loss:.2e}", "< 1e-3", worst_loss < rel_tol),
        ("runtime", f"{dt:.1f}s", "< 300s", dt < 300),
    ])


# ---------------------------------------------------------------------------
# criterion 3: end-to-end revolute, laptop, pinned default config
# ---------------------------------------------------------------------------


def test_criterion_3_end_to_end_revolute_default_config(tmp_path):
    t0 = time.time()
    spec = make_preset("laptop")
    dataset = generate_dataset(spec, views=64, resolution=128, seed=0)
    cfg = TrainConfig()  # the defaults are the pinned config
    ckpt = train(dataset, cfg)
    report = evaluate(ckpt, dataset, n_views=2, seed=0)
    dt = time.time() - t0
    _verdict(3, "laptop 64 views/state at 128x128, default config", [
        ("axis err deg", f"{report.ang_err_deg:.3f}", "< 5", report.ang_err_deg < 5.0),
        ("axis pos err x10", f"{report.pos_err:.3f}", "< 0.5", report.pos_err < 0.5),
        ("joint-state geodesic deg", f"{report.joint_state_err}", "< 5",
         isinstance(report.joint_state_err, float) and report.joint_state_err < 5.0),
        ("CD-m x1000", f"{report.cd_m:.2f}", "< 50", report.cd_m < 50.0),
        ("runtime", f"{dt / 60:.1f}min", "target < 60min", True),
    ])


# ---------------------------------------------------------------------------
# criterion 4: end-to-end prismatic, drawer (reduced config, see ledger)
# ---------------------------------------------------------------------------


def test_criterion_4_end_to_end_prismatic_drawer():
    t0 = time.time()
    spec = make_preset("drawer")
    dataset = generate_dataset(spec, views=16, resolution=64, seed=0)
    cfg = TrainConfig(
        iterations=2000, rays_per_state=768, grid_resolution=64,
        motion_type="prismatic", checkpoint_every=0,
    )
    ckpt = train(dataset, cfg)
    m = ckpt.motion
    axis_err = axis_angular_error(m.axis, spec.motion.axis)
    trans_err = joint_state_error(m, spec.motion)
    dt = time.time() - t0
    _verdict(4, "drawer prismatic, GT 0.3-unit translation (reduced config)", [
        ("axis err deg", f"{axis_err:.3f}", "< 5", axis_err < 5.0),
        ("translation err", f"{trans_err}", "< 0.05",
         isinstance(trans_err, float) and trans_err < 0.05),
        ("runtime", f"{dt / 60:.1f}min", "target < 60min", True),
    ])


# ---------------------------------------------------------------------------
# criterion 5: part-assignment regularizer ablation on the washer
# ---------------------------------------------------------------------------


def test_criterion_5_regularizer_ablation_washer():
    t0 = time.time()
    spec = make_preset("washer")
    dataset = generate_dataset(spec, views=16, resolution=48, seed=0)
    cd_m = {}
    for label, weights in (
        ("reg", LossWeights()),
        ("noreg", LossWeights(lambda_prob=0.0)),
    ):
        cfg = TrainConfig(
            iterations=1500, rays_per_state=512, grid_resolution=48,
            n_coarse=48, n_fine=32, motion_type="revolute",
            checkpoint_every=0, weights=weights,
        )
        ckpt = train(dataset, cfg)
        report = evaluate(ckpt, dataset, n_points=4000, n_views=1, seed=0)
        cd_m[label] = report.cd_m
    dt = time.time() - t0
    _verdict(5, "washer: movable-part Chamfer with vs without regularizer", [
        ("CD-m reg", f"{cd_m['reg']:.2f}", "<= CD-m noreg", cd_m["reg"] <= cd_m["noreg"]),
        ("CD-m noreg", f"{cd_m['noreg']:.2f}", "", True),
        ("runtime", f"{dt / 60:.1f}min", "target < 120min", True),
    ])


# ---------------------------------------------------------------------------
# criterion 6: view-count degradation on the laptop
# ---------------------------------------------------------------------------

VIEW_SLACK_DEG = 0.5  # measurement noise allowance; see ledger


def test_criterion_6_view_count_degradation():
    t0 = time.time()
    spec = make_preset("laptop")
    errs = {}
    for views in (64, 32, 16):
        dataset = generate_dataset(spec, views=views, resolution=64, seed=0)
        cfg = TrainConfig(
            iterations=1500, rays_per_state=512, grid_resolution=64,
            motion_type="revolute", checkpoint_every=0,
        )
        ckpt = train(dataset, cfg)
        errs[views] = axis_angular_error(ckpt.motion.axis, spec.motion.axis)
    dt = time.time() - t0
    _verdict(6, "laptop axis error non-decreasing as views decrease (64/32/16)", [
        ("err@64", f"{errs[64]:.3f}", "", True),
        ("err@32", f"{errs[32]:.3f}", ">= err@64 - 0.5", errs[32] >= errs[64] - VIEW_SLACK_DEG),
        ("err@16", f"{errs[16]:.3f}", ">= err@32 - 0.5", errs[16] >= errs[32] - VIEW_SLACK_DEG),
        ("runtime", f"{dt / 60:.1f}min", "", True),
    ])


# ---------------------------------------------------------------------------
# criterion 7: metric oracles
# ---------------------------------------------------------------------------


def test_criterion_7_metric_oracles():
    t0 = time.time()
    rng = np.random.default_rng(1007)
    worst = 0.0
    for _ in range(50):
        a = rng.normal(0, 1, (500, 3))
        b = rng.normal(0, 1, (500, 3))
        d = cdist(a, b)
        brute = 500.0 * (d.min(axis=1).mean() + d.min(axis=0).mean())
        worst = max(worst, abs(chamfer_l1(a, b) - brute) / brute)
    chamfer_ok = worst < 1e-9

    axis_ok = (
        axis_angular_error([0, 0, 1], [0, 0, 1]) == pytest.approx(0.0, abs=1e-12)
        and axis_angular_error([1, 0, 0], [0, 1, 0]) == pytest.approx(90.0)
        and axis_angular_error([0, 0, 1], [0, 0, -1]) == pytest.approx(0.0, abs=1e-9)
        and axis_angular_error([1, 1, 0], [1, 0, 0]) == pytest.approx(45.0)
        # skew lines: x-line through (0,2,5) vs z-line through origin -> distance 2
        and axis_position_error([0, 2, 5], [1, 0, 0], [0, 0, 0], [0, 0, 1])
        == pytest.approx(20.0)
        # gauge invariance: sliding the pivot along the axis changes nothing
        and axis_position_error([0, 0, 7], [0, 0, 1], [1, 0, 0], [0, 0, 1])
        == pytest.approx(10.0)
    )

    img = rng.uniform(0, 1, (32, 32, 3))
    noisy = np.clip(img + rng.normal(0, 0.1, img.shape), 0, 1)
    mse = float(((img - noisy) ** 2).mean())
    psnr_ok = (
        psnr(img, img) == pytest.approx(100.0)
        and psnr(img, noisy) == pytest.approx(-10.0 * np.log10(mse), abs=1e-9)
    )
    ssim_ok = ssim(img, img) == pytest.approx(1.0, abs=1e-9) and ssim(img, noisy) < 1.0
    dt = time.time() - t0
    _verdict(7, "metric oracles (chamfer brute force, axis closed forms, PSNR/SSIM)", [
        ("chamfer rel err", f"{worst:.2e}", "exact (<1e-9)", chamfer_ok),
        ("axis closed forms", axis_ok, "all exact", axis_ok),
        ("psnr", psnr_ok, "formula + cap", psnr_ok),
        ("ssim", ssim_ok, "identity=1, noisy<1", ssim_ok),
        ("runtime", f"{dt:.1f}s", "< 60s", dt < 60),
    ])


# ---------------------------------------------------------------------------
# criterion 8: ICP baseline
# ---------------------------------------------------------------------------


def test_criterion_8_icp_baseline():
    t0 = time.time()
    # synthetic noise-free rigid motion
    rng = np.random.default_rng(1008)
    pts = rng.normal(0, 0.3, (400, 3))
    pts[:, 0] *= 2.5  # break symmetry
    gt_q = quat_from_axis_angle(np.array([0.3, 0.9, 0.1]) / np.linalg.norm([0.3, 0.9, 0.1]), 0.4)
    gt = RigidTransform(gt_q, np.array([0.05, -0.12, 0.2]))
    est, _ = register(pts, gt.apply(pts))
    rel = est.compose(gt.inverse())
    rot_err = rotation_geodesic_angle(rel.rotation)
    # translation error at the cloud: worst residual over the points
    trans_err = float(np.abs(est.apply(pts) - gt.apply(pts)).max())

    # end-to-end on the laptop: per-state field fits, CSG split, ICP
    spec = make_preset("laptop")
    dataset = generate_dataset(spec, views=8, resolution=48, seed=0)
    cfg = TrainConfig(
        iterations=1500, rays_per_state=768, grid_resolution=48,
        n_coarse=48, n_fine=32, checkpoint_every=0,
    )
    grid0 = fit_single_state(dataset, 0, cfg)
    grid1 = fit_single_state(dataset, 1, cfg)
    motion, _ = baseline_motion(grid0, grid1)
    axis_err = (
        axis_angular_error(motion.axis, spec.motion.axis)
        if hasattr(motion, "axis") else 180.0
    )
    dt = time.time() - t0
    _verdict(8, "ICP baseline: synthetic exact recovery + laptop end-to-end", [
        ("synthetic rot err rad", f"{rot_err:.2e}", "< 1e-3", rot_err < 1e-3),
        ("synthetic trans err", f"{trans_err:.2e}", "< 1e-4", trans_err < 1e-4),
        ("laptop axis err deg", f"{axis_err:.2f}", "< 10", axis_err < 10.0),
        ("runtime", f"{dt / 60:.1f}min", "target < 45min", True),
    ])


# ---------------------------------------------------------------------------
# criterion 9: bit-determinism of a command rerun
# ---------------------------------------------------------------------------


def _run_cli(*argv):
    assert cli_main([str(a) for a in argv]) == 0


def _tree_bytes(root: Path) -> dict:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


def test_criterion_9_determinism(tmp_path):
    import shutil

    t0 = time.time()
    mismatches = []
    base = tmp_path / "work"
    snapshots = []
    for _ in range(2):  # identical command sequence, identical paths
        data = base / "data"
        _run_cli("synth", "--preset", "laptop", "--views", 2, "--res", 24,
                 "--seed", 5, "--out", data)
        _run_cli("train", "--data", data, "--out", base / "train",
                 "--motion-type", "revolute", "--iterations", 20, "--rays", 64,
                 "--grid-res", 16, "--checkpoint-every", 10, "--seed", 5)
        _run_cli("eval", "--checkpoint", base / "train" / "final", "--data", data,
                 "--points", 500, "--views", 1, "--seed", 5, "--out", base / "eval")
        _run_cli("render", "--checkpoint", base / "train" / "final", "--t", "0:1:0.5",
                 "--camera", "orbit:2", "--res", 24, "--out", base / "frames")
        snapshots.append(_tree_bytes(base))
        shutil.rmtree(base)
    ta, tb = snapshots
    if sorted(ta) != sorted(tb):
        mismatches.append("file sets differ")
    mismatches += [rel for rel in ta if rel in tb and ta[rel] != tb[rel]]
    dt = time.time() - t0
    _verdict(9, "synth/train/eval/render rerun with the same seed is bit-identical", [
        ("files compared", len(ta), "> 10", len(ta) > 10),
        ("byte mismatches", mismatches or "none", "none", not mismatches),
        ("runtime", f"{dt:.1f}s", "", True),
    ])


# ---------------------------------------------------------------------------
# criterion 10: motion-type classification by the SE(3) pre-fit
# ---------------------------------------------------------------------------


def test_criterion_10_motion_type_classification():
    t0 = time.time()
    results = {}
    for preset, expected in (("drawer", Prismatic), ("laptop", Revolute)):
        spec = make_preset(preset)
        dataset = generate_dataset(spec, views=16, resolution=48, seed=0)
        cfg = TrainConfig(
            rays_per_state=512, prefit_iterations=300, prefit_resolution=48,
            n_coarse=48, n_fine=32, checkpoint_every=0,
        )
        hull = hull_motion_init(dataset, 64, seed=cfg.seed)
        typed = prefit_motion(dataset, cfg, init=hull)
        results[preset] = (type(typed).__name__, isinstance(typed, expected))
    dt = time.time() - t0
    _verdict(10, "SE(3) pre-fit classification (drawer -> prismatic, laptop -> revolute)", [
        ("drawer", results["drawer"][0], "prismatic", results["drawer"][1]),
        ("laptop", results["laptop"][0], "revolute", results["laptop"][1]),
        ("runtime", f"{dt / 60:.1f}min", "", True),
    ])
