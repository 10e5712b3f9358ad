"""Registration baseline: per-state field fits, CSG part split, ICP motion.

Instead of optimizing motion jointly with the fields, this pipeline fits an
independent radiance grid to each articulation state, splits parts by set
algebra on the two occupancy level sets (static = AND, movable per state =
state AND NOT other), samples the movable boundaries, and registers the two
movable clouds with principal-axes coarse alignment followed by
point-to-point ICP.  The recovered rigid transform is then classified into
a revolute or prismatic joint.  Deliberately simpler than the main method;
it exists as a comparison point.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import label as cc_label
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .dataset import ArticulationDataset
from .geometry import Aabb, RigidTransform, quat_normalize
from .grid import GridGradient, RadianceGrid, grid_init, softplus
from .mesh import MESH_DENSITY_THRESHOLD
from .motion import (
    FreeSE3,
    MotionParams,
    classify_motion_type,
    rotation_geodesic_angle,
)
from .optim import DivergenceError, adam_step, cosine_lr, loss_mask, loss_rgb
from .render import RenderConfig, render_rays, render_rays_backward
from .train import RayBank, TrainConfig, _grid_opt_states

log = logging.getLogger(__name__)

OCC_THRESHOLD = MESH_DENSITY_THRESHOLD
ICP_MAX_ITERS = 100
ICP_RMS_DELTA = 1e-6
INERT_RAW_DENSITY = -30.0  # softplus ~ 1e-13: field contributes nothing


class BaselineError(RuntimeError):
    """Part split or registration failed; message states why."""


# ---------------------------------------------------------------------------
# single-state field fit
# ---------------------------------------------------------------------------


def fit_single_state(
    dataset: ArticulationDataset, t: int, cfg: TrainConfig
) -> RadianceGrid:
    """Fit one radiance grid to one articulation state's views.

    Reuses the renderer with an inert second field and identity motion;
    only the color and mask losses apply (there is no part split to
    regularize).  Deterministic under cfg.seed.
    """
    bank = RayBank(dataset)
    box = dataset.scene_box
    grid = grid_init(cfg.grid_resolution, box, seed=[cfg.seed, 30 + t])
    inert = grid_init(cfg.grid_resolution, box, seed=[cfg.seed, 40 + t])
    inert.raw_density.fill(INERT_RAW_DENSITY)
    motion = FreeSE3(RigidTransform.identity())
    opt = dict(zip(("density", "color"), _grid_opt_states(grid)))
    grad = GridGradient.zeros_like(grid)
    sink = GridGradient.zeros_like(inert)
    rcfg = RenderConfig(cfg.n_coarse, cfg.n_fine, jitter=True, tstar=0.0)
    lam_m = cfg.weights.lambda_mask
    for it in range(cfg.iterations):
        rng = np.random.default_rng([cfg.seed, 50 + t, it])
        grad.density.fill(0.0)
        grad.color.fill(0.0)
        batch = bank.sample(t, cfg.rays_per_state, rng)
        out, ctx = render_rays(
            grid, inert, motion, 0.0, batch["origins"], batch["dirs"], box, rcfg, rng,
        )
        v_rgb, g_color = loss_rgb(out.color, batch["rgb"])
        v_mask, g_opac = loss_mask(out.opacity, batch["mask"])
        if not np.isfinite(v_rgb + lam_m * v_mask):
            raise DivergenceError(f"non-finite loss at iteration {it} (state {t})")
        g_opac = lam_m * g_opac
        render_rays_backward(
            grid, inert, ctx, g_color, g_opac, g_opac, grad, sink, want_motion=False,
        )
        lr = cosine_lr(it, cfg.iterations, cfg.lr_field, cfg.lr_field_final)
        adam_step(grid.raw_density, grad.density, opt["density"], lr,
                  cfg.beta1, cfg.beta2, cfg.eps, context=f"iter {it}, density")
        adam_step(grid.raw_color, grad.color, opt["color"], lr,
                  cfg.beta1, cfg.beta2, cfg.eps, context=f"iter {it}, color")
        if it % 100 == 0:
            log.info("state %d fit %d: rgb %.4f mask %.4f", t, it, v_rgb, v_mask)
    return grid


# ---------------------------------------------------------------------------
# CSG part split
# ---------------------------------------------------------------------------


@dataclass
class OccupancyGrid:
    resolution: int
    bounds: Aabb
    occ: np.ndarray  # (R, R, R) bool

    @staticmethod
    def from_grid(grid: RadianceGrid, threshold: float) -> "OccupancyGrid":
        return OccupancyGrid(
            grid.resolution, grid.bounds, softplus(grid.raw_density) >= threshold
        )

    def boundary_points(self) -> np.ndarray:
        """World coordinates of occupied cells with a free 6-neighbor (or on
        the lattice border): the discrete surface of the occupancy."""
        occ = self.occ
        padded = np.pad(occ, 1, constant_values=False)
        interior = np.ones_like(occ)
        for ax in range(3):
            lo = np.roll(padded, 1, axis=ax)[1:-1, 1:-1, 1:-1]
            hi = np.roll(padded, -1, axis=ax)[1:-1, 1:-1, 1:-1]
            interior &= lo & hi
        surf = occ & ~interior
        lo_w = np.asarray(self.bounds.lo, dtype=float)
        hi_w = np.asarray(self.bounds.hi, dtype=float)
        cell = (hi_w - lo_w) / (self.resolution - 1)
        idx = np.argwhere(surf)
        return lo_w + idx * cell


def _largest_component(occ: np.ndarray) -> np.ndarray:
    labels, n = cc_label(occ)
    if n <= 1:
        return occ
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (1 + int(np.argmax(sizes)))


def csg_parts(
    grid0: RadianceGrid, grid1: RadianceGrid, threshold: float = OCC_THRESHOLD
) -> tuple[OccupancyGrid, OccupancyGrid, OccupancyGrid]:
    """Split the two per-state fields into (static, movable_0, movable_1).

    Static is the occupancy intersection; each movable part is its state's
    occupancy minus the other's, speckle-filtered to the largest connected
    component.
    """
    if grid0.resolution != grid1.resolution:
        raise ValueError("grids have different resolutions")
    occ0 = OccupancyGrid.from_grid(grid0, threshold)
    occ1 = OccupancyGrid.from_grid(grid1, threshold)
    static = occ0.occ & occ1.occ
    mov0 = occ0.occ & ~occ1.occ
    mov1 = occ1.occ & ~occ0.occ
    if not mov0.any() or not mov1.any():
        raise BaselineError("states identical or threshold too high: no movable part")
    mov0 = _largest_component(mov0)
    mov1 = _largest_component(mov1)
    mk = lambda occ: OccupancyGrid(grid0.resolution, grid0.bounds, occ)
    return mk(static), mk(mov0), mk(mov1)


# ---------------------------------------------------------------------------
# visual hulls (silhouette carving) and motion initialization
# ---------------------------------------------------------------------------

HULL_MIN_EVIDENCE = 0.002  # movable fraction of the hull below which a side is noise
HULL_ONE_SIDED_RATIO = 0.25  # side-size imbalance that flags an emerging part
HULL_REGISTER_POINTS = 8000  # per-cloud cap for the ICP stage


def visual_hull(dataset: ArticulationDataset, t: int, resolution: int) -> OccupancyGrid:
    """Voxel occupancy carved from the silhouettes of one articulation state.

    A lattice node is occupied iff it projects inside the foreground mask of
    every view of state t.  Enclosed cavities are never carved (no silhouette
    sees them), so hulls overestimate the true occupancy.
    """
    box = dataset.scene_box
    lo, hi = np.asarray(box.lo, dtype=float), np.asarray(box.hi, dtype=float)
    cell = (hi - lo) / (resolution - 1)
    axes = [lo[i] + cell[i] * np.arange(resolution) for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    occ = np.ones(len(pts), dtype=bool)
    for cam, img in dataset.views[t]:
        uv = cam.project(pts)
        col = np.clip(np.round(uv[:, 0]).astype(int), 0, cam.width - 1)
        row = np.clip(np.round(uv[:, 1]).astype(int), 0, cam.height - 1)
        inside = (
            (uv[:, 0] >= -0.5) & (uv[:, 0] <= cam.width - 0.5)
            & (uv[:, 1] >= -0.5) & (uv[:, 1] <= cam.height - 0.5)
        )
        occ &= inside & (img[row, col, 3] > 127)
    shape = (resolution, resolution, resolution)
    return OccupancyGrid(resolution, box, occ.reshape(shape))


def _subsample(pts: np.ndarray, cap: int, rng) -> np.ndarray:
    if len(pts) <= cap:
        return pts
    return pts[rng.choice(len(pts), size=cap, replace=False)]


def hull_motion_init(
    dataset: ArticulationDataset, resolution: int, seed: int = 0
) -> FreeSE3 | None:
    """Estimate the state-0 -> state-1 motion from visual-hull differences.

    The hulls of the two states are differenced; surviving voxels are where
    the movable part sits in one state but not the other.  With evidence on
    both sides the two clouds are ICP-registered.  A strongly one-sided
    difference means the movable part emerges from inside the body (e.g. a
    sliding drawer): the motion is then a translation along the direction
    from the body centroid to the emerged blob, with magnitude read off the
    growth of the hull extent along that direction.  Returns None when the
    hulls provide no usable evidence.
    """
    if resolution < 8:
        return None
    h0 = visual_hull(dataset, 0, resolution)
    h1 = visual_hull(dataset, 1, resolution)
    mov0 = _largest_component(h0.occ & ~h1.occ)
    mov1 = _largest_component(h1.occ & ~h0.occ)
    n0, n1 = int(mov0.sum()), int(mov1.sum())
    min_voxels = max(10, int(HULL_MIN_EVIDENCE * max(h0.occ.sum(), h1.occ.sum())))
    ok0, ok1 = n0 >= min_voxels, n1 >= min_voxels
    if ok0 and ok1 and min(n0, n1) < HULL_ONE_SIDED_RATIO * max(n0, n1):
        # the small side is carving noise, not the part's other position
        if n0 < n1:
            ok0 = False
        else:
            ok1 = False
    mk = lambda occ: OccupancyGrid(resolution, dataset.scene_box, occ)
    if ok0 and ok1:
        rng = np.random.default_rng([seed, 7])
        p0 = _subsample(mk(mov0).boundary_points(), HULL_REGISTER_POINTS, rng)
        p1 = _subsample(mk(mov1).boundary_points(), HULL_REGISTER_POINTS, rng)
        transform, info = register(p0, p1)
        log.info("hull registration: rms %.4f over %d+%d points", info["rms"], len(p0), len(p1))
        return FreeSE3(transform)
    if ok0 or ok1:
        mov, sign, far, near = (
            (mov1, 1.0, h1, h0) if ok1 else (mov0, -1.0, h0, h1)
        )
        body = _largest_component(h0.occ & h1.occ)
        if not body.any():
            return None
        direction = mk(mov).boundary_points().mean(axis=0) - mk(body).boundary_points().mean(axis=0)
        norm = float(np.linalg.norm(direction))
        if norm < 1e-9:
            return None
        direction /= norm
        proj_far = mk(far.occ).boundary_points() @ direction
        proj_near = mk(near.occ).boundary_points() @ direction
        # the emerging part extends the whole hull along the slide direction
        # by the slide distance; extreme percentiles resist carving noise
        magnitude = float(np.percentile(proj_far, 99.9) - np.percentile(proj_near, 99.9))
        cell = float(np.max(np.asarray(dataset.scene_box.extent) / (resolution - 1)))
        if magnitude < 2 * cell:
            return None
        identity = np.array([1.0, 0.0, 0.0, 0.0])
        return FreeSE3(RigidTransform(identity, sign * magnitude * direction))
    return None


# ---------------------------------------------------------------------------
# registration
# ---------------------------------------------------------------------------


def _kabsch(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform mapping src onto dst (matched rows)."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    quat_xyzw = Rotation.from_matrix(r).as_quat()
    q = quat_normalize(np.r_[quat_xyzw[3], quat_xyzw[:3]])
    return RigidTransform(q, cd - r @ cs)


def _nn_rms(src: np.ndarray, tree: cKDTree) -> float:
    d = tree.query(src, workers=-1)[0]
    return float(np.sqrt((d**2).mean()))


def _principal_axes(pts: np.ndarray) -> np.ndarray:
    cov = np.cov((pts - pts.mean(axis=0)).T)
    _, vecs = np.linalg.eigh(cov)
    vecs = vecs[:, ::-1]  # descending variance
    if np.linalg.det(vecs) < 0:
        vecs[:, 2] = -vecs[:, 2]
    return vecs


def register(
    points0: np.ndarray,
    points1: np.ndarray,
    max_iters: int = ICP_MAX_ITERS,
    rms_delta: float = ICP_RMS_DELTA,
) -> tuple[RigidTransform, dict]:
    """Rigid transform mapping cloud 0 onto cloud 1.

    Coarse alignment matches centroids and principal axes over all four
    proper-rotation sign assignments, plus a translation-only start; each
    start is refined by point-to-point ICP with closed-form least-squares
    updates until the RMS change drops below rms_delta.  The start with the
    lowest refined nearest-neighbor RMS wins; among near-ties (parts with
    180-degree self-symmetry) the smallest rotation is preferred.
    """
    p0 = np.asarray(points0, dtype=float).reshape(-1, 3)
    p1 = np.asarray(points1, dtype=float).reshape(-1, 3)
    if len(p0) == 0 or len(p1) == 0:
        raise BaselineError("registration requires non-empty point clouds")
    tree = cKDTree(p1)
    b0 = _principal_axes(p0)
    b1 = _principal_axes(p1)
    c0, c1 = p0.mean(axis=0), p1.mean(axis=0)
    starts = [RigidTransform(np.array([1.0, 0.0, 0.0, 0.0]), c1 - c0)]
    for s in ([1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]):
        r = (b1 * np.asarray(s, dtype=float)) @ b0.T
        quat_xyzw = Rotation.from_matrix(r).as_quat()
        q = quat_normalize(np.r_[quat_xyzw[3], quat_xyzw[:3]])
        starts.append(RigidTransform(q, c1 - r @ c0))
    refined = []
    for transform in starts:
        rms = _nn_rms(transform.apply(p0), tree)
        history = [rms]
        for _ in range(max_iters):
            moved = transform.apply(p0)
            _, nn = tree.query(moved, workers=-1)
            step = _kabsch(moved, p1[nn])
            transform = step.compose(transform)
            new_rms = _nn_rms(transform.apply(p0), tree)
            history.append(new_rms)
            if abs(rms - new_rms) < rms_delta:
                rms = new_rms
                break
            rms = new_rms
        refined.append((rms, transform, history))
    rms_min = min(r[0] for r in refined)
    rms, transform, history = min(
        (r for r in refined if r[0] <= rms_min * 1.15 + 1e-9),
        key=lambda r: rotation_geodesic_angle(r[1].rotation),
    )
    converged = abs(history[-1] - history[-2]) < rms_delta if len(history) > 1 else True
    return transform, {
        "rms": rms,
        "iterations": len(history) - 1,
        "converged": bool(converged),
        "rms_history": history,
    }


def baseline_motion(
    grid0: RadianceGrid, grid1: RadianceGrid, threshold: float = OCC_THRESHOLD
) -> tuple[MotionParams, dict]:
    """Recover the joint from two per-state fields: CSG split, boundary
    sampling, registration, and motion-type classification."""
    _, mov0, mov1 = csg_parts(grid0, grid1, threshold)
    transform, info = register(mov0.boundary_points(), mov1.boundary_points())
    motion = classify_motion_type(FreeSE3(transform))
    return motion, info
