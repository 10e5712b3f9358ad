"""Joint optimization of the two radiance grids and the articulation motion.

Every iteration draws an equal number of rays from each articulation state,
renders them through the composite pipeline, and steps two independent Adam
groups:

  * field group  — L_rgb + lambda_mask * L_mask + lambda_prob * L_prob,
  * motion group — L_rgb + lambda_mask * L_mask  (the part-assignment
    regularizer deliberately never reaches the motion parameters).

The routing is implemented as two backward passes with different upstream
opacity gradients; the motion pass skips the static-grid scatter since it
only needs the positional gradients of the mobile queries.

When the joint type is unknown, a pre-fit stage first optimizes a free
SE(3) motion (at reduced grid resolution, canonical state t* = 0 so the
transform gradient is only needed at whole steps) and classifies it into a
revolute or prismatic initialization for the main stage.

Runs are bit-deterministic for a fixed seed: per-iteration RNG streams are
derived from (seed, stage, iteration), so resuming from a checkpoint
reproduces the remaining trajectory exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import ArticulationDataset
from .grid import GridGradient, RadianceGrid, grid_init, read_grid, write_grid
from .motion import (
    FreeSE3,
    MotionParams,
    NoMotionError,
    Prismatic,
    Revolute,
    classify_motion_type,
    init_motion,
    motion_to_dict,
)
from .optim import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    AdamState,
    DivergenceError,
    adam_step,
    cosine_lr,
    loss_mask,
    loss_prob,
    loss_rgb,
    mobile_ratio_backward,
)
from .render import RenderConfig, render_rays, render_rays_backward

log = logging.getLogger(__name__)

LOSS_FIELDS = ("iteration", "loss", "loss_rgb", "loss_mask", "loss_prob", "lr_field")


@dataclass
class LossWeights:
    lambda_mask: float = 0.1
    lambda_prob: float = 0.001


@dataclass
class TrainConfig:
    iterations: int = 5000
    rays_per_state: int = 1024
    lr_field: float = 1e-2
    lr_field_final: float = 1e-3
    lr_motion: float = 5e-3
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    tstar: float = 0.5
    seed: int = 0
    motion_type: str = "unknown"  # revolute | prismatic | unknown
    checkpoint_every: int = 1000
    grid_resolution: int = 128
    n_coarse: int = 64
    n_fine: int = 64
    weights: LossWeights = field(default_factory=LossWeights)
    prefit_iterations: int = 1000
    prefit_resolution: int = 64
    hull_init: bool = True

    def __post_init__(self):
        if self.motion_type not in ("revolute", "prismatic", "unknown"):
            raise ValueError(f"bad motion type {self.motion_type!r}")
        if not 0.0 <= self.tstar <= 1.0:
            raise ValueError("canonical state must lie in [0, 1]")
        for name in ("iterations", "rays_per_state", "grid_resolution", "n_coarse"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        return TrainConfig(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    static_grid: RadianceGrid
    mobile_grid: RadianceGrid
    motion: MotionParams
    opt: dict  # name -> AdamState
    iteration: int
    config: TrainConfig
    loss_history: list

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_grid(self.static_grid, d / "static.grid")
        write_grid(self.mobile_grid, d / "mobile.grid")
        # exact parameter vector for bit-faithful resume; the human-readable
        # axis/angle form goes through trig and would not round-trip
        motion = {
            "kind": type(self.motion).__name__.lower(),
            "params": [float(x) for x in self.motion.params_vector()],
        }
        if not isinstance(self.motion, FreeSE3):
            motion["readable"] = motion_to_dict(self.motion)
        arrays = {}
        for name, st in self.opt.items():
            arrays[f"{name}.m"] = st.m
            arrays[f"{name}.v"] = st.v
        np.savez(d / "optim.npz", **arrays)
        meta = {
            "iteration": self.iteration,
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "motion": motion,
            "opt_steps": {name: st.step for name, st in self.opt.items()},
        }
        (d / "meta.json").write_text(json.dumps(meta, indent=1))
        with open(d / "loss.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(LOSS_FIELDS)
            w.writerows(self.loss_history)

    @staticmethod
    def load(directory) -> "Checkpoint":
        d = Path(directory)
        meta = json.loads((d / "meta.json").read_text())
        md = meta["motion"]
        vec = np.asarray(md["params"], dtype=float)
        from .geometry import RigidTransform
        from .motion import Prismatic, Revolute

        if md["kind"] == "freese3":
            motion = FreeSE3(RigidTransform(vec[:4], vec[4:7]))
        elif md["kind"] == "revolute":
            motion = Revolute(vec[:3], vec[3:7])
        elif md["kind"] == "prismatic":
            motion = Prismatic(vec[:3], float(vec[3]))
        else:
            raise ValueError(f"unknown motion kind {md['kind']!r}")
        arrays = np.load(d / "optim.npz")
        opt = {}
        for name, step in meta["opt_steps"].items():
            opt[name] = AdamState(arrays[f"{name}.m"].copy(), arrays[f"{name}.v"].copy(), step)
        history = []
        with open(d / "loss.csv", newline="") as f:
            rows = list(csv.reader(f))
        for row in rows[1:]:
            history.append([int(row[0])] + [float(x) for x in row[1:]])
        return Checkpoint(
            read_grid(d / "static.grid"),
            read_grid(d / "mobile.grid"),
            motion,
            opt,
            int(meta["iteration"]),
            TrainConfig.from_dict(meta["config"]),
            history,
        )


# ---------------------------------------------------------------------------
# ray bank: dataset flattened into per-state index-friendly arrays
# ---------------------------------------------------------------------------


class RayBank:
    """Per-state stacks of ray origins/directions and supervision targets."""

    def __init__(self, dataset: ArticulationDataset):
        dataset.validate()
        self.states = {}
        for t in (0, 1):
            origins, dirs, rgb, mask = [], [], [], []
            for cam, img in dataset.views[t]:
                h, w = cam.height, cam.width
                uu, vv = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
                d = cam.pixel_dirs(np.stack([uu.ravel(), vv.ravel()], axis=-1))
                origins.append(np.broadcast_to(cam.center, d.shape))
                dirs.append(d)
                flat = img.reshape(-1, 4)
                rgb.append(flat[:, :3] / 255.0)
                mask.append(flat[:, 3] > 0)
            self.states[t] = {
                "origins": np.concatenate(origins),
                "dirs": np.concatenate(dirs),
                "rgb": np.concatenate(rgb),
                "mask": np.concatenate(mask).astype(float),
            }

    def sample(self, t: int, n: int, rng) -> dict:
        bank = self.states[t]
        idx = rng.integers(len(bank["dirs"]), size=n)
        return {k: v[idx] for k, v in bank.items()}


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _grid_opt_states(grid: RadianceGrid) -> tuple[AdamState, AdamState]:
    return AdamState.zeros_like(grid.raw_density), AdamState.zeros_like(grid.raw_color)


def _field_groups(name: str, grid: RadianceGrid, grad: GridGradient, opt: dict):
    yield grid.raw_density, grad.density, opt[f"{name}_density"], f"{name} density"
    yield grid.raw_color, grad.color, opt[f"{name}_color"], f"{name} color"


def train_step(
    bank: RayBank,
    box,
    static_grid: RadianceGrid,
    mobile_grid: RadianceGrid,
    motion: MotionParams,
    opt: dict,
    cfg: TrainConfig,
    it: int,
    total_iters: int,
    stage: int,
    tstar: float,
    grad_static: GridGradient,
    grad_mobile: GridGradient,
    scratch_mobile: GridGradient,
) -> tuple[MotionParams, list]:
    """One optimization iteration over a balanced two-state ray batch.

    Returns the updated motion (grids update in place) and the loss row.
    """
    rng = np.random.default_rng([cfg.seed, stage, it])
    rcfg = RenderConfig(cfg.n_coarse, cfg.n_fine, jitter=True, tstar=tstar)
    grad_static.density.fill(0.0)
    grad_static.color.fill(0.0)
    grad_mobile.density.fill(0.0)
    grad_mobile.color.fill(0.0)
    motion_grad = np.zeros_like(motion.params_vector())
    lam_m = cfg.weights.lambda_mask
    lam_p = cfg.weights.lambda_prob
    v_rgb = v_mask = v_prob = 0.0
    for t in (0, 1):
        batch = bank.sample(t, cfg.rays_per_state, rng)
        out, ctx = render_rays(
            static_grid, mobile_grid, motion, float(t),
            batch["origins"], batch["dirs"], box, rcfg, rng,
        )
        lr_val, g_color = loss_rgb(out.color, batch["rgb"])
        lm_val, g_opac = loss_mask(out.opacity, batch["mask"])
        lp_val, g_ratio = loss_prob(out.mobile_ratio)
        v_rgb += 0.5 * lr_val
        v_mask += 0.5 * lm_val
        v_prob += 0.5 * lp_val
        # each state contributes half of the total batch loss
        g_color = 0.5 * g_color
        g_opac = 0.5 * lam_m * g_opac
        # field pass: rgb + mask + prob
        g_os_p, g_om_p = mobile_ratio_backward(
            out.opacity_static, out.opacity_mobile, 0.5 * lam_p * g_ratio
        )
        render_rays_backward(
            static_grid, mobile_grid, ctx,
            g_color, g_opac + g_os_p, g_opac + g_om_p,
            grad_static, grad_mobile, want_motion=False,
        )
        # motion pass: rgb + mask only (the regularizer is never routed here)
        _, _, mg = render_rays_backward(
            static_grid, mobile_grid, ctx,
            g_color, g_opac, g_opac,
            grad_static, scratch_mobile, want_motion=True, skip_static=True,
        )
        motion_grad += mg
    total = v_rgb + lam_m * v_mask + lam_p * v_prob
    if not np.isfinite(total):
        raise DivergenceError(f"non-finite loss at iteration {it}")
    lr_f = cosine_lr(it, total_iters, cfg.lr_field, cfg.lr_field_final)
    for params, grads, state, name in (
        *_field_groups("static", static_grid, grad_static, opt),
        *_field_groups("mobile", mobile_grid, grad_mobile, opt),
    ):
        adam_step(
            params, grads, state, lr_f, cfg.beta1, cfg.beta2, cfg.eps,
            context=f"iter {it}, {name}",
        )
    vec = motion.params_vector()
    adam_step(
        vec, motion_grad, opt["motion"], cfg.lr_motion, cfg.beta1, cfg.beta2, cfg.eps,
        context=f"iter {it}, motion",
    )
    motion = motion.with_params(vec)  # renormalizes quaternion / axis
    return motion, [it, total, v_rgb, v_mask, v_prob, lr_f]


def _run_stage(
    bank: RayBank,
    box,
    static_grid: RadianceGrid,
    mobile_grid: RadianceGrid,
    motion: MotionParams,
    cfg: TrainConfig,
    iterations: int,
    stage: int,
    tstar: float,
    out_dir: Path | None,
    start_iteration: int = 0,
    opt: dict | None = None,
    loss_history: list | None = None,
) -> Checkpoint:
    if opt is None:
        opt = {}
        opt["static_density"], opt["static_color"] = _grid_opt_states(static_grid)
        opt["mobile_density"], opt["mobile_color"] = _grid_opt_states(mobile_grid)
        opt["motion"] = AdamState.zeros_like(motion.params_vector())
    loss_history = loss_history if loss_history is not None else []
    grad_static = GridGradient.zeros_like(static_grid)
    grad_mobile = GridGradient.zeros_like(mobile_grid)
    scratch_mobile = GridGradient.zeros_like(mobile_grid)
    ckpt = Checkpoint(static_grid, mobile_grid, motion, opt, start_iteration, cfg, loss_history)
    csv_path = out_dir / f"loss_stage{stage}.csv" if out_dir else None
    if csv_path and not csv_path.exists():
        with open(csv_path, "w", newline="") as f:
            csv.writer(f).writerow(LOSS_FIELDS)
    for it in range(start_iteration, iterations):
        try:
            motion, row = train_step(
                bank, box, static_grid, mobile_grid, motion, opt, cfg, it,
                iterations, stage, tstar, grad_static, grad_mobile, scratch_mobile,
            )
        except DivergenceError:
            if out_dir:
                ckpt.save(out_dir / "last_good")
                log.error("diverged at iteration %d; last good state saved", it)
            raise
        loss_history.append(row)
        ckpt.motion = motion
        ckpt.iteration = it + 1
        if csv_path:
            with open(csv_path, "a", newline="") as f:
                csv.writer(f).writerow(row)
        if it % 100 == 0 or it == iterations - 1:
            log.info(
                "stage %d iter %d/%d loss %.5f (rgb %.5f mask %.5f prob %.5f)",
                stage, it, iterations, row[1], row[2], row[3], row[4],
            )
        if out_dir and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            ckpt.save(out_dir / f"ckpt_{stage}_{it + 1:06d}")
    return ckpt


def train(
    dataset: ArticulationDataset,
    cfg: TrainConfig,
    out_dir=None,
    resume: Checkpoint | None = None,
) -> Checkpoint:
    """Full training: optional SE(3) pre-fit stage, then joint optimization.

    Returns the final checkpoint; intermediate checkpoints and per-iteration
    loss CSVs are written under out_dir when given.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    bank = RayBank(dataset)
    box = dataset.scene_box
    if resume is not None:
        ckpt = _run_stage(
            bank, box, resume.static_grid, resume.mobile_grid, resume.motion,
            resume.config, resume.config.iterations, stage=1,
            tstar=resume.config.tstar, out_dir=out_dir,
            start_iteration=resume.iteration, opt=resume.opt,
            loss_history=resume.loss_history,
        )
        return ckpt
    hull = None
    if cfg.hull_init:
        from .baseline import hull_motion_init

        hull = hull_motion_init(dataset, cfg.grid_resolution, seed=cfg.seed)
        if hull is not None:
            log.info("hull-difference registration produced a motion initialization")
    if cfg.motion_type == "unknown":
        motion = prefit_motion(dataset, cfg, out_dir=out_dir, bank=bank, init=hull)
    else:
        motion = _typed_init(cfg.motion_type, hull, box.center, [cfg.seed, 2])
    static_grid = grid_init(cfg.grid_resolution, box, [cfg.seed, 0])
    mobile_grid = grid_init(cfg.grid_resolution, box, [cfg.seed, 1])
    ckpt = _run_stage(
        bank, box, static_grid, mobile_grid, motion, cfg, cfg.iterations,
        stage=1, tstar=cfg.tstar, out_dir=out_dir,
    )
    if out_dir:
        ckpt.save(out_dir / "final")
    return ckpt


def _typed_init(kind: str, hull: FreeSE3 | None, center, seed) -> MotionParams:
    """Initialize a typed joint, preferring the hull-registered motion.

    When the hull evidence classifies to the requested type it is used
    directly; a prismatic request also accepts the translation component of
    a rotating fit.  Anything else falls back to the default near-identity
    start.
    """
    if hull is not None:
        try:
            typed = classify_motion_type(hull)
        except NoMotionError:
            typed = None
        if isinstance(typed, Prismatic) and kind == "prismatic":
            return typed
        if isinstance(typed, Revolute) and kind == "revolute":
            return typed
        if typed is not None and kind == "prismatic":
            t = np.asarray(hull.transform.translation, dtype=float)
            norm = float(np.linalg.norm(t))
            if norm > 1e-6:
                return Prismatic(t / norm, norm)
    return init_motion(kind, center, seed)


def prefit_motion(
    dataset: ArticulationDataset,
    cfg: TrainConfig,
    out_dir=None,
    bank: RayBank | None = None,
    init: FreeSE3 | None = None,
) -> MotionParams:
    """Stage 0: fit a free rigid transform, classify it into a typed joint.

    Runs at reduced grid resolution with canonical state t* = 0, where the
    free-transform gradient only ever involves whole motion steps.
    """
    bank = bank or RayBank(dataset)
    box = dataset.scene_box
    motion = init if init is not None else init_motion("unknown", box.center, [cfg.seed, 2])
    static_grid = grid_init(cfg.prefit_resolution, box, [cfg.seed, 3])
    mobile_grid = grid_init(cfg.prefit_resolution, box, [cfg.seed, 4])
    ckpt = _run_stage(
        bank, box, static_grid, mobile_grid, motion, cfg, cfg.prefit_iterations,
        stage=0, tstar=0.0, out_dir=out_dir,
    )
    fitted = ckpt.motion
    typed = classify_motion_type(fitted)
    log.info(
        "pre-fit classified the joint as %s", type(typed).__name__.lower()
    )
    return typed
