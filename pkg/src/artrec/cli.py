"""Command-line workflow: synth, train, eval, render, baseline.

One executable with subcommands.  Every run writes a `manifest.json`
(argument list, seed, config hash where applicable, library versions) to
its output directory, and reports render their figures to files alongside
the delimited output (loss CSV next to the loss-curve PNG, report CSV next
to report.json and the metrics figure).

Exit codes: 0 success (including reports that flag a wrong motion type),
1 usage error, 2 runtime failure.  The ARTREC_OUT environment variable
sets the default output root when --out is omitted.
"""

from __future__ import annotations

import csv
import importlib.metadata
import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np
from PIL import Image

from .baseline import BaselineError, baseline_motion, fit_single_state
from .dataset import (
    DatasetError,
    generate_dataset,
    read_dataset,
    write_dataset,
)
from .geometry import look_at_camera
from .grid import write_grid
from .mesh import write_ply
from .metrics import MetricsReport, checkpoint_hash, evaluate, reconstruct_meshes
from .metrics import (
    axis_angular_error,
    axis_position_error,
    joint_state_error,
)
from .motion import NoMotionError, Prismatic, Revolute
from .optim import DivergenceError
from .plots import save_loss_curves, save_metrics_figure
from .render import RenderConfig, render_image
from .scenes import PRESETS, make_preset
from .train import Checkpoint, LossWeights, TrainConfig, train

log = logging.getLogger("artrec")

OUT_ROOT_ENV = "ARTREC_OUT"


def _out_dir(out: str | None, command: str) -> Path:
    if out is not None:
        return Path(out)
    return Path(os.environ.get(OUT_ROOT_ENV, ".")) / command


def _write_manifest(out: Path, seed: int | None = None, **extra) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "argv": sys.argv[1:],
        "seed": seed,
        "versions": {
            "artrec": importlib.metadata.version("artrec"),
            "numpy": np.__version__,
            "python": ".".join(map(str, sys.version_info[:3])),
        },
        **extra,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def _save_png(rgba: np.ndarray, path: Path) -> None:
    img = np.clip(np.round(rgba * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path)


def _report_csv(report: MetricsReport, path: Path) -> None:
    d = report.to_dict()
    flat = {}
    for k, v in d.items():
        if isinstance(v, dict):
            for sub, val in v.items():
                flat[f"{k}_{sub}"] = val
        else:
            flat[k] = v
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(flat.keys())
        w.writerow(["" if v is None else v for v in flat.values()])


@click.group()
@click.option("--workers", default=1, show_default=True,
              help="Parallelism; 1 is the deterministic reference mode.")
@click.option("-v", "--verbose", is_flag=True, help="Info-level logging.")
def cli(workers: int, verbose: bool) -> None:
    """Articulated object reconstruction from two-state multi-view captures."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if workers != 1:
        log.warning("only --workers 1 is implemented; continuing single-threaded")


@cli.command()
@click.option("--preset", required=True, help=f"One of: {', '.join(sorted(PRESETS))}")
@click.option("--views", default=64, show_default=True, help="Views per state.")
@click.option("--res", default=128, show_default=True, help="Image resolution.")
@click.option("--radius", default=2.4, show_default=True, help="Camera distance.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default=None, help="Output directory.")
def synth(preset, views, res, radius, seed, out):
    """Generate a two-state multi-view dataset for a scene preset."""
    try:
        spec = make_preset(preset)
    except ValueError as e:
        raise click.UsageError(str(e))
    out = _out_dir(out, "synth")
    ds = generate_dataset(spec, views=views, resolution=res, radius=radius, seed=seed)
    write_dataset(ds, out)
    _write_manifest(out, seed=seed, preset=preset, views=views, resolution=res)
    click.echo(f"wrote {2 * views} views to {out}")


@cli.command("train")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--motion-type", default="unknown", show_default=True,
              type=click.Choice(["revolute", "prismatic", "unknown"]))
@click.option("--tstar", default=0.5, show_default=True)
@click.option("--no-reg", is_flag=True, help="Disable the part-split regularizer.")
@click.option("--iterations", default=5000, show_default=True)
@click.option("--rays", default=1024, show_default=True, help="Rays per state per step.")
@click.option("--grid-res", default=128, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--checkpoint-every", default=1000, show_default=True)
@click.option("--out", default=None, help="Output directory.")
def train_cmd(data, motion_type, tstar, no_reg, iterations, rays, grid_res, seed,
              checkpoint_every, out):
    """Optimize the two part fields and the joint motion on a dataset."""
    out = _out_dir(out, "train")
    dataset = read_dataset(data)
    weights = LossWeights(lambda_prob=0.0) if no_reg else LossWeights()
    cfg = TrainConfig(
        iterations=iterations, rays_per_state=rays, grid_resolution=grid_res,
        motion_type=motion_type, tstar=tstar, seed=seed, weights=weights,
        checkpoint_every=checkpoint_every,
    )
    _write_manifest(out, seed=seed, config_hash=cfg.hash(), data=str(data))
    ckpt = train(dataset, cfg, out_dir=out)
    save_loss_curves(ckpt.loss_history, out / "loss_curve.png")
    click.echo(f"trained {ckpt.iteration} iterations; final checkpoint in {out / 'final'}")


@cli.command("eval")
@click.option("--checkpoint", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--points", default=10000, show_default=True, help="Surface samples.")
@click.option("--views", default=50, show_default=True, help="Novel eval views per state.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default=None, help="Output directory.")
def eval_cmd(checkpoint, data, points, views, seed, out):
    """Compute the metric report for a trained checkpoint."""
    out = _out_dir(out, "eval")
    ckpt = Checkpoint.load(checkpoint)
    dataset = read_dataset(data)
    report = evaluate(ckpt, dataset, n_points=points, n_views=views, seed=seed)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    _report_csv(report, out / "report.csv")
    save_metrics_figure(report, out / "metrics.png")
    static_mesh, mobile_mesh = reconstruct_meshes(ckpt)
    write_ply(static_mesh, out / "static.ply")
    write_ply(mobile_mesh, out / "mobile.ply")
    _write_manifest(out, seed=seed, config_hash=ckpt.config.hash(),
                    checkpoint_hash=checkpoint_hash(ckpt))
    if report.joint_state_err == "F":
        click.echo("motion type mismatch (flagged F in the report)")
    click.echo(f"report written to {out / 'report.json'}")


def _parse_t_spec(spec: str) -> list[float]:
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) != 3:
            raise click.UsageError("range t-spec must be start:stop:step")
        start, stop, step = (float(p) for p in parts)
        if step <= 0:
            raise click.UsageError("t-spec step must be positive")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [start + i * step for i in range(n)]
    return [float(p) for p in spec.split(",")]


def _parse_cameras(camera: str, dataset, radius: float, res: int):
    kind, _, rest = camera.partition(":")
    if kind == "orbit":
        n = int(rest or "1")
        if n < 1:
            raise click.UsageError("orbit camera needs at least one frame")
        f = 0.5 * res / np.tan(np.radians(30.0))
        cams = []
        for i in range(n):
            az = 2 * np.pi * i / n
            c = radius * np.array(
                [np.cos(az) * np.cos(0.6), np.sin(az) * np.cos(0.6), np.sin(0.6)]
            )
            cams.append(look_at_camera(c, np.zeros(3), f, f, res, res))
        return cams
    if kind == "train":
        if dataset is None:
            raise click.UsageError("--camera train:STATE:INDEX requires --data")
        try:
            state, idx = (int(p) for p in rest.split(":"))
            return [dataset.views[state][idx][0]]
        except (ValueError, KeyError, IndexError):
            raise click.UsageError(f"bad training-view camera spec {camera!r}")
    raise click.UsageError(f"unknown camera spec {camera!r} (orbit:N or train:STATE:INDEX)")


@cli.command("render")
@click.option("--checkpoint", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--t", "t_spec", default="0.5", show_default=True,
              help="Articulation states: value, comma list, or start:stop:step.")
@click.option("--camera", default="orbit:1", show_default=True,
              help="orbit:N or train:STATE:INDEX (the latter needs --data).")
@click.option("--data", default=None, type=click.Path(exists=True, file_okay=False),
              help="Dataset directory (for train:* cameras).")
@click.option("--res", default=256, show_default=True, help="Orbit image resolution.")
@click.option("--radius", default=2.4, show_default=True, help="Orbit camera distance.")
@click.option("--out", default=None, help="Output directory.")
def render_cmd(checkpoint, t_spec, camera, data, res, radius, out):
    """Render the reconstruction at arbitrary articulation states."""
    out = _out_dir(out, "render")
    ckpt = Checkpoint.load(checkpoint)
    dataset = read_dataset(data) if data else None
    ts = _parse_t_spec(t_spec)
    for t in ts:
        if not 0.0 <= t <= 1.0:
            log.warning("t=%g is outside [0, 1]: extrapolating the joint motion", t)
    cams = _parse_cameras(camera, dataset, radius, res)
    box = dataset.scene_box if dataset else ckpt.static_grid.bounds
    cfg = RenderConfig(
        n_coarse=ckpt.config.n_coarse, n_fine=ckpt.config.n_fine,
        jitter=False, tstar=ckpt.config.tstar,
    )
    out.mkdir(parents=True, exist_ok=True)
    frame = 0
    for t in ts:
        for cam in cams:
            rgba, _ = render_image(
                ckpt.static_grid, ckpt.mobile_grid, ckpt.motion, t, cam, box, cfg,
            )
            _save_png(rgba, out / f"frame_{frame:03d}.png")
            frame += 1
    _write_manifest(out, seed=None, t=ts, camera=camera,
                    config_hash=ckpt.config.hash())
    click.echo(f"wrote {frame} frames to {out}")


@cli.command("baseline")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--iterations", default=2000, show_default=True, help="Fit iterations per state.")
@click.option("--rays", default=1024, show_default=True)
@click.option("--grid-res", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default=None, help="Output directory.")
def baseline_cmd(data, iterations, rays, grid_res, seed, out):
    """Per-state field fits, CSG part split, and ICP motion recovery."""
    out = _out_dir(out, "baseline")
    dataset = read_dataset(data)
    cfg = TrainConfig(
        iterations=iterations, rays_per_state=rays, grid_resolution=grid_res,
        seed=seed, motion_type="unknown",
    )
    _write_manifest(out, seed=seed, config_hash=cfg.hash(), data=str(data))
    grids = [fit_single_state(dataset, t, cfg) for t in (0, 1)]
    for t, g in enumerate(grids):
        write_grid(g, out / f"state_{t}.grid")
    motion, info = baseline_motion(grids[0], grids[1])
    report = MetricsReport(
        method="ours-icp",
        motion_type_pred={Revolute: "revolute", Prismatic: "prismatic"}[type(motion)],
        config_hash=cfg.hash(),
        notes=f"icp rms {info['rms']:.6g}, converged {info['converged']}",
    )
    gt = dataset.gt
    if gt is not None:
        report.motion_type_gt = (
            "revolute" if isinstance(gt.motion, Revolute) else "prismatic"
        )
        report.ang_err_deg = axis_angular_error(motion.axis, gt.motion.axis)
        report.joint_state_err = joint_state_error(motion, gt.motion)
        if isinstance(motion, Revolute) and isinstance(gt.motion, Revolute):
            report.pos_err = axis_position_error(
                motion.pivot, motion.axis, gt.motion.pivot, gt.motion.axis
            )
    report.save(out / "report.json")
    _report_csv(report, out / "report.csv")
    save_metrics_figure(report, out / "metrics.png")
    click.echo(f"baseline report written to {out / 'report.json'}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Abort:
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except (DivergenceError, DatasetError, BaselineError, NoMotionError,
            FileNotFoundError, ValueError, RuntimeError) as e:
        click.echo(f"error: {e}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
