"""Two-state capture datasets: generation, directory layout, round-trip IO.

Directory layout::

    state_0/
      images/000.png ...   8-bit RGBA, alpha is the binary object mask
      cameras.json         per-image intrinsics + camera-to-world (16 floats,
                           row-major; serialized with full decimal precision)
    state_1/ ...
    scene.json             scene bounding box
    gt/                    optional ground-truth block
      motion.json
      points_static.ply
      points_mobile_t0.ply
      spec.json

Cameras use the package convention documented in geometry: +z forward,
+x right, +y down, pixel centers at half-integer coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Aabb, CameraModel, RigidTransform, look_at_camera
from .motion import Prismatic, Revolute, motion_from_dict, motion_to_dict
from .ply import read_ply, write_ply
from .scenes import SceneSpec, render_gt
from .sdf import sample_part_points

DEFAULT_VIEWS = 64
DEFAULT_RESOLUTION = 128
DEFAULT_RADIUS = 2.5
DEFAULT_FOV_DEG = 60.0
GT_POINT_COUNT = 10000


class DatasetError(ValueError):
    """Malformed dataset directory; the message names the offending path."""


@dataclass
class GroundTruth:
    motion: Revolute | Prismatic
    points_static: np.ndarray | None = None  # (N, 3) surface samples
    points_mobile_t0: np.ndarray | None = None  # movable part at state 0
    scene: SceneSpec | None = None


@dataclass
class ArticulationDataset:
    views: dict[int, list[tuple[CameraModel, np.ndarray]]]  # state -> [(cam, rgba)]
    scene_box: Aabb
    gt: GroundTruth | None = None

    def validate(self) -> None:
        for t in (0, 1):
            if t not in self.views or not self.views[t]:
                raise DatasetError(f"state_{t} has no views")
            for i, (cam, img) in enumerate(self.views[t]):
                if img.shape[:2] != (cam.height, cam.width) or img.shape[2] != 4:
                    raise DatasetError(f"state_{t} image {i}: shape does not match camera")
                alpha = np.unique(img[..., 3])
                if not np.isin(alpha, (0, 255)).all():
                    raise DatasetError(f"state_{t} image {i}: mask channel is not binary")


# ---------------------------------------------------------------------------
# camera sampling
# ---------------------------------------------------------------------------


def sample_hemisphere_cameras(
    n: int,
    radius: float,
    seed,
    width: int = DEFAULT_RESOLUTION,
    height: int = DEFAULT_RESOLUTION,
    fov_deg: float = DEFAULT_FOV_DEG,
    min_radius: float | None = None,
) -> list[CameraModel]:
    """n cameras drawn uniformly over the upper hemisphere (z >= 0) of the
    given radius, all looking at the origin.  Deterministic for a seed."""
    if n < 1:
        raise ValueError("need at least one camera")
    if min_radius is not None and radius <= min_radius:
        raise ValueError(
            f"camera radius {radius} is inside the scene bounding radius {min_radius:.3f}"
        )
    rng = np.random.default_rng(seed)
    cos_t = rng.uniform(0.0, 1.0, n)
    phi = rng.uniform(0.0, 2 * np.pi, n)
    sin_t = np.sqrt(1.0 - cos_t**2)
    centers = radius * np.stack(
        [sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=-1
    )
    f = 0.5 * width / np.tan(0.5 * np.radians(fov_deg))
    return [look_at_camera(c, np.zeros(3), f, f, width, height) for c in centers]


def generate_dataset(
    spec: SceneSpec,
    views: int = DEFAULT_VIEWS,
    resolution: int = DEFAULT_RESOLUTION,
    radius: float = DEFAULT_RADIUS,
    seed: int = 0,
    with_gt: bool = True,
    gt_points: int = GT_POINT_COUNT,
) -> ArticulationDataset:
    """Render a full two-state training dataset for a scene."""
    box = spec.bounds()
    min_radius = float(np.linalg.norm(np.maximum(np.abs(box.lo), np.abs(box.hi))))
    out: dict[int, list] = {}
    for t in (0, 1):
        cams = sample_hemisphere_cameras(
            views, radius, [seed, t], width=resolution, height=resolution,
            min_radius=min_radius,
        )
        out[t] = [(cam, render_gt(spec, float(t), cam)) for cam in cams]
    gt = None
    if with_gt:
        gt = GroundTruth(
            motion=spec.motion,
            points_static=(
                sample_part_points(spec.static.shape, gt_points, seed=[seed, 10])
                if spec.static.shape is not None
                else None
            ),
            points_mobile_t0=(
                sample_part_points(spec.movable.shape, gt_points, seed=[seed, 11])
                if spec.movable.shape is not None
                else None
            ),
            scene=spec,
        )
    return ArticulationDataset(out, box, gt)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _camera_to_dict(cam: CameraModel, file: str) -> dict:
    return {
        "file": file,
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "width": cam.width,
        "height": cam.height,
        "camera_to_world": [float(x) for x in cam.camera_to_world.as_matrix().ravel()],
    }


def _camera_from_dict(d: dict) -> CameraModel:
    m = np.asarray(d["camera_to_world"], dtype=float).reshape(4, 4)
    return CameraModel(
        d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
        RigidTransform.from_matrix(m),
    )


def write_dataset(ds: ArticulationDataset, directory) -> None:
    ds.validate()
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for t in (0, 1):
        state_dir = root / f"state_{t}"
        (state_dir / "images").mkdir(parents=True, exist_ok=True)
        entries = []
        for i, (cam, img) in enumerate(ds.views[t]):
            rel = f"images/{i:03d}.png"
            Image.fromarray(img, "RGBA").save(state_dir / rel)
            entries.append(_camera_to_dict(cam, rel))
        (state_dir / "cameras.json").write_text(json.dumps(entries, indent=1))
    (root / "scene.json").write_text(
        json.dumps(
            {"aabb_lo": list(map(float, ds.scene_box.lo)),
             "aabb_hi": list(map(float, ds.scene_box.hi))},
            indent=1,
        )
    )
    if ds.gt is not None:
        gt_dir = root / "gt"
        gt_dir.mkdir(exist_ok=True)
        (gt_dir / "motion.json").write_text(json.dumps(motion_to_dict(ds.gt.motion), indent=1))
        if ds.gt.points_static is not None:
            write_ply(gt_dir / "points_static.ply", ds.gt.points_static)
        if ds.gt.points_mobile_t0 is not None:
            write_ply(gt_dir / "points_mobile_t0.ply", ds.gt.points_mobile_t0)
        if ds.gt.scene is not None:
            (gt_dir / "spec.json").write_text(json.dumps(ds.gt.scene.to_dict(), indent=1))


def read_dataset(directory) -> ArticulationDataset:
    root = Path(directory)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    views: dict[int, list] = {}
    for t in (0, 1):
        state_dir = root / f"state_{t}"
        if not state_dir.is_dir():
            raise DatasetError(f"missing state folder {state_dir}")
        cam_file = state_dir / "cameras.json"
        if not cam_file.is_file():
            raise DatasetError(f"missing {cam_file}")
        entries = json.loads(cam_file.read_text())
        views[t] = []
        for entry in entries:
            img_path = state_dir / entry["file"]
            if not img_path.is_file():
                raise DatasetError(f"camera entry without image: {img_path}")
            img = np.asarray(Image.open(img_path).convert("RGBA"))
            views[t].append((_camera_from_dict(entry), img))
    scene_file = root / "scene.json"
    if not scene_file.is_file():
        raise DatasetError(f"missing {scene_file}")
    sc = json.loads(scene_file.read_text())
    box = Aabb(np.asarray(sc["aabb_lo"]), np.asarray(sc["aabb_hi"]))
    gt = None
    gt_dir = root / "gt"
    if gt_dir.is_dir():
        motion_file = gt_dir / "motion.json"
        if not motion_file.is_file():
            raise DatasetError(f"gt block without {motion_file}")
        gt = GroundTruth(motion=motion_from_dict(json.loads(motion_file.read_text())))
        if (gt_dir / "points_static.ply").is_file():
            gt.points_static = read_ply(gt_dir / "points_static.ply")[0]
        if (gt_dir / "points_mobile_t0.ply").is_file():
            gt.points_mobile_t0 = read_ply(gt_dir / "points_mobile_t0.ply")[0]
        if (gt_dir / "spec.json").is_file():
            gt.scene = SceneSpec.from_dict(json.loads((gt_dir / "spec.json").read_text()))
    ds = ArticulationDataset(views, box, gt)
    ds.validate()
    return ds
