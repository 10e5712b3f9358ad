"""Analytic articulated test scenes and their ground-truth renderer.

A SceneSpec pairs a static part with a movable part (given at state 0) and
the full state-0 -> state-1 joint motion.  Images are produced by sphere
tracing the combined SDF with flat headlight shading on a white background,
so masks are exactly binary and appearance is view independent.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import Aabb, CameraModel, clip_rays_aabb, quat_from_axis_angle
from .motion import MotionParams, Prismatic, Revolute, fractional_transform, motion_from_dict, motion_to_dict
from .sdf import Box, Cylinder, Difference, Posed, Union, sdf_normal, shape_from_dict, sphere_trace

log = logging.getLogger(__name__)

# sphere tracing parameters: robust for 1-Lipschitz SDFs at desk scale
TRACE_MAX_STEPS = 256
TRACE_HIT_EPS = 1e-4
AMBIENT = 0.25  # headlight shading floor so unlit faces stay visible


@dataclass
class PartShape:
    shape: object  # SDF node, or None for an empty part
    role: str  # "static" | "movable"


@dataclass
class SceneSpec:
    static: PartShape
    movable: PartShape
    motion: MotionParams  # full motion, state 0 -> state 1
    preset: str = "custom"
    expected_hard: bool = False

    def movable_at(self, t: float):
        """Movable part SDF posed at articulation state t."""
        if self.movable.shape is None:
            return None
        tf = fractional_transform(self.motion, float(t))
        return Posed(self.movable.shape, tf)

    def combined_at(self, t: float):
        parts = [p for p in (self.static.shape, self.movable_at(t)) if p is not None]
        if not parts:
            return None
        if len(parts) == 1:
            return parts[0]
        return Union(parts)

    def bounds(self, pad: float = 0.15) -> Aabb:
        """Box enclosing the scene across the whole articulation range."""
        boxes = []
        if self.static.shape is not None:
            boxes.append(self.static.shape.bounds())
        for t in (0.0, 0.5, 1.0):
            m = self.movable_at(t)
            if m is not None:
                boxes.append(m.bounds())
        if not boxes:
            return Aabb(np.full(3, -1.0), np.full(3, 1.0))
        lo = np.min([b.lo for b in boxes], axis=0) - pad
        hi = np.max([b.hi for b in boxes], axis=0) + pad
        return Aabb(lo, hi)

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "expected_hard": self.expected_hard,
            "static": None if self.static.shape is None else self.static.shape.to_dict(),
            "movable": None if self.movable.shape is None else self.movable.shape.to_dict(),
            "motion": motion_to_dict(self.motion),
        }

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        return SceneSpec(
            static=PartShape(
                None if d["static"] is None else shape_from_dict(d["static"]), "static"
            ),
            movable=PartShape(
                None if d["movable"] is None else shape_from_dict(d["movable"]), "movable"
            ),
            motion=motion_from_dict(d["motion"]),
            preset=d.get("preset", "custom"),
            expected_hard=bool(d.get("expected_hard", False)),
        )


def render_gt(spec: SceneSpec, t: float, cam: CameraModel) -> np.ndarray:
    """Sphere-trace a ground-truth RGBA view of the scene at state t.

    Returns uint8 (height, width, 4).  Hits get headlight-shaded albedo and
    alpha 255; misses are white with alpha 0, so the alpha channel is an
    exact binary object mask.
    """
    shape = spec.combined_at(t)
    h, w = cam.height, cam.width
    img = np.zeros((h, w, 4), dtype=np.uint8)
    img[..., :3] = 255
    if shape is None:
        return img
    uu, vv = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    uv = np.stack([uu.ravel(), vv.ravel()], axis=-1)
    dirs = cam.pixel_dirs(uv)
    origins = np.broadcast_to(cam.center, dirs.shape)
    box = spec.bounds()
    near, far, inbox = clip_rays_aabb(origins, dirs, box)
    near = np.where(inbox, near, np.inf)
    hit, depth, n_unconverged = sphere_trace(
        shape, origins, dirs, near, far, max_steps=TRACE_MAX_STEPS, hit_eps=TRACE_HIT_EPS
    )
    if n_unconverged:
        log.warning("render_gt: %d rays did not converge (treated as misses)", n_unconverged)
    if hit.any():
        p = origins[hit] + depth[hit, None] * dirs[hit]
        _, albedo = shape.sdf_color(p)
        normal = sdf_normal(shape, p)
        lambert = np.maximum(-np.einsum("ni,ni->n", normal, dirs[hit]), 0.0)
        shade = AMBIENT + (1.0 - AMBIENT) * lambert
        rgb = np.clip(albedo * shade[:, None], 0.0, 1.0)
        flat = img.reshape(-1, 4)
        flat[hit, :3] = np.round(rgb * 255).astype(np.uint8)
        flat[hit, 3] = 255
    return img


# ---------------------------------------------------------------------------
# presets (toy versions of common articulated-object categories)
# ---------------------------------------------------------------------------

_BLUE = np.array([0.25, 0.35, 0.75])
_RED = np.array([0.80, 0.25, 0.20])
_YELLOW = np.array([0.85, 0.70, 0.20])
_GREEN = np.array([0.30, 0.65, 0.35])
_GRAY = np.array([0.55, 0.55, 0.60])
_TEAL = np.array([0.20, 0.60, 0.60])

_Z = np.array([0.0, 0.0, 1.0])
_X = np.array([1.0, 0.0, 0.0])
_Y = np.array([0.0, 1.0, 0.0])


def _revolute(axis, pivot, degrees) -> Revolute:
    return Revolute(np.asarray(pivot, dtype=float), quat_from_axis_angle(axis, np.radians(degrees)))


def _laptop() -> SceneSpec:
    base = Box(np.array([0.0, 0.0, -0.15]), np.array([0.35, 0.25, 0.03]), _GRAY)
    lid = Box(np.array([0.0, 0.0, -0.09]), np.array([0.35, 0.25, 0.02]), _RED)
    # hinge along the back edge; negative angle swings the lid up and open
    return SceneSpec(
        PartShape(base, "static"),
        PartShape(lid, "movable"),
        _revolute(_X, [0.0, 0.25, -0.09], -60.0),
        preset="laptop",
    )


def _fridge() -> SceneSpec:
    body = Box(np.array([0.0, 0.06, 0.0]), np.array([0.25, 0.20, 0.40]), _BLUE)
    door = Box(np.array([0.0, -0.17, 0.0]), np.array([0.25, 0.03, 0.40]), _YELLOW)
    return SceneSpec(
        PartShape(body, "static"),
        PartShape(door, "movable"),
        _revolute(_Z, [0.25, -0.14, 0.0], 75.0),
        preset="fridge",
    )


def _foldchair() -> SceneSpec:
    leg1 = Box(
        np.array([0.0, -0.12, -0.2]), np.array([0.25, 0.025, 0.28]), _GRAY,
        rotation=quat_from_axis_angle(_X, np.radians(20.0)),
    )
    leg2 = Box(
        np.array([0.0, 0.12, -0.2]), np.array([0.25, 0.025, 0.28]), _GRAY,
        rotation=quat_from_axis_angle(_X, np.radians(-20.0)),
    )
    seat = Box(np.array([0.0, 0.0, 0.1]), np.array([0.26, 0.24, 0.02]), _GREEN)
    return SceneSpec(
        PartShape(Union([leg1, leg2]), "static"),
        PartShape(seat, "movable"),
        _revolute(_X, [0.0, -0.24, 0.1], 80.0),
        preset="foldchair",
    )


def _blade() -> SceneSpec:
    handle = Box(np.array([-0.25, 0.0, 0.0]), np.array([0.2, 0.06, 0.04]), _TEAL)
    blade = Box(np.array([0.1, 0.0, 0.0]), np.array([0.22, 0.04, 0.012]), _GRAY)
    return SceneSpec(
        PartShape(handle, "static"),
        PartShape(blade, "movable"),
        Prismatic(_X, 0.25),
        preset="blade",
    )


def _drawer() -> SceneSpec:
    shell = Box(np.array([0.0, 0.05, 0.0]), np.array([0.30, 0.25, 0.22]), _BLUE)
    cavity = Box(np.array([0.0, -0.02, 0.02]), np.array([0.26, 0.25, 0.16]), _BLUE)
    drawer = Box(np.array([0.0, -0.02, 0.0]), np.array([0.25, 0.21, 0.13]), _YELLOW)
    # slides outward along -y by 0.3 scene units
    return SceneSpec(
        PartShape(Difference(shell, cavity), "static"),
        PartShape(drawer, "movable"),
        Prismatic(-_Y, 0.3),
        preset="drawer",
    )


def _washer() -> SceneSpec:
    body = Box(np.array([0.0, 0.05, 0.0]), np.array([0.28, 0.22, 0.30]), _GRAY)
    porthole = Cylinder(
        np.array([0.0, -0.14, 0.0]), 0.16, 0.05, _GRAY,
        rotation=quat_from_axis_angle(_X, np.radians(90.0)),
    )
    door = Cylinder(
        np.array([0.0, -0.20, 0.0]), 0.18, 0.025, _TEAL,
        rotation=quat_from_axis_angle(_X, np.radians(90.0)),
    )
    # front-loader door hinged on its left edge; the recessed porthole leaves
    # overlap between the parts, which is what makes this preset noisy
    return SceneSpec(
        PartShape(Difference(body, porthole), "static"),
        PartShape(door, "movable"),
        _revolute(_Z, [-0.18, -0.2, 0.0], 70.0),
        preset="washer",
    )


def _door_closed() -> SceneSpec:
    # failure archetype: the door barely opens, so the movable part is
    # occluded (nearly flush with the cabinet) in both states
    frame = Box(np.array([0.0, 0.05, 0.0]), np.array([0.30, 0.22, 0.35]), _BLUE)
    cavity = Box(np.array([0.0, -0.02, 0.0]), np.array([0.26, 0.22, 0.31]), _BLUE)
    door = Box(np.array([0.0, -0.145, 0.0]), np.array([0.255, 0.022, 0.305]), _BLUE)
    return SceneSpec(
        PartShape(Difference(frame, cavity), "static"),
        PartShape(door, "movable"),
        _revolute(_Z, [0.26, -0.13, 0.0], 8.0),
        preset="door_closed",
        expected_hard=True,
    )


def _symmetric() -> SceneSpec:
    # failure archetype: the movable part rotates about its own symmetry
    # axis, so no appearance change constrains the rotation angle
    base = Box(np.array([0.0, 0.0, -0.25]), np.array([0.3, 0.3, 0.05]), _GRAY)
    knob = Cylinder(np.array([0.0, 0.0, 0.0]), 0.15, 0.18, _RED)
    return SceneSpec(
        PartShape(base, "static"),
        PartShape(knob, "movable"),
        _revolute(_Z, [0.0, 0.0, 0.0], 45.0),
        preset="symmetric",
        expected_hard=True,
    )


PRESETS = {
    "laptop": _laptop,
    "fridge": _fridge,
    "foldchair": _foldchair,
    "blade": _blade,
    "drawer": _drawer,
    "washer": _washer,
    "door_closed": _door_closed,
    "symmetric": _symmetric,
}


def make_preset(name: str) -> SceneSpec:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(
            f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}"
        ) from None
