"""Signed-distance primitives used by the analytic scene generator.

Shapes are trees of oriented boxes, cylinders, and spheres combined with
unions and differences.  Every node evaluates batched: distances (N,) and
per-point albedo (N, 3), the albedo coming from the closest primitive.
All primitives are 1-Lipschitz, so sphere tracing is safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Aabb, QUAT_IDENTITY, RigidTransform, quat_rotate, quat_to_matrix

SURFACE_TOL = 1e-3  # |sdf| accepted as "on the surface" when sampling points


def _as_pts(pts: np.ndarray) -> np.ndarray:
    return np.atleast_2d(np.asarray(pts, dtype=float))


def _local(pts, center, rotation):
    p = _as_pts(pts) - np.asarray(center, dtype=float)
    if rotation is not None and not np.allclose(rotation, QUAT_IDENTITY):
        p = p @ quat_to_matrix(rotation)  # world -> local is R^T, i.e. p @ R
    return p


def _rotated_aabb(lo, hi, center, rotation):
    corners = np.array(
        [[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])]
    )
    if rotation is not None:
        corners = quat_rotate(rotation, corners)
    corners = corners + np.asarray(center, dtype=float)
    return Aabb(corners.min(axis=0), corners.max(axis=0))


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray = field(default_factory=lambda: np.array([0.7, 0.7, 0.7]))

    def sdf(self, pts):
        p = _as_pts(pts) - np.asarray(self.center, dtype=float)
        return np.linalg.norm(p, axis=-1) - self.radius

    def sdf_color(self, pts):
        d = self.sdf(pts)
        return d, np.broadcast_to(np.asarray(self.albedo, dtype=float), (len(d), 3))

    def bounds(self) -> Aabb:
        c = np.asarray(self.center, dtype=float)
        return Aabb(c - self.radius, c + self.radius)

    def to_dict(self):
        return {
            "kind": "sphere",
            "center": list(map(float, self.center)),
            "radius": float(self.radius),
            "albedo": list(map(float, self.albedo)),
        }


@dataclass
class Box:
    center: np.ndarray
    half: np.ndarray
    albedo: np.ndarray = field(default_factory=lambda: np.array([0.7, 0.7, 0.7]))
    rotation: np.ndarray | None = None  # local->world quaternion

    def sdf(self, pts):
        p = _local(pts, self.center, self.rotation)
        q = np.abs(p) - np.asarray(self.half, dtype=float)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def sdf_color(self, pts):
        d = self.sdf(pts)
        return d, np.broadcast_to(np.asarray(self.albedo, dtype=float), (len(d), 3))

    def bounds(self) -> Aabb:
        h = np.asarray(self.half, dtype=float)
        return _rotated_aabb(-h, h, self.center, self.rotation)

    def to_dict(self):
        d = {
            "kind": "box",
            "center": list(map(float, self.center)),
            "half": list(map(float, self.half)),
            "albedo": list(map(float, self.albedo)),
        }
        if self.rotation is not None:
            d["rotation"] = list(map(float, self.rotation))
        return d


@dataclass
class Cylinder:
    """Capped cylinder along the local z axis."""

    center: np.ndarray
    radius: float
    half_height: float
    albedo: np.ndarray = field(default_factory=lambda: np.array([0.7, 0.7, 0.7]))
    rotation: np.ndarray | None = None

    def sdf(self, pts):
        p = _local(pts, self.center, self.rotation)
        dr = np.linalg.norm(p[:, :2], axis=-1) - self.radius
        dz = np.abs(p[:, 2]) - self.half_height
        q = np.stack([dr, dz], axis=-1)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def sdf_color(self, pts):
        d = self.sdf(pts)
        return d, np.broadcast_to(np.asarray(self.albedo, dtype=float), (len(d), 3))

    def bounds(self) -> Aabb:
        r, h = self.radius, self.half_height
        return _rotated_aabb(np.array([-r, -r, -h]), np.array([r, r, h]), self.center, self.rotation)

    def to_dict(self):
        d = {
            "kind": "cylinder",
            "center": list(map(float, self.center)),
            "radius": float(self.radius),
            "half_height": float(self.half_height),
            "albedo": list(map(float, self.albedo)),
        }
        if self.rotation is not None:
            d["rotation"] = list(map(float, self.rotation))
        return d


@dataclass
class Union:
    children: list

    def sdf(self, pts):
        return np.min([c.sdf(pts) for c in self.children], axis=0)

    def sdf_color(self, pts):
        ds, cols = zip(*(c.sdf_color(pts) for c in self.children))
        ds = np.stack(ds)
        cols = np.stack(cols)
        best = np.argmin(ds, axis=0)
        idx = np.arange(ds.shape[1])
        return ds[best, idx], cols[best, idx]

    def bounds(self) -> Aabb:
        bs = [c.bounds() for c in self.children]
        return Aabb(
            np.min([b.lo for b in bs], axis=0), np.max([b.hi for b in bs], axis=0)
        )

    def to_dict(self):
        return {"kind": "union", "children": [c.to_dict() for c in self.children]}


@dataclass
class Difference:
    """Solid `base` with `cut` removed; cut faces keep the base albedo."""

    base: object
    cut: object

    def sdf(self, pts):
        return np.maximum(self.base.sdf(pts), -self.cut.sdf(pts))

    def sdf_color(self, pts):
        d_base, col = self.base.sdf_color(pts)
        return np.maximum(d_base, -self.cut.sdf(pts)), col

    def bounds(self) -> Aabb:
        return self.base.bounds()

    def to_dict(self):
        return {"kind": "difference", "base": self.base.to_dict(), "cut": self.cut.to_dict()}


@dataclass
class Posed:
    """A child shape moved by a rigid transform (evaluates the child at the
    inverse-transformed point; rigid motion preserves signed distance)."""

    child: object
    transform: RigidTransform

    def sdf(self, pts):
        return self.child.sdf(self.transform.inverse().apply(_as_pts(pts)))

    def sdf_color(self, pts):
        return self.child.sdf_color(self.transform.inverse().apply(_as_pts(pts)))

    def bounds(self) -> Aabb:
        b = self.child.bounds()
        return _rotated_aabb(
            b.lo - b.center, b.hi - b.center,
            self.transform.apply(b.center),
            self.transform.rotation,
        )


def shape_from_dict(d: dict):
    kind = d["kind"]
    rot = np.asarray(d["rotation"], dtype=float) if "rotation" in d else None
    if kind == "sphere":
        return Sphere(np.asarray(d["center"]), d["radius"], np.asarray(d["albedo"]))
    if kind == "box":
        return Box(np.asarray(d["center"]), np.asarray(d["half"]), np.asarray(d["albedo"]), rot)
    if kind == "cylinder":
        return Cylinder(
            np.asarray(d["center"]), d["radius"], d["half_height"], np.asarray(d["albedo"]), rot
        )
    if kind == "union":
        return Union([shape_from_dict(c) for c in d["children"]])
    if kind == "difference":
        return Difference(shape_from_dict(d["base"]), shape_from_dict(d["cut"]))
    raise ValueError(f"unknown shape kind {kind!r}")


# ---------------------------------------------------------------------------
# sphere tracing and surface sampling
# ---------------------------------------------------------------------------


def sphere_trace(
    shape,
    origins: np.ndarray,
    dirs: np.ndarray,
    near: np.ndarray,
    far: np.ndarray,
    max_steps: int = 256,
    hit_eps: float = 1e-4,
):
    """March rays against `shape`.

    Returns (hit (N,) bool, depth (N,), n_unconverged).  Rays that fail to
    converge within max_steps count as misses and are tallied separately.
    """
    origins = _as_pts(origins)
    dirs = _as_pts(dirs)
    n = len(origins)
    t = np.asarray(near, dtype=float).copy()
    far = np.asarray(far, dtype=float)
    active = t < far
    hit = np.zeros(n, dtype=bool)
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        p = origins[idx] + t[idx, None] * dirs[idx]
        d = shape.sdf(p)
        newly_hit = d < hit_eps
        hit[idx[newly_hit]] = True
        t[idx] += np.maximum(d, 0.0)
        active[idx] = ~newly_hit & (t[idx] < far[idx])
    n_unconverged = int(active.sum())
    hit[active] = False
    return hit, t, n_unconverged


def sdf_normal(shape, pts: np.ndarray, eps: float = 5e-5) -> np.ndarray:
    """Central-difference surface normals."""
    pts = _as_pts(pts)
    n = np.empty_like(pts)
    for i in range(3):
        off = np.zeros(3)
        off[i] = eps
        n[:, i] = shape.sdf(pts + off) - shape.sdf(pts - off)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    return n / np.maximum(norm, 1e-12)


def sample_part_points(shape, n: int, seed: int, max_proposals: int = 10**7) -> np.ndarray:
    """Draw n approximately area-uniform points on the surface of `shape`
    (|sdf| <= SURFACE_TOL).

    Proposals uniform in the padded bounding box are kept only when they land
    in a thin band around the zero level set (band volume ~ area x thickness,
    so acceptance is area-proportional), then projected along the SDF
    gradient.  Deterministic for a given seed.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    box = shape.bounds()
    scale = float(box.extent.max())
    pad = 0.1 * scale
    band = 0.01 * scale
    lo, hi = box.lo - pad, box.hi + pad
    out = []
    got = 0
    proposed = 0
    chunk = max(16 * n, 65536)
    while got < n:
        if proposed >= max_proposals:
            raise ValueError(
                f"no surface found after {proposed} proposals (degenerate shape?)"
            )
        p = rng.uniform(lo, hi, (chunk, 3))
        proposed += chunk
        p = p[np.abs(shape.sdf(p)) <= band]
        for _ in range(8):
            d = shape.sdf(p)
            if np.all(np.abs(d) <= SURFACE_TOL):
                break
            p = p - d[:, None] * sdf_normal(shape, p)
        p = p[np.abs(shape.sdf(p)) <= SURFACE_TOL]
        out.append(p)
        got += len(p)
    return np.concatenate(out)[:n]
