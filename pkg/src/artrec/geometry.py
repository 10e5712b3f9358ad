"""3D math core: quaternions, rigid transforms, cameras, rays, boxes.

Conventions (fixed for the whole package):
  * quaternions are stored (w, x, y, z) and kept unit-norm,
  * coordinates are right-handed, points are column vectors,
  * cameras look down +z in their own frame, +x right, +y down,
  * pixel coordinates (u, v) are continuous; the center of pixel
    (i, j) is (i + 0.5, j + 0.5).

Everything here is a pure function on immutable values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Below this rotation angle (radians) the rotation axis is numerically
# meaningless and axis extraction returns the +z axis with angle 0.
NEAR_IDENTITY_ANGLE = 1e-8

# Offset applied to the near bound of ray/box intersections so that rays
# starting on the box surface do not immediately re-hit it.
RAY_EPS = 1e-4


# ---------------------------------------------------------------------------
# quaternions (w, x, y, z) as float64 arrays of shape (4,)
# ---------------------------------------------------------------------------

QUAT_IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("cannot normalize a zero quaternion")
    return q / n


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    """Unit quaternion for a rotation of `angle` radians about a unit axis."""
    axis = np.asarray(axis, dtype=float)
    if abs(np.linalg.norm(axis) - 1.0) > 1e-6:
        raise ValueError(f"axis must be unit length, got norm {np.linalg.norm(axis)}")
    half = 0.5 * float(angle)
    q = np.empty(4)
    q[0] = np.cos(half)
    q[1:] = np.sin(half) * axis
    return q


def quat_to_axis_angle(q: np.ndarray) -> tuple[np.ndarray, float]:
    """Inverse of quat_from_axis_angle; angle is in [0, 2*pi).

    Near the identity the axis is undefined; we return (+z, 0).
    """
    q = np.asarray(q, dtype=float)
    m = np.linalg.norm(q[1:])
    angle = 2.0 * np.arctan2(m, q[0])
    if angle < NEAR_IDENTITY_ANGLE:
        return np.array([0.0, 0.0, 1.0]), 0.0
    return q[1:] / m, angle


def quat_pow(q: np.ndarray, s: float) -> np.ndarray:
    """Rotation with the same axis as q and angle scaled by s.

    quat_pow(q, 1) == q, quat_pow(q, 0) == identity.  Near-identity input
    returns the identity (the axis is undefined below NEAR_IDENTITY_ANGLE).
    """
    axis, angle = quat_to_axis_angle(q)
    if angle == 0.0:
        return QUAT_IDENTITY.copy()
    return quat_from_axis_angle(axis, angle * float(s))


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) v (shape (3,) or (N, 3)) by unit quaternion q."""
    return np.asarray(v, dtype=float) @ quat_to_matrix(q).T


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (w >= 0 branch chosen)."""
    m = np.asarray(m, dtype=float)
    t = np.trace(m)
    if t > 0:
        r = np.sqrt(1.0 + t)
        w = 0.5 * r
        s = 0.5 / r
        q = np.array(
            [w, (m[2, 1] - m[1, 2]) * s, (m[0, 2] - m[2, 0]) * s, (m[1, 0] - m[0, 1]) * s]
        )
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        r = np.sqrt(1.0 + m[i, i] - m[j, j] - m[k, k])
        s = 0.5 / r
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) * s
        q[1 + i] = 0.5 * r
        q[1 + j] = (m[j, i] + m[i, j]) * s
        q[1 + k] = (m[k, i] + m[i, k]) * s
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


# ---------------------------------------------------------------------------
# rigid transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (unit quaternion) followed by a translation."""

    rotation: np.ndarray  # (4,) quaternion (w, x, y, z)
    translation: np.ndarray  # (3,)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(QUAT_IDENTITY.copy(), np.zeros(3))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return quat_rotate(self.rotation, pts) + self.translation

    def apply_dir(self, dirs: np.ndarray) -> np.ndarray:
        """Rotation part only (for directions)."""
        return quat_rotate(self.rotation, dirs)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self @ other)(x) = self(other(x))."""
        return RigidTransform(
            quat_normalize(quat_mul(self.rotation, other.rotation)),
            quat_rotate(self.rotation, other.translation) + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        qinv = quat_conjugate(self.rotation)
        return RigidTransform(qinv, -quat_rotate(qinv, self.translation))

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.rotation)
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return RigidTransform(matrix_to_quat(m[:3, :3]), m[:3, 3].copy())


# ---------------------------------------------------------------------------
# axis-aligned boxes and rays
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Aabb:
    lo: np.ndarray  # (3,)
    hi: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))
        if np.any(self.lo > self.hi):
            raise ValueError("Aabb min corner must be <= max corner componentwise")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=-1)


@dataclass
class Ray:
    origin: np.ndarray  # (3,)
    direction: np.ndarray  # (3,) unit
    near: float | None = None
    far: float | None = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.direction = np.asarray(self.direction, dtype=float)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if self.near is not None and self.far is not None and not (
            0 <= self.near < self.far
        ):
            raise ValueError("require 0 <= near < far")

    def at(self, h):
        return self.origin + np.multiply.outer(np.asarray(h, dtype=float), self.direction)


def clip_ray_aabb(ray: Ray, box: Aabb) -> tuple[float, float] | None:
    """Slab test; returns the (near, far) interval or None on a miss.

    The near bound is clamped to RAY_EPS so a ray starting on the box
    surface does not self-intersect.
    """
    interval = clip_rays_aabb(
        ray.origin[None, :], ray.direction[None, :], box
    )
    if not interval[2][0]:
        return None
    return float(interval[0][0]), float(interval[1][0])


def clip_rays_aabb(
    origins: np.ndarray, dirs: np.ndarray, box: Aabb
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched slab test. Returns (near (N,), far (N,), hit (N,) bool)."""
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (box.lo - origins) * inv
        t1 = (box.hi - origins) * inv
    tlo = np.minimum(t0, t1)
    thi = np.maximum(t0, t1)
    # rays parallel to a slab: inside -> (-inf, inf), outside -> empty
    par = dirs == 0.0
    inside = (origins >= box.lo) & (origins <= box.hi)
    tlo = np.where(par, np.where(inside, -np.inf, np.inf), tlo)
    thi = np.where(par, np.where(inside, np.inf, -np.inf), thi)
    tmin = tlo.max(axis=-1)
    tmax = thi.min(axis=-1)
    near = np.maximum(tmin, RAY_EPS)
    hit = (tmax > near) & np.isfinite(tmax)
    return near, tmax, hit


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------


@dataclass
class CameraModel:
    """Pinhole camera: intrinsics in pixels plus a camera-to-world pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    camera_to_world: RigidTransform

    @property
    def center(self) -> np.ndarray:
        return self.camera_to_world.translation

    @property
    def forward(self) -> np.ndarray:
        return quat_rotate(self.camera_to_world.rotation, np.array([0.0, 0.0, 1.0]))

    def pixel_dirs(self, uv: np.ndarray) -> np.ndarray:
        """World-space unit ray directions for continuous pixel coords (N, 2)."""
        uv = np.atleast_2d(np.asarray(uv, dtype=float))
        d_cam = np.stack(
            [
                (uv[:, 0] - self.cx) / self.fx,
                (uv[:, 1] - self.cy) / self.fy,
                np.ones(len(uv)),
            ],
            axis=-1,
        )
        d_world = self.camera_to_world.apply_dir(d_cam)
        return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)

    def project(self, pts: np.ndarray) -> np.ndarray:
        """World points (N, 3) to continuous pixel coords (N, 2)."""
        p_cam = self.camera_to_world.inverse().apply(np.atleast_2d(pts))
        return np.stack(
            [
                self.fx * p_cam[:, 0] / p_cam[:, 2] + self.cx,
                self.fy * p_cam[:, 1] / p_cam[:, 2] + self.cy,
            ],
            axis=-1,
        )


def camera_ray(cam: CameraModel, uv: tuple[float, float]) -> Ray:
    """Ray through the continuous pixel coordinate (u, v).

    Near/far are left unset; fill them with clip_ray_aabb against the
    scene bounds.
    """
    u, v = uv
    if not (0 <= u < cam.width and 0 <= v < cam.height):
        raise ValueError(f"pixel ({u}, {v}) outside image {cam.width}x{cam.height}")
    d = cam.pixel_dirs(np.array([[u, v]]))[0]
    return Ray(cam.center.copy(), d)


def look_at_camera(
    center: np.ndarray,
    target: np.ndarray,
    fx: float,
    fy: float,
    width: int,
    height: int,
    world_up: np.ndarray | None = None,
) -> CameraModel:
    """Camera at `center` looking at `target`, principal point centered."""
    center = np.asarray(center, dtype=float)
    target = np.asarray(target, dtype=float)
    if world_up is None:
        world_up = np.array([0.0, 0.0, 1.0])
    z = target - center
    z = z / np.linalg.norm(z)
    x = np.cross(z, world_up)
    if np.linalg.norm(x) < 1e-8:  # looking straight along world_up
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    rot = np.stack([x, y, z], axis=-1)
    pose = RigidTransform(matrix_to_quat(rot), center)
    return CameraModel(fx, fy, width / 2.0, height / 2.0, width, height, pose)
