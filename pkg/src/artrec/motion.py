"""Joint motion models and their analytic parameter gradients.

A motion describes the FULL displacement of the movable part from state 0
to state 1.  Rendering at a state t queries the mobile field at the
canonical state t*, so points are moved by the fractional motion t -> t*.

Variants:
  * Revolute  -- pivot point + unit quaternion,
  * Prismatic -- unit axis + signed travel distance,
  * FreeSE3   -- unconstrained rigid transform, used only during the
                 motion-type classification pre-fit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    QUAT_IDENTITY,
    RigidTransform,
    quat_from_axis_angle,
    quat_normalize,
    quat_pow,
    quat_to_axis_angle,
    quat_to_matrix,
)

# rotation angle below which a quaternion is treated as the identity when
# extracting an axis (mirrors geometry.NEAR_IDENTITY_ANGLE but on the
# vector-part norm used by the gradient chain)
_TINY_VEC = 1e-8


class NoMotionError(ValueError):
    """Raised when a fitted transform has neither rotation nor translation."""


@dataclass
class Revolute:
    pivot: np.ndarray  # (3,)
    quat: np.ndarray  # (4,) unit, full state-0 -> state-1 rotation

    def __post_init__(self):
        self.pivot = np.asarray(self.pivot, dtype=float)
        self.quat = np.asarray(self.quat, dtype=float)

    @property
    def axis(self) -> np.ndarray:
        return quat_to_axis_angle(self.quat)[0]

    @property
    def angle(self) -> float:
        return quat_to_axis_angle(self.quat)[1]

    def params_vector(self) -> np.ndarray:
        return np.concatenate([self.pivot, self.quat])

    def with_params(self, vec: np.ndarray) -> "Revolute":
        return Revolute(vec[:3].copy(), quat_normalize(vec[3:7]))


@dataclass
class Prismatic:
    axis: np.ndarray  # (3,) unit
    distance: float

    def __post_init__(self):
        self.axis = np.asarray(self.axis, dtype=float)
        self.distance = float(self.distance)

    def params_vector(self) -> np.ndarray:
        return np.concatenate([self.axis, [self.distance]])

    def with_params(self, vec: np.ndarray) -> "Prismatic":
        a = vec[:3]
        return Prismatic(a / np.linalg.norm(a), float(vec[3]))


@dataclass
class FreeSE3:
    transform: RigidTransform

    def params_vector(self) -> np.ndarray:
        return np.concatenate([self.transform.rotation, self.transform.translation])

    def with_params(self, vec: np.ndarray) -> "FreeSE3":
        return FreeSE3(RigidTransform(quat_normalize(vec[:4]), vec[4:7].copy()))


MotionParams = Revolute | Prismatic | FreeSE3


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _screw_decompose(t: RigidTransform):
    """Split a rigid transform into rotation about a pivot plus axial slide."""
    axis, angle = quat_to_axis_angle(t.rotation)
    tau = t.translation
    if angle < _TINY_VEC:
        return axis, 0.0, np.zeros(3), tau
    tau_par = (tau @ axis) * axis
    tau_perp = tau - tau_par
    # pivot solving (I - R) c = tau_perp, minimum norm along the axis
    c = 0.5 * (tau_perp + np.cross(axis, tau_perp) / np.tan(0.5 * angle))
    return axis, angle, c, tau_par


def fractional_transform(m: MotionParams, dt: float) -> RigidTransform:
    """Rigid transform moving points by the fraction `dt` of the full motion.

    Satisfies f(a) o f(b) = f(a+b); f(0) is the identity and f(1) the full
    state-0 -> state-1 motion.
    """
    dt = float(dt)
    if isinstance(m, Revolute):
        q = quat_pow(quat_normalize(m.quat), dt)
        r = quat_to_matrix(q)
        return RigidTransform(q, m.pivot - r @ m.pivot)
    if isinstance(m, Prismatic):
        a = m.axis / np.linalg.norm(m.axis)
        return RigidTransform(QUAT_IDENTITY.copy(), dt * m.distance * a)
    if isinstance(m, FreeSE3):
        # screw interpolation: rotate about the screw pivot, slide along axis
        t = m.transform
        axis, angle, pivot, tau_par = _screw_decompose(
            RigidTransform(quat_normalize(t.rotation), t.translation)
        )
        if angle == 0.0:
            return RigidTransform(QUAT_IDENTITY.copy(), dt * t.translation)
        q = quat_from_axis_angle(axis, angle * dt)
        r = quat_to_matrix(q)
        return RigidTransform(q, pivot - r @ pivot + dt * tau_par)
    raise TypeError(f"unknown motion params {type(m)!r}")


def to_canonical(
    m: MotionParams, t: float, tstar: float, pts: np.ndarray
) -> np.ndarray:
    """Map points sampled at state t to the canonical state t*."""
    return fractional_transform(m, tstar - t).apply(pts)


def to_canonical_dirs(
    m: MotionParams, t: float, tstar: float, dirs: np.ndarray
) -> np.ndarray:
    """Map directions at state t to the canonical state (rotation only)."""
    return fractional_transform(m, tstar - t).apply_dir(dirs)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _accum_rot_grad_p(p: np.ndarray, u: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient of sum_i g_i . R(p) u_i with respect to the unit quaternion p.

    Uses R(p) u = u + 2a (b x u) + 2 b x (b x u) with p = (a, b).  The
    Jacobian in b is J_b = -2a [u]x - 2 [b x u]x - 2 [b]x [u]x (with
    [w]x v = w x v and [w]x^T = -[w]x), so
    J_b^T g = 2a (u x g) + 2 ((b x u) x g) + 2 ((b x g) x u).
    """
    a, b = p[0], p[1:]
    bb = np.broadcast_to(b, u.shape)
    bxu = np.cross(bb, u)
    grad = np.empty(4)
    grad[0] = 2.0 * np.einsum("ni,ni->", g, bxu)
    gb = (
        2.0 * a * np.cross(u, g)
        + 2.0 * np.cross(bxu, g)
        + 2.0 * np.cross(np.cross(bb, g), u)
    )
    grad[1:] = gb.sum(axis=0)
    return grad


def _quat_pow_pullback(q: np.ndarray, s: float, grad_p: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. p = q^s back to a gradient w.r.t. q.

    The chain runs through the half angle psi = atan2(|v|, w) and the axis
    n = v / |v|; both are scale invariant, so q may be the raw (non-unit)
    stored quaternion and the returned ambient gradient both carries the
    1/|q| normalization scale and lies tangent to the sphere through q.
    """
    w, v = q[0], q[1:]
    m = np.linalg.norm(v)
    n2 = w * w + m * m
    if m < _TINY_VEC * np.sqrt(n2):
        # limit: p ~ (1, s v / w); dp/dv = (s / w) I on the vector part
        grad = np.zeros(4)
        grad[1:] = (s / w) * grad_p[1:]
        return grad
    n = v / m
    psi = np.arctan2(m, w)
    dpsi_dq = np.concatenate([[-m], (w / m) * v]) / n2
    sp, cp = np.sin(s * psi), np.cos(s * psi)
    # dp/dpsi = (-s sp, s cp n); dp/dn = (0, sp I)
    dp_dpsi = np.concatenate([[-s * sp], s * cp * n])
    dn_dv = (np.eye(3) - np.outer(n, n)) / m
    grad = (grad_p @ dp_dpsi) * dpsi_dq
    grad[1:] += sp * (dn_dv.T @ grad_p[1:])
    return grad


def motion_backward(
    m: MotionParams,
    t: float,
    tstar: float,
    pts: np.ndarray,
    upstream: np.ndarray,
) -> np.ndarray:
    """Gradient of sum_i upstream_i . to_canonical(m, t, tstar, x_i) w.r.t.
    the motion parameter vector (same layout as params_vector()).

    Quaternion/axis gradients are tangent to the unit-norm constraint, so a
    finite-difference probe of the (internally normalizing) forward matches.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    g = np.atleast_2d(np.asarray(upstream, dtype=float))
    s = float(tstar) - float(t)
    if isinstance(m, Prismatic):
        grad = np.zeros(4)
        gsum = g.sum(axis=0)
        norm = np.linalg.norm(m.axis)
        a = m.axis / norm
        # d(a)/d(axis) = (I - a a^T) / |axis|: tangent projection plus the
        # normalization scale of the stored (not necessarily unit) axis
        grad[:3] = (s * m.distance / norm) * (gsum - (gsum @ a) * a)
        grad[3] = s * (gsum @ a)
        return grad
    if isinstance(m, Revolute):
        grad = np.zeros(7)
        if s == 0.0:
            return grad
        q = quat_normalize(m.quat)
        p = quat_pow(q, s)
        r = quat_to_matrix(p)
        gsum = g.sum(axis=0)
        grad[:3] = gsum - r.T @ gsum
        u = pts - m.pivot
        grad_p = _accum_rot_grad_p(p, u, g)
        grad[3:] = _quat_pow_pullback(np.asarray(m.quat, dtype=float), s, grad_p)
        return grad
    if isinstance(m, FreeSE3):
        grad = np.zeros(7)
        if s == 0.0:
            return grad
        if s not in (1.0, -1.0):
            raise NotImplementedError(
                "FreeSE3 gradients are only defined for whole-step fractions "
                "(the classification pre-fit runs with canonical state 0)"
            )
        q = quat_normalize(m.transform.rotation)
        tau = m.transform.translation
        gsum = g.sum(axis=0)
        if s == 1.0:
            u = pts
            grad[4:] = gsum
        else:  # s == -1: x' = R(q)^-1 (x - tau)
            u = pts - tau
            grad[4:] = -(quat_to_matrix(q) @ gsum)
        p = quat_pow(q, s)
        grad_p = _accum_rot_grad_p(p, u, g)
        grad[:4] = _quat_pow_pullback(
            np.asarray(m.transform.rotation, dtype=float), s, grad_p
        )
        return grad
    raise TypeError(f"unknown motion params {type(m)!r}")


# ---------------------------------------------------------------------------
# classification and initialization
# ---------------------------------------------------------------------------


def rotation_geodesic_angle(q: np.ndarray) -> float:
    """Rotation angle in [0, pi] (double cover folded)."""
    q = quat_normalize(q)
    return 2.0 * np.arccos(np.clip(abs(q[0]), 0.0, 1.0))


def classify_motion_type(
    fitted: FreeSE3, theta_thresh_deg: float = 5.0
) -> Revolute | Prismatic:
    """Turn a free SE(3) pre-fit into an initialized typed joint.

    A rotation angle at or above the threshold yields a revolute joint with
    the pivot recovered as the minimum-norm least-squares solution of
    (I - R) p = translation; otherwise the translation gives a prismatic
    joint.  A transform with neither rotation nor translation is rejected.
    """
    q = quat_normalize(fitted.transform.rotation)
    if q[0] < 0:
        q = -q
    tau = fitted.transform.translation
    angle_deg = np.degrees(rotation_geodesic_angle(q))
    if angle_deg >= theta_thresh_deg:
        r = quat_to_matrix(q)
        pivot, *_ = np.linalg.lstsq(np.eye(3) - r, tau, rcond=1e-6)
        return Revolute(pivot, q)
    d = np.linalg.norm(tau)
    if d < 1e-6:
        raise NoMotionError(
            f"no detectable motion (rotation {angle_deg:.2e} deg, translation {d:.2e})"
        )
    return Prismatic(tau / d, d)


def pivot_min_norm(pivot: np.ndarray, axis: np.ndarray) -> np.ndarray:
    """Project a pivot to the minimum-norm point on its axis line (for
    reporting; the motion itself is invariant to sliding along the axis)."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    pivot = np.asarray(pivot, dtype=float)
    return pivot - (pivot @ axis) * axis


def init_motion(
    motion_type: str, scene_center: np.ndarray, seed: int
) -> MotionParams:
    """Default optimization start: identity motion with a 0.5 degree nudge.

    The nudge breaks the zero-gradient symmetry of an exact identity
    rotation; prismatic joints start axis +z with zero travel.
    """
    rng = np.random.default_rng(seed)
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    q = quat_from_axis_angle(axis, np.radians(0.5))
    if motion_type == "revolute":
        return Revolute(np.asarray(scene_center, dtype=float).copy(), q)
    if motion_type == "prismatic":
        return Prismatic(np.array([0.0, 0.0, 1.0]), 0.0)
    if motion_type == "unknown":
        return FreeSE3(RigidTransform(q, np.zeros(3)))
    raise ValueError(f"unknown motion type {motion_type!r}")


# ---------------------------------------------------------------------------
# serialization (shared with the dataset ground-truth block)
# ---------------------------------------------------------------------------


def motion_to_dict(m: Revolute | Prismatic) -> dict:
    if isinstance(m, Revolute):
        axis, angle = quat_to_axis_angle(m.quat)
        return {
            "type": "revolute",
            "axis": [float(x) for x in axis],
            "pivot": [float(x) for x in m.pivot],
            "degrees": float(np.degrees(angle)),
        }
    if isinstance(m, Prismatic):
        return {
            "type": "prismatic",
            "axis": [float(x) for x in m.axis],
            "pivot": None,
            "distance": float(m.distance),
        }
    raise TypeError("only typed joints are serializable")


def motion_from_dict(d: dict) -> Revolute | Prismatic:
    axis = np.asarray(d["axis"], dtype=float)
    axis = axis / np.linalg.norm(axis)
    if d["type"] == "revolute":
        q = quat_from_axis_angle(axis, np.radians(float(d["degrees"])))
        return Revolute(np.asarray(d["pivot"], dtype=float), q)
    if d["type"] == "prismatic":
        return Prismatic(axis, float(d["distance"]))
    raise ValueError(f"unknown motion type {d['type']!r}")
