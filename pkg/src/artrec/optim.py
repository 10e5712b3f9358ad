"""Training losses and the Adam optimizer.

Each loss returns (value, gradient w.r.t. its direct input); the training
loop assembles per-ray upstream gradients for the renderer from these.
The part-assignment regularizer is binary entropy of the mobile ratio:
low when a ray's opacity is explained almost entirely by one field,
maximal at an even split, so minimizing it pushes each ray's mass into a
single field.  Background rays (no opacity) are excluded — the ratio is
undefined there.

Adam runs through one fused numba kernel regardless of parameter count, so
the scalar reference trace and the 128^3 lattice updates share code paths
bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

CLAMP_EPS = 1e-6

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.99
ADAM_EPS = 1e-15


class DivergenceError(RuntimeError):
    """Non-finite loss or gradient; message carries iteration context."""


def loss_rgb(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over rays of the squared L2 color error; grad w.r.t. pred."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    n = len(pred)
    diff = pred - target
    return float((diff**2).sum() / n), 2.0 * diff / n


def loss_mask(opacity: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Binary cross-entropy of rendered opacity against the 0/1 mask."""
    o = np.clip(np.asarray(opacity, dtype=float), CLAMP_EPS, 1.0 - CLAMP_EPS)
    m = np.asarray(mask, dtype=float)
    n = len(o)
    val = float(-(m * np.log(o) + (1.0 - m) * np.log1p(-o)).sum() / n)
    grad = (o - m) / (o * (1.0 - o)) / n
    # clamped entries sit on the clip plateau: no gradient through them
    grad[(opacity <= CLAMP_EPS) | (opacity >= 1.0 - CLAMP_EPS)] = 0.0
    return val, grad


def loss_prob(mobile_ratio: np.ndarray) -> tuple[float, np.ndarray]:
    """Binary entropy of the mobile ratio, mean over rays where it is
    defined (non-NaN).  Minimal at 0/1, maximal at 0.5: drives each ray's
    opacity into a single field."""
    pm = np.asarray(mobile_ratio, dtype=float)
    ok = np.isfinite(pm)
    grad = np.zeros_like(pm)
    if not ok.any():
        return 0.0, grad
    x = np.clip(pm[ok], CLAMP_EPS, 1.0 - CLAMP_EPS)
    n = int(ok.sum())
    val = float(-(x * np.log(x) + (1.0 - x) * np.log1p(-x)).sum() / n)
    # dH/dx of H = -[x ln x + (1-x) ln(1-x)] is ln((1-x)/x)
    grad[ok] = (np.log1p(-x) - np.log(x)) / n
    return val, grad


def mobile_ratio_backward(
    o_static: np.ndarray, o_mobile: np.ndarray, g_ratio: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Chain dL/dP_m into (dL/dO_s, dL/dO_m) for P_m = O_m / (O_s + O_m)."""
    total = o_static + o_mobile
    safe = np.maximum(total, CLAMP_EPS) ** 2
    g_os = g_ratio * (-o_mobile) / safe
    g_om = g_ratio * o_static / safe
    zero = total <= CLAMP_EPS
    g_os[zero] = 0.0
    g_om[zero] = 0.0
    return g_os, g_om


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @staticmethod
    def zeros_like(params: np.ndarray) -> "AdamState":
        return AdamState(np.zeros_like(params, dtype=float), np.zeros_like(params, dtype=float))


@njit(cache=True)
def _adam_kernel(p, g, m, v, lr, b1, b2, eps, c1, c2):
    for i in range(p.size):
        m[i] = b1 * m[i] + (1.0 - b1) * g[i]
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i]
        p[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
    context: str = "",
) -> None:
    """In-place Adam update with bias correction.

    Raises DivergenceError on non-finite gradients; `context` is included in
    the message so the caller's iteration / parameter group is identifiable.
    """
    g = np.asarray(grads, dtype=float)
    if not np.isfinite(g).all():
        raise DivergenceError(f"non-finite gradient ({context or 'unnamed group'})")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    _adam_kernel(
        params.reshape(-1), np.ascontiguousarray(g).reshape(-1),
        state.m.reshape(-1), state.v.reshape(-1),
        lr, beta1, beta2, eps, c1, c2,
    )


def cosine_lr(it: int, total: int, lr_init: float, lr_final: float) -> float:
    """Cosine decay from lr_init at it=0 to lr_final at it=total-1."""
    if total <= 1:
        return lr_final
    frac = min(max(it / (total - 1), 0.0), 1.0)
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + np.cos(np.pi * frac))
