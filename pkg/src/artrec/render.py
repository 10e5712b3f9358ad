"""Composite volume rendering of a static and a mobile radiance grid.

A ray cast at articulation state t is sampled once; the static grid is
queried at the sample points directly while the mobile grid is queried at
the same points mapped to the canonical state t*.  Both densities share a
single extinction event per interval:

    alpha_i = 1 - exp(-(sigma_s_i + sigma_m_i) delta_i)

and the color contribution of each field is split in proportion to its
density.  This is the unique discretization that collapses exactly to the
standard single-field quadrature when either density vanishes.  Rendering
composites over a white background, and the per-field opacity sums O_s, O_m
give the mobile ratio P_m = O_m / (O_s + O_m) used by the part-assignment
regularizer.

The backward pass is an exact reverse of the quadrature with a suffix-sum
over the transmittance chain.  Sample depths are treated as constants
(stop-gradient through the sampler); motion parameters receive gradients
through the canonical-space query positions instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .geometry import Aabb, CameraModel, clip_rays_aabb
from .grid import GridGradient, RadianceGrid, grid_query, grid_query_backward
from .motion import MotionParams, motion_backward, to_canonical

BACKGROUND = 1.0  # white
EPS_BG = 1e-6  # opacity below this leaves the mobile ratio undefined
SIGMA_SUM_TINY = 1e-12  # density split guard (50/50 below this)
DEDUPE_EPS = 1e-9


@dataclass
class RenderConfig:
    n_coarse: int = 64
    n_fine: int = 64
    jitter: bool = True
    tstar: float = 0.5


@dataclass
class RenderOutput:
    color: np.ndarray  # (N, 3) in [0, 1]
    opacity_static: np.ndarray  # (N,)
    opacity_mobile: np.ndarray  # (N,)
    mobile_ratio: np.ndarray  # (N,), NaN where opacity < EPS_BG

    @property
    def opacity(self) -> np.ndarray:
        return self.opacity_static + self.opacity_mobile


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def sample_coarse(near, far, n_c: int, rng=None) -> np.ndarray:
    """Stratified depths, one per equal sub-interval; midpoints when rng is
    None (deterministic test mode)."""
    near = np.atleast_1d(np.asarray(near, dtype=float))
    far = np.atleast_1d(np.asarray(far, dtype=float))
    n = len(near)
    if rng is None:
        off = np.full((n, n_c), 0.5)
    else:
        off = rng.uniform(0.0, 1.0, (n, n_c))
    w = (far - near)[:, None] / n_c
    return near[:, None] + (np.arange(n_c) + off) * w


def sample_fine(near, far, weights, n_f: int, rng=None) -> np.ndarray:
    """Inverse-CDF depths from the piecewise-constant PDF over the coarse
    strata.  All-zero weight rows fall back to a uniform PDF."""
    near = np.atleast_1d(np.asarray(near, dtype=float))
    far = np.atleast_1d(np.asarray(far, dtype=float))
    weights = np.atleast_2d(np.asarray(weights, dtype=float))
    n, n_c = weights.shape
    weights = np.maximum(weights, 0.0)
    total = weights.sum(axis=1, keepdims=True)
    flat = total[:, 0] <= 0.0
    weights = np.where(flat[:, None], 1.0, weights)
    pdf = weights / weights.sum(axis=1, keepdims=True)
    cdf = np.cumsum(pdf, axis=1)
    cdf[:, -1] = 1.0
    if rng is None:
        u = np.broadcast_to((np.arange(n_f) + 0.5) / n_f, (n, n_f)).copy()
    else:
        u = rng.uniform(0.0, 1.0, (n, n_f))
    # per-row searchsorted via a strided flat view (cdf values stay in [0, 1])
    row = 2.0 * np.arange(n)[:, None]
    idx = np.searchsorted((cdf + row).ravel(), (u + row).ravel(), side="right")
    idx = np.minimum(idx - 2 * np.arange(n)[:, None].repeat(n_f, 1).reshape(-1), n_c - 1)
    idx = np.maximum(idx, 0).reshape(n, n_f)
    cdf_lo = np.where(idx > 0, np.take_along_axis(cdf, np.maximum(idx - 1, 0), 1), 0.0)
    bin_mass = np.take_along_axis(pdf, idx, 1)
    frac = np.where(bin_mass > 0, (u - cdf_lo) / np.maximum(bin_mass, 1e-300), 0.5)
    w = (far - near)[:, None] / n_c
    return near[:, None] + (idx + np.clip(frac, 0.0, 1.0)) * w


def merge_depths(coarse: np.ndarray, fine: np.ndarray) -> np.ndarray:
    """Sorted union of the two sample sets.  Near-coincident depths are
    separated by DEDUPE_EPS nudges so intervals stay strictly positive
    (cheaper than dropping them and keeps the arrays rectangular; a 1e-9
    interval carries no visible weight)."""
    d = np.sort(np.concatenate([coarse, fine], axis=1), axis=1)
    return d + DEDUPE_EPS * np.arange(d.shape[1])


def depth_intervals(depths: np.ndarray, far) -> np.ndarray:
    """delta_i = h_{i+1} - h_i, closing the last interval at the ray's far."""
    far = np.atleast_1d(np.asarray(far, dtype=float))
    return np.diff(np.concatenate([depths, far[:, None]], axis=1), axis=1).clip(0.0)


# ---------------------------------------------------------------------------
# composite quadrature (numba)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _composite_fwd(sig_s, rgb_s, sig_m, rgb_m, delta, out_c, out_os, out_om):
    n, s = sig_s.shape
    for r in range(n):
        trans = 1.0
        osum = 0.0
        msum = 0.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        for i in range(s):
            ssum = sig_s[r, i] + sig_m[r, i]
            a = 1.0 - np.exp(-ssum * delta[r, i])
            if ssum < SIGMA_SUM_TINY:
                u = 0.5
            else:
                u = sig_s[r, i] / ssum
            ws = trans * a * u
            wm = trans * a * (1.0 - u)
            osum += ws
            msum += wm
            c0 += ws * rgb_s[r, i, 0] + wm * rgb_m[r, i, 0]
            c1 += ws * rgb_s[r, i, 1] + wm * rgb_m[r, i, 1]
            c2 += ws * rgb_s[r, i, 2] + wm * rgb_m[r, i, 2]
            trans *= 1.0 - a
        bg = (1.0 - osum - msum) * BACKGROUND
        out_c[r, 0] = c0 + bg
        out_c[r, 1] = c1 + bg
        out_c[r, 2] = c2 + bg
        out_os[r] = osum
        out_om[r] = msum


@njit(cache=True)
def _composite_bwd(
    sig_s, rgb_s, sig_m, rgb_m, delta,
    g_c, g_os, g_om,
    out_gsig_s, out_grgb_s, out_gsig_m, out_grgb_m,
):
    n, s = sig_s.shape
    trans_buf = np.empty(s)
    a_buf = np.empty(s)
    u_buf = np.empty(s)
    gws_buf = np.empty(s)
    gwm_buf = np.empty(s)
    coef_buf = np.empty(s)  # G_i = gws_i u_i + gwm_i (1 - u_i)
    for r in range(n):
        # dL/dw includes the background term: C = sum w c + (1 - sum w) bg
        trans = 1.0
        suffix = 0.0  # sum_i G_i T_i a_i, consumed front to back below
        for i in range(s):
            ssum = sig_s[r, i] + sig_m[r, i]
            a = 1.0 - np.exp(-ssum * delta[r, i])
            if ssum < SIGMA_SUM_TINY:
                u = 0.5
            else:
                u = sig_s[r, i] / ssum
            gws = (
                g_c[r, 0] * (rgb_s[r, i, 0] - BACKGROUND)
                + g_c[r, 1] * (rgb_s[r, i, 1] - BACKGROUND)
                + g_c[r, 2] * (rgb_s[r, i, 2] - BACKGROUND)
                + g_os[r]
            )
            gwm = (
                g_c[r, 0] * (rgb_m[r, i, 0] - BACKGROUND)
                + g_c[r, 1] * (rgb_m[r, i, 1] - BACKGROUND)
                + g_c[r, 2] * (rgb_m[r, i, 2] - BACKGROUND)
                + g_om[r]
            )
            coef = gws * u + gwm * (1.0 - u)
            trans_buf[i] = trans
            a_buf[i] = a
            u_buf[i] = u
            gws_buf[i] = gws
            gwm_buf[i] = gwm
            coef_buf[i] = coef
            suffix += coef * trans * a
            ws = trans * a * u
            wm = trans * a * (1.0 - u)
            out_grgb_s[r, i, 0] = g_c[r, 0] * ws
            out_grgb_s[r, i, 1] = g_c[r, 1] * ws
            out_grgb_s[r, i, 2] = g_c[r, 2] * ws
            out_grgb_m[r, i, 0] = g_c[r, 0] * wm
            out_grgb_m[r, i, 1] = g_c[r, 1] * wm
            out_grgb_m[r, i, 2] = g_c[r, 2] * wm
            trans *= 1.0 - a
        for i in range(s):
            a = a_buf[i]
            trans = trans_buf[i]
            u = u_buf[i]
            # suffix becomes sum_{j>i} G_j T_j a_j
            suffix -= coef_buf[i] * trans * a
            # d a_i / d sigma_sum = delta (1-a); the chain through later T_j
            # contributes -suffix / (1-a), and the (1-a) factors cancel
            g_ssum = delta[r, i] * (coef_buf[i] * trans * (1.0 - a) - suffix)
            ssum = sig_s[r, i] + sig_m[r, i]
            if ssum < SIGMA_SUM_TINY:
                du_ds = 0.0
                du_dm = 0.0
            else:
                du_ds = sig_m[r, i] / (ssum * ssum)
                du_dm = -sig_s[r, i] / (ssum * ssum)
            g_u = trans * a * (gws_buf[i] - gwm_buf[i])
            out_gsig_s[r, i] = g_ssum + g_u * du_ds
            out_gsig_m[r, i] = g_ssum + g_u * du_dm


def composite_rays(sig_s, rgb_s, sig_m, rgb_m, delta) -> RenderOutput:
    sig_s = np.ascontiguousarray(sig_s, dtype=float)
    sig_m = np.ascontiguousarray(sig_m, dtype=float)
    rgb_s = np.ascontiguousarray(rgb_s, dtype=float)
    rgb_m = np.ascontiguousarray(rgb_m, dtype=float)
    delta = np.ascontiguousarray(delta, dtype=float)
    n = sig_s.shape[0]
    color = np.empty((n, 3))
    o_s = np.empty(n)
    o_m = np.empty(n)
    _composite_fwd(sig_s, rgb_s, sig_m, rgb_m, delta, color, o_s, o_m)
    total = o_s + o_m
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(total > EPS_BG, o_m / np.maximum(total, EPS_BG), np.nan)
    return RenderOutput(color, o_s, o_m, ratio)


def composite_rays_backward(sig_s, rgb_s, sig_m, rgb_m, delta, g_color, g_os, g_om):
    """Per-sample upstream gradients for both field queries.

    Returns (g_sig_s, g_rgb_s, g_sig_m, g_rgb_m); callers feed these into
    grid_query_backward.  Upstream g_os / g_om are gradients w.r.t. the
    per-field opacity sums (losses on total opacity or the mobile ratio are
    expressed through them by the caller).
    """
    sig_s = np.ascontiguousarray(sig_s, dtype=float)
    sig_m = np.ascontiguousarray(sig_m, dtype=float)
    rgb_s = np.ascontiguousarray(rgb_s, dtype=float)
    rgb_m = np.ascontiguousarray(rgb_m, dtype=float)
    delta = np.ascontiguousarray(delta, dtype=float)
    g_color = np.ascontiguousarray(g_color, dtype=float)
    g_os = np.ascontiguousarray(g_os, dtype=float)
    g_om = np.ascontiguousarray(g_om, dtype=float)
    g_sig_s = np.empty_like(sig_s)
    g_sig_m = np.empty_like(sig_m)
    g_rgb_s = np.empty_like(rgb_s)
    g_rgb_m = np.empty_like(rgb_m)
    _composite_bwd(
        sig_s, rgb_s, sig_m, rgb_m, delta, g_color, g_os, g_om,
        g_sig_s, g_rgb_s, g_sig_m, g_rgb_m,
    )
    return g_sig_s, g_rgb_s, g_sig_m, g_rgb_m


# ---------------------------------------------------------------------------
# full ray pipeline
# ---------------------------------------------------------------------------


@dataclass
class RayContext:
    """Saved forward state for render_rays_backward."""

    origins: np.ndarray
    dirs: np.ndarray
    hit: np.ndarray  # rays that intersect the scene box
    pts: np.ndarray  # (H, S, 3) sample points at state t
    pts_canonical: np.ndarray  # same points mapped to t*
    delta: np.ndarray
    sig_s: np.ndarray
    rgb_s: np.ndarray
    sig_m: np.ndarray
    rgb_m: np.ndarray
    motion: MotionParams
    t: float
    tstar: float


def render_rays(
    static_grid: RadianceGrid,
    mobile_grid: RadianceGrid,
    motion: MotionParams,
    t: float,
    origins: np.ndarray,
    dirs: np.ndarray,
    box: Aabb,
    cfg: RenderConfig = RenderConfig(),
    rng=None,
) -> tuple[RenderOutput, RayContext]:
    """Coarse -> importance -> composite for a batch of rays.

    Rays that miss the scene box render as background (white, opacity 0,
    mobile ratio undefined).  Pass rng=None for jitter-free determinism.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    n = len(origins)
    near, far, hit = clip_rays_aabb(origins, dirs, box)
    color = np.ones((n, 3)) * BACKGROUND
    o_s = np.zeros(n)
    o_m = np.zeros(n)
    ratio = np.full(n, np.nan)
    h = int(hit.sum())
    s_total = cfg.n_coarse + cfg.n_fine
    empty = lambda *shape: np.zeros(shape)
    ctx = RayContext(
        origins, dirs, hit,
        empty(h, s_total, 3), empty(h, s_total, 3), empty(h, s_total),
        empty(h, s_total), empty(h, s_total, 3), empty(h, s_total), empty(h, s_total, 3),
        motion, float(t), cfg.tstar,
    )
    if h:
        o_h, d_h = origins[hit], dirs[hit]
        near_h, far_h = near[hit], far[hit]
        jrng = rng if cfg.jitter else None
        coarse = sample_coarse(near_h, far_h, cfg.n_coarse, jrng)
        if cfg.n_fine > 0:
            cpts = o_h[:, None, :] + coarse[..., None] * d_h[:, None, :]
            flatc = cpts.reshape(-1, 3)
            sig_sc, _ = grid_query(static_grid, flatc)
            sig_mc, _ = grid_query(
                mobile_grid, to_canonical(motion, t, cfg.tstar, flatc)
            )
            ssum = (sig_sc + sig_mc).reshape(h, cfg.n_coarse)
            dlt = depth_intervals(coarse, far_h)
            alpha = 1.0 - np.exp(-ssum * dlt)
            trans = np.cumprod(1.0 - alpha + 1e-12, axis=1)
            trans = np.concatenate([np.ones((h, 1)), trans[:, :-1]], axis=1)
            fine = sample_fine(near_h, far_h, trans * alpha, cfg.n_fine, jrng)
            depths = merge_depths(coarse, fine)
        else:
            depths = coarse
        delta = depth_intervals(depths, far_h)
        pts = o_h[:, None, :] + depths[..., None] * d_h[:, None, :]
        flat = pts.reshape(-1, 3)
        flat_c = to_canonical(motion, t, cfg.tstar, flat)
        sig_s, rgb_s = grid_query(static_grid, flat)
        sig_m, rgb_m = grid_query(mobile_grid, flat_c)
        s = depths.shape[1]
        ctx.pts = pts
        ctx.pts_canonical = flat_c.reshape(h, s, 3)
        ctx.delta = delta
        ctx.sig_s = sig_s.reshape(h, s)
        ctx.rgb_s = rgb_s.reshape(h, s, 3)
        ctx.sig_m = sig_m.reshape(h, s)
        ctx.rgb_m = rgb_m.reshape(h, s, 3)
        out_h = composite_rays(ctx.sig_s, ctx.rgb_s, ctx.sig_m, ctx.rgb_m, delta)
        color[hit] = out_h.color
        o_s[hit] = out_h.opacity_static
        o_m[hit] = out_h.opacity_mobile
        ratio[hit] = out_h.mobile_ratio
    return RenderOutput(color, o_s, o_m, ratio), ctx


def render_rays_backward(
    static_grid: RadianceGrid,
    mobile_grid: RadianceGrid,
    ctx: RayContext,
    g_color: np.ndarray,
    g_os: np.ndarray,
    g_om: np.ndarray,
    grad_static: GridGradient | None = None,
    grad_mobile: GridGradient | None = None,
    want_motion: bool = True,
    skip_static: bool = False,
):
    """Backpropagate upstream per-ray gradients.

    Accumulates into grad_static / grad_mobile (allocated when omitted) and
    returns (grad_static, grad_mobile, motion_grad or None).  The motion
    gradient flows through the canonical-space positions of the mobile
    queries only; static queries see the untransformed points.  skip_static
    leaves grad_static untouched (used by the motion-only backward pass,
    which needs just the mobile positional gradients).
    """
    hit = ctx.hit
    if grad_static is None:
        grad_static = GridGradient.zeros_like(static_grid)
    if grad_mobile is None:
        grad_mobile = GridGradient.zeros_like(mobile_grid)
    if not hit.any():
        zero = np.zeros_like(ctx.motion.params_vector()) if want_motion else None
        return grad_static, grad_mobile, zero
    g_color = np.atleast_2d(np.asarray(g_color, dtype=float))[hit]
    g_os = np.atleast_1d(np.asarray(g_os, dtype=float))[hit]
    g_om = np.atleast_1d(np.asarray(g_om, dtype=float))[hit]
    g_sig_s, g_rgb_s, g_sig_m, g_rgb_m = composite_rays_backward(
        ctx.sig_s, ctx.rgb_s, ctx.sig_m, ctx.rgb_m, ctx.delta, g_color, g_os, g_om
    )
    h, s = ctx.sig_s.shape
    flat = ctx.pts.reshape(-1, 3)
    flat_c = ctx.pts_canonical.reshape(-1, 3)
    if not skip_static:
        grid_query_backward(
            static_grid, flat, g_sig_s.ravel(), g_rgb_s.reshape(-1, 3), out=grad_static
        )
    _, dldx_c = grid_query_backward(
        mobile_grid, flat_c, g_sig_m.ravel(), g_rgb_m.reshape(-1, 3), out=grad_mobile
    )
    motion_grad = None
    if want_motion:
        motion_grad = motion_backward(ctx.motion, ctx.t, ctx.tstar, flat, dldx_c)
    return grad_static, grad_mobile, motion_grad


def render_image(
    static_grid: RadianceGrid,
    mobile_grid: RadianceGrid,
    motion: MotionParams,
    t: float,
    cam: CameraModel,
    box: Aabb,
    cfg: RenderConfig = RenderConfig(),
    rng=None,
    chunk: int = 8192,
):
    """Render a full camera view; returns (rgba float (H, W, 4), mobile-ratio
    map (H, W) with NaN on background)."""
    hgt, wid = cam.height, cam.width
    uu, vv = np.meshgrid(np.arange(wid) + 0.5, np.arange(hgt) + 0.5)
    dirs = cam.pixel_dirs(np.stack([uu.ravel(), vv.ravel()], axis=-1))
    origins = np.broadcast_to(cam.center, dirs.shape)
    colors = []
    alphas = []
    ratios = []
    for i in range(0, len(dirs), chunk):
        out, _ = render_rays(
            static_grid, mobile_grid, motion, t,
            origins[i : i + chunk], dirs[i : i + chunk], box, cfg, rng,
        )
        colors.append(out.color)
        alphas.append(out.opacity)
        ratios.append(out.mobile_ratio)
    rgba = np.concatenate(
        [np.concatenate(colors), np.concatenate(alphas)[:, None]], axis=1
    )
    return rgba.reshape(hgt, wid, 4), np.concatenate(ratios).reshape(hgt, wid)
