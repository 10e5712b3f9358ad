"""Explicit radiance volumes: dense trilinear density + color lattices.

A RadianceGrid stores raw (pre-activation) values at R^3 lattice vertices
spanning an axis-aligned box.  A query trilinearly interpolates the raw
lattices and then activates: softplus for density (>= 0), logistic for
color ((0,1)^3).  Out-of-bounds queries return sigma = 0, black.  The
backward pass distributes upstream gradients over the 8 enclosing vertices
and also returns dL/dx, which is what lets motion parameters receive
gradients through sample positions.

Hot loops are serial numba kernels: deterministic accumulation order and
roughly an order of magnitude over vectorized numpy scatter-adds.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .geometry import Aabb

SIGMA_INIT = 0.1
INIT_NOISE = 1e-6  # raw-space jitter; keeps grids seed-distinct but sigma ~ SIGMA_INIT
CHECKPOINT_MAGIC = b"ARGRID1\n"


def softplus(v):
    v = np.asarray(v, dtype=float)
    return np.where(v > 30.0, v, np.log1p(np.exp(np.minimum(v, 30.0))))


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return np.where(y > 30.0, y, np.log(np.expm1(np.clip(y, 1e-12, 30.0))))


def logistic(v):
    return 1.0 / (1.0 + np.exp(-np.asarray(v, dtype=float)))


def logit(p):
    p = np.clip(np.asarray(p, dtype=float), 1e-4, 1.0 - 1e-4)
    return np.log(p / (1.0 - p))


@dataclass
class RadianceGrid:
    resolution: int  # lattice vertices per axis
    bounds: Aabb
    raw_density: np.ndarray  # (R, R, R) float64
    raw_color: np.ndarray  # (R, R, R, 3) float64

    def copy(self) -> "RadianceGrid":
        return RadianceGrid(
            self.resolution, self.bounds, self.raw_density.copy(), self.raw_color.copy()
        )

    def _norm_params(self):
        lo = self.bounds.lo
        inv = (self.resolution - 1) / self.bounds.extent
        return lo, inv


@dataclass
class GridGradient:
    density: np.ndarray  # (R, R, R)
    color: np.ndarray  # (R, R, R, 3)

    @staticmethod
    def zeros_like(grid: RadianceGrid) -> "GridGradient":
        return GridGradient(
            np.zeros_like(grid.raw_density), np.zeros_like(grid.raw_color)
        )

    def add_(self, other: "GridGradient") -> None:
        self.density += other.density
        self.color += other.color


def grid_init(resolution: int, bounds: Aabb, seed) -> RadianceGrid:
    """Near-uniform grid: sigma ~ SIGMA_INIT everywhere, color ~ 0.5."""
    if resolution < 2:
        raise ValueError("grid resolution must be at least 2")
    rng = np.random.default_rng(seed)
    base = float(softplus_inv(SIGMA_INIT))
    shape = (resolution,) * 3
    raw_d = base + INIT_NOISE * rng.standard_normal(shape)
    raw_c = INIT_NOISE * rng.standard_normal(shape + (3,))  # logit(0.5) = 0
    return RadianceGrid(resolution, bounds, raw_d, raw_c)


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def _tri_fwd(raw_d, raw_c, lo, inv, r, xs, out_sigma, out_rgb):
    n = xs.shape[0]
    for k in range(n):
        u = (xs[k, 0] - lo[0]) * inv[0]
        v = (xs[k, 1] - lo[1]) * inv[1]
        w = (xs[k, 2] - lo[2]) * inv[2]
        if u < 0.0 or v < 0.0 or w < 0.0 or u > r - 1.0 or v > r - 1.0 or w > r - 1.0:
            out_sigma[k] = 0.0
            out_rgb[k, 0] = 0.0
            out_rgb[k, 1] = 0.0
            out_rgb[k, 2] = 0.0
            continue
        i0 = min(int(u), r - 2)
        j0 = min(int(v), r - 2)
        k0 = min(int(w), r - 2)
        fu = u - i0
        fv = v - j0
        fw = w - k0
        sd = 0.0
        sc0 = 0.0
        sc1 = 0.0
        sc2 = 0.0
        for di in range(2):
            wi = fu if di == 1 else 1.0 - fu
            for dj in range(2):
                wj = fv if dj == 1 else 1.0 - fv
                for dk in range(2):
                    wk = fw if dk == 1 else 1.0 - fw
                    wt = wi * wj * wk
                    sd += wt * raw_d[i0 + di, j0 + dj, k0 + dk]
                    sc0 += wt * raw_c[i0 + di, j0 + dj, k0 + dk, 0]
                    sc1 += wt * raw_c[i0 + di, j0 + dj, k0 + dk, 1]
                    sc2 += wt * raw_c[i0 + di, j0 + dj, k0 + dk, 2]
        if sd > 30.0:
            out_sigma[k] = sd
        else:
            out_sigma[k] = np.log1p(np.exp(sd))
        out_rgb[k, 0] = 1.0 / (1.0 + np.exp(-sc0))
        out_rgb[k, 1] = 1.0 / (1.0 + np.exp(-sc1))
        out_rgb[k, 2] = 1.0 / (1.0 + np.exp(-sc2))


@njit(cache=True)
def _tri_bwd(raw_d, raw_c, lo, inv, r, xs, up_sigma, up_rgb, gd, gc, dldx):
    n = xs.shape[0]
    for k in range(n):
        u = (xs[k, 0] - lo[0]) * inv[0]
        v = (xs[k, 1] - lo[1]) * inv[1]
        w = (xs[k, 2] - lo[2]) * inv[2]
        dldx[k, 0] = 0.0
        dldx[k, 1] = 0.0
        dldx[k, 2] = 0.0
        if u < 0.0 or v < 0.0 or w < 0.0 or u > r - 1.0 or v > r - 1.0 or w > r - 1.0:
            continue
        i0 = min(int(u), r - 2)
        j0 = min(int(v), r - 2)
        k0 = min(int(w), r - 2)
        fu = u - i0
        fv = v - j0
        fw = w - k0
        # interpolated raw values (needed for activation derivatives)
        sd = 0.0
        sc0 = 0.0
        sc1 = 0.0
        sc2 = 0.0
        for di in range(2):
            wi = fu if di == 1 else 1.0 - fu
            for dj in range(2):
                wj = fv if dj == 1 else 1.0 - fv
                for dk in range(2):
                    wk = fw if dk == 1 else 1.0 - fw
                    wt = wi * wj * wk
                    sd += wt * raw_d[i0 + di, j0 + dj, k0 + dk]
                    sc0 += wt * raw_c[i0 + di, j0 + dj, k0 + dk, 0]
                    sc1 += wt * raw_c[i0 + di, j0 + dj, k0 + dk, 1]
                    sc2 += wt * raw_c[i0 + di, j0 + dj, k0 + dk, 2]
        # activation derivatives
        dsig = 1.0 / (1.0 + np.exp(-sd))  # d softplus / d raw
        a0 = 1.0 / (1.0 + np.exp(-sc0))
        a1 = 1.0 / (1.0 + np.exp(-sc1))
        a2 = 1.0 / (1.0 + np.exp(-sc2))
        g_raw_d = up_sigma[k] * dsig
        g_raw_c0 = up_rgb[k, 0] * a0 * (1.0 - a0)
        g_raw_c1 = up_rgb[k, 1] * a1 * (1.0 - a1)
        g_raw_c2 = up_rgb[k, 2] * a2 * (1.0 - a2)
        for di in range(2):
            wi = fu if di == 1 else 1.0 - fu
            si = 1.0 if di == 1 else -1.0
            for dj in range(2):
                wj = fv if dj == 1 else 1.0 - fv
                sj = 1.0 if dj == 1 else -1.0
                for dk in range(2):
                    wk = fw if dk == 1 else 1.0 - fw
                    sk = 1.0 if dk == 1 else -1.0
                    wt = wi * wj * wk
                    rd = raw_d[i0 + di, j0 + dj, k0 + dk]
                    rc0 = raw_c[i0 + di, j0 + dj, k0 + dk, 0]
                    rc1 = raw_c[i0 + di, j0 + dj, k0 + dk, 1]
                    rc2 = raw_c[i0 + di, j0 + dj, k0 + dk, 2]
                    gd[i0 + di, j0 + dj, k0 + dk] += wt * g_raw_d
                    gc[i0 + di, j0 + dj, k0 + dk, 0] += wt * g_raw_c0
                    gc[i0 + di, j0 + dj, k0 + dk, 1] += wt * g_raw_c1
                    gc[i0 + di, j0 + dj, k0 + dk, 2] += wt * g_raw_c2
                    # d(interpolant)/d(normalized coord) per axis
                    accum = (
                        g_raw_d * rd + g_raw_c0 * rc0 + g_raw_c1 * rc1 + g_raw_c2 * rc2
                    )
                    dldx[k, 0] += si * wj * wk * accum
                    dldx[k, 1] += wi * sj * wk * accum
                    dldx[k, 2] += wi * wj * sk * accum
        dldx[k, 0] *= inv[0]
        dldx[k, 1] *= inv[1]
        dldx[k, 2] *= inv[2]


# ---------------------------------------------------------------------------
# public query API
# ---------------------------------------------------------------------------


def grid_query(grid: RadianceGrid, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched query: x (N, 3) -> (sigma (N,), rgb (N, 3))."""
    x = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=float)))
    lo, inv = grid._norm_params()
    sigma = np.empty(len(x))
    rgb = np.empty((len(x), 3))
    _tri_fwd(
        grid.raw_density, grid.raw_color,
        np.ascontiguousarray(lo), np.ascontiguousarray(inv),
        grid.resolution, x, sigma, rgb,
    )
    return sigma, rgb


def grid_query_backward(
    grid: RadianceGrid,
    x: np.ndarray,
    up_sigma: np.ndarray,
    up_rgb: np.ndarray,
    out: GridGradient | None = None,
) -> tuple[GridGradient, np.ndarray]:
    """Accumulate dL/d(raw lattices) and return dL/dx (N, 3).

    `out` lets callers accumulate several batches into one buffer; a fresh
    zeroed buffer is allocated when omitted.
    """
    x = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=float)))
    up_sigma = np.ascontiguousarray(np.asarray(up_sigma, dtype=float))
    up_rgb = np.ascontiguousarray(np.atleast_2d(np.asarray(up_rgb, dtype=float)))
    if out is None:
        out = GridGradient.zeros_like(grid)
    lo, inv = grid._norm_params()
    dldx = np.empty((len(x), 3))
    _tri_bwd(
        grid.raw_density, grid.raw_color,
        np.ascontiguousarray(lo), np.ascontiguousarray(inv),
        grid.resolution, x, up_sigma, up_rgb, out.density, out.color, dldx,
    )
    return out, dldx


# ---------------------------------------------------------------------------
# painting from analytic shapes (test oracles + baseline)
# ---------------------------------------------------------------------------


def lattice_points(grid: RadianceGrid) -> np.ndarray:
    """World coordinates of all lattice vertices, shape (R, R, R, 3)."""
    r = grid.resolution
    axes = [np.linspace(grid.bounds.lo[i], grid.bounds.hi[i], r) for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1)


def paint_from_shape(
    grid: RadianceGrid,
    shape,
    sigma_max: float = 500.0,
    sigma_min: float = 1e-4,
    ramp_cells: float = 0.3,
) -> None:
    """Overwrite the lattices with an occupancy profile of an analytic SDF.

    Density ramps from sigma_min outside to sigma_max inside over a fraction
    of a cell, which keeps rendered masks tight while still giving marching
    cubes a clean crossing; color is the shape's albedo at each vertex (the
    closest-primitive albedo extends off-surface).
    """
    pts = lattice_points(grid).reshape(-1, 3)
    d, albedo = shape.sdf_color(pts)
    cell = float(grid.bounds.extent.max()) / (grid.resolution - 1)
    occ = logistic(-d / (ramp_cells * cell))
    sigma = sigma_min + (sigma_max - sigma_min) * occ
    r = grid.resolution
    grid.raw_density[...] = softplus_inv(sigma).reshape(r, r, r)
    grid.raw_color[...] = logit(albedo).reshape(r, r, r, 3)


# ---------------------------------------------------------------------------
# checkpoint chunk
# ---------------------------------------------------------------------------


def write_grid(grid: RadianceGrid, path) -> None:
    header = json.dumps(
        {
            "resolution": grid.resolution,
            "aabb_lo": list(map(float, grid.bounds.lo)),
            "aabb_hi": list(map(float, grid.bounds.hi)),
            "density_activation": "softplus",
            "color_activation": "logistic",
            "dtype": "<f8",
        }
    ).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(np.ascontiguousarray(grid.raw_density, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(grid.raw_color, dtype="<f8").tobytes())


def read_grid(path) -> RadianceGrid:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not a radiance-grid checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off : off + hlen].decode())
    off += hlen
    r = int(header["resolution"])
    raw_d = np.frombuffer(data, dtype="<f8", count=r**3, offset=off).reshape(r, r, r)
    off += raw_d.nbytes
    raw_c = np.frombuffer(data, dtype="<f8", count=3 * r**3, offset=off).reshape(r, r, r, 3)
    return RadianceGrid(
        r,
        Aabb(np.asarray(header["aabb_lo"]), np.asarray(header["aabb_hi"])),
        raw_d.copy(),
        raw_c.copy(),
    )
