"""Triangle-mesh extraction from density grids, sampling, and PLY I/O.

Meshes come out of marching cubes on the activated density lattice; the
iso-level is an absolute density, so the default threshold of 5.0 sits far
above the near-zero initialization and far below painted/fitted interiors
(~500).  Vertices are reported in world coordinates.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from skimage.measure import marching_cubes

from .grid import RadianceGrid, softplus

MESH_DENSITY_THRESHOLD = 5.0

PLY_MAGIC = b"ply"


@dataclass
class TriMesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (
            self.faces.min() < 0 or self.faces.max() >= len(self.vertices)
        ):
            raise ValueError("face indices out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)

    def transformed(self, transform) -> "TriMesh":
        return TriMesh(transform.apply(self.vertices), self.faces.copy())


def _drop_degenerate(verts: np.ndarray, faces: np.ndarray) -> TriMesh:
    mesh = TriMesh(verts, faces)
    if len(mesh.faces):
        mesh.faces = mesh.faces[mesh.triangle_areas() > 0.0]
    return mesh


def extract_mesh(
    grid: RadianceGrid, threshold: float = MESH_DENSITY_THRESHOLD
) -> TriMesh:
    """Marching cubes on the activated density at iso-level `threshold`.

    An empty level set (threshold outside the density range) yields an
    empty mesh rather than an error.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    vol = softplus(grid.raw_density)
    if not (vol.min() < threshold < vol.max()):
        return TriMesh()
    lo = np.asarray(grid.bounds.lo, dtype=float)
    hi = np.asarray(grid.bounds.hi, dtype=float)
    cell = (hi - lo) / (grid.resolution - 1)
    verts, faces, _, _ = marching_cubes(vol, level=threshold, spacing=tuple(cell))
    return _drop_degenerate(verts + lo, faces)


def sample_mesh_points(mesh: TriMesh, n: int, seed) -> np.ndarray:
    """Area-uniform surface samples: triangles by area, then barycentric."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.triangle_areas()
    tri = rng.choice(len(mesh.faces), size=n, p=areas / areas.sum())
    a, b, c = (mesh.vertices[mesh.faces[tri, i]] for i in range(3))
    r1, r2 = rng.random(n), rng.random(n)
    flip = r1 + r2 > 1.0
    r1[flip], r2[flip] = 1.0 - r1[flip], 1.0 - r2[flip]
    return a + r1[:, None] * (b - a) + r2[:, None] * (c - a)


def write_ply(mesh: TriMesh, path) -> None:
    """Binary little-endian PLY (float vertices, int face indices)."""
    path = Path(path)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {len(mesh.faces)}\n"
        "property list uchar int vertex_indices\nend_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(mesh.vertices.astype("<f4").tobytes())
        for tri in mesh.faces.astype("<i4"):
            f.write(struct.pack("<B", 3) + tri.tobytes())


def read_ply(path) -> TriMesh:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(PLY_MAGIC):
        raise ValueError(f"{path}: not a PLY file")
    end = data.index(b"end_header\n") + len(b"end_header\n")
    nv = nf = 0
    for line in data[:end].decode("ascii").splitlines():
        if line.startswith("element vertex"):
            nv = int(line.split()[-1])
        elif line.startswith("element face"):
            nf = int(line.split()[-1])
    verts = np.frombuffer(data, dtype="<f4", count=3 * nv, offset=end)
    off = end + 12 * nv
    faces = np.zeros((nf, 3), dtype=np.int64)
    for i in range(nf):
        (cnt,) = struct.unpack_from("<B", data, off)
        if cnt != 3:
            raise ValueError(f"{path}: non-triangular face")
        faces[i] = np.frombuffer(data, dtype="<i4", count=3, offset=off + 1)
        off += 1 + 12
    return TriMesh(verts.reshape(-1, 3).astype(float), faces)
