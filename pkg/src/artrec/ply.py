"""Minimal binary little-endian PLY writer/reader (vertices + triangles)."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_ply(path, vertices: np.ndarray, faces: np.ndarray | None = None) -> None:
    vertices = np.ascontiguousarray(np.asarray(vertices, dtype="<f8"))
    header = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {len(vertices)}",
        "property double x",
        "property double y",
        "property double z",
    ]
    if faces is not None:
        faces = np.ascontiguousarray(np.asarray(faces, dtype="<i4"))
        header += [
            f"element face {len(faces)}",
            "property list uchar int vertex_indices",
        ]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(vertices.tobytes())
        if faces is not None:
            rec = np.empty(len(faces), dtype=[("n", "u1"), ("idx", "<i4", 3)])
            rec["n"] = 3
            rec["idx"] = faces
            f.write(rec.tobytes())


def read_ply(path) -> tuple[np.ndarray, np.ndarray | None]:
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    lines = data[:end].decode("ascii").splitlines()
    n_vert = n_face = 0
    for line in lines:
        if line.startswith("element vertex"):
            n_vert = int(line.split()[-1])
        elif line.startswith("element face"):
            n_face = int(line.split()[-1])
    off = end
    verts = np.frombuffer(data, dtype="<f8", count=3 * n_vert, offset=off).reshape(n_vert, 3)
    off += verts.nbytes
    faces = None
    if n_face:
        rec = np.frombuffer(
            data, dtype=[("n", "u1"), ("idx", "<i4", 3)], count=n_face, offset=off
        )
        faces = rec["idx"].copy()
    return verts.copy(), faces
