"""Voxel grid to triangle mesh (marching cubes) and Wavefront OBJ I/O."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._mc_table import TRIANGLES

# corner offsets along array axes (0, 1, 2)
CORNERS = np.array([
    (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
    (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
])
EDGES = np.array([
    (0, 1), (1, 2), (2, 3), (3, 0),
    (4, 5), (5, 6), (6, 7), (7, 4),
    (0, 4), (1, 5), (2, 6), (3, 7),
])


def _padded_table() -> np.ndarray:
    table = np.full((256, 5, 3), -1, dtype=np.int64)
    for case, edges in enumerate(TRIANGLES):
        for t in range(len(edges) // 3):
            table[case, t] = edges[3 * t:3 * t + 3]
    return table


_TABLE = _padded_table()


@dataclass
class TriMesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def edges(self) -> np.ndarray:
        """Undirected edges, one row per (triangle, side), sorted endpoints."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.sort(e, axis=1)

    def euler_characteristic(self) -> int:
        used = np.unique(self.triangles)
        n_edges = len(np.unique(self.edges(), axis=0)) if len(self.triangles) else 0
        return len(used) - n_edges + len(self.triangles)

    def is_watertight(self) -> bool:
        """Every edge shared by exactly two triangles."""
        if self.is_empty:
            return False
        _, counts = np.unique(self.edges(), axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def area(self) -> float:
        v = self.vertices[self.triangles]
        return float(0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1).sum())

    def volume(self) -> float:
        """Signed enclosed volume via the divergence theorem (positive when outward)."""
        v = self.vertices[self.triangles]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)


def marching_cubes(volume: np.ndarray, iso: float = 0.5, smooth: bool = False, smooth_iterations: int = 2,
                   smooth_lambda: float = 0.5) -> TriMesh:
    """Triangulate the ``iso`` level set of a 3-D scalar grid.

    Values >= ``iso`` count as inside. Vertices live in array-index
    coordinates, are shared between neighbouring cubes and are ordered
    by the grid edge they sit on; triangles face outward.
    """
    v = np.asarray(volume, dtype=np.float64)
    if v.ndim != 3 or min(v.shape) < 2:
        raise ValueError(f"marching_cubes needs a 3-D grid with every dim >= 2, got {v.shape}")
    below = v < iso
    nx, ny, nz = (s - 1 for s in v.shape)
    case = np.zeros((nx, ny, nz), dtype=np.int64)
    for bit, (a, b, c) in enumerate(CORNERS):
        case |= below[a:a + nx, b:b + ny, c:c + nz].astype(np.int64) << bit
    active = np.nonzero((case != 0) & (case != 255))
    if len(active[0]) == 0:
        return TriMesh()
    base = np.stack(active, axis=1)  # M x 3 cube origins
    tris = _TABLE[case[active]]  # M x 5 x 3 edge ids
    cube_of = np.repeat(np.arange(len(base)), 5)
    tris = tris.reshape(-1, 3)
    keep = tris[:, 0] >= 0
    tris, cube_of = tris[keep], cube_of[keep]

    # global key of each (cube, edge): lower endpoint grid index * 3 + axis
    ca = CORNERS[EDGES[:, 0]]
    cb = CORNERS[EDGES[:, 1]]
    lower = np.minimum(ca, cb)
    axis = np.argmax(np.abs(cb - ca), axis=1)
    pts = base[cube_of][:, None, :] + lower[tris]  # T x 3 corners x 3 coords
    flat = np.ravel_multi_index(tuple(pts[..., k] for k in range(3)), v.shape)
    keys = flat * 3 + axis[tris]
    uniq, inverse = np.unique(keys.ravel(), return_inverse=True)
    faces = inverse.reshape(-1, 3)

    p0 = np.stack(np.unravel_index(uniq // 3, v.shape), axis=1)
    ax = uniq % 3
    p1 = p0.copy()
    p1[np.arange(len(p1)), ax] += 1
    v0 = v[tuple(p0.T)]
    v1 = v[tuple(p1.T)]
    denom = v1 - v0
    t = np.where(denom != 0, (iso - v0) / np.where(denom != 0, denom, 1.0), 0.5)
    verts = p0 + t[:, None] * (p1 - p0)

    mesh = _drop_degenerate(TriMesh(verts, faces))
    if smooth:
        mesh = laplacian_smooth(mesh, smooth_iterations, smooth_lambda)
    return mesh


def _drop_degenerate(mesh: TriMesh) -> TriMesh:
    if mesh.is_empty:
        return mesh
    v = mesh.vertices[mesh.triangles]
    area2 = np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    t = mesh.triangles
    distinct = (t[:, 0] != t[:, 1]) & (t[:, 1] != t[:, 2]) & (t[:, 0] != t[:, 2])
    keep = distinct & (area2 > 1e-12)
    if keep.all():
        return mesh
    t = t[keep]
    used, remap = np.unique(t, return_inverse=True)
    return TriMesh(mesh.vertices[used], remap.reshape(-1, 3))


def laplacian_smooth(mesh: TriMesh, iterations: int = 2, lam: float = 0.5) -> TriMesh:
    """Move each vertex ``lam`` of the way towards its neighbour average."""
    if mesh.is_empty:
        return mesh
    e = np.unique(mesh.edges(), axis=0)
    n = len(mesh.vertices)
    deg = np.bincount(e.ravel(), minlength=n).astype(np.float64)
    verts = mesh.vertices.copy()
    for _ in range(iterations):
        acc = np.zeros_like(verts)
        np.add.at(acc, e[:, 0], verts[e[:, 1]])
        np.add.at(acc, e[:, 1], verts[e[:, 0]])
        avg = np.where(deg[:, None] > 0, acc / np.maximum(deg, 1)[:, None], verts)
        verts = verts + lam * (avg - verts)
    return TriMesh(verts, mesh.triangles.copy())


# ---------------------------------------------------------------------------
# OBJ


def format_obj(mesh: TriMesh) -> str:
    lines = ["# voxelrec mesh"]
    lines += [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    return "\n".join(lines) + "\n"


def write_obj(mesh: TriMesh, path) -> None:
    Path(path).write_text(format_obj(mesh), encoding="ascii", newline="\n")


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TriMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
