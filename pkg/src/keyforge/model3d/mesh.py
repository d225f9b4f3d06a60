"""Indexed triangle meshes and their closed-surface diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components


@dataclass
class TriMesh:
    """Vertices in mm, shape (n, 3); triangles as CCW-outward index triples, shape (m, 3)."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    def __len__(self) -> int:
        return len(self.triangles)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def corners(self) -> np.ndarray:
        """Triangle soup, shape (m, 3, 3)."""
        return self.vertices[self.triangles]

    def flipped(self) -> "TriMesh":
        return TriMesh(self.vertices.copy(), self.triangles[:, ::-1].copy())

    @staticmethod
    def concatenate(meshes) -> "TriMesh":
        verts, tris, offset = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + offset)
            offset += len(m.vertices)
        if not verts:
            return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        return TriMesh(np.concatenate(verts), np.concatenate(tris))


@dataclass(frozen=True)
class MeshDiagnostics:
    watertight: bool
    volume_mm3: float
    euler: int
    degenerate_triangles: int

    def to_dict(self) -> dict:
        return {
            "watertight": self.watertight,
            "volume_mm3": self.volume_mm3,
            "euler": self.euler,
            "degenerate_triangles": self.degenerate_triangles,
        }


def box_mesh(size=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> TriMesh:
    """Axis-aligned box with 12 outward-facing triangles."""
    sx, sy, sz = size
    ox, oy, oz = origin
    v = np.array(
        [[x, y, z] for z in (0, sz) for y in (0, sy) for x in (0, sx)], dtype=np.float64
    ) + (ox, oy, oz)
    t = [
        (0, 2, 1), (1, 2, 3),  # z = 0
        (4, 5, 6), (5, 7, 6),  # z = sz
        (0, 1, 4), (1, 5, 4),  # y = 0
        (2, 6, 3), (3, 6, 7),  # y = sy
        (0, 4, 2), (2, 4, 6),  # x = 0
        (1, 3, 5), (3, 7, 5),  # x = sx
    ]
    return TriMesh(v, np.array(t))


def signed_volume(mesh: TriMesh) -> float:
    c = mesh.corners()
    if len(c) == 0:
        return 0.0
    return float(np.einsum("ij,ij->i", c[:, 0], np.cross(c[:, 1], c[:, 2])).sum() / 6.0)


def triangle_areas(mesh: TriMesh) -> np.ndarray:
    c = mesh.corners()
    return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)


def _directed_edges(tris: np.ndarray) -> np.ndarray:
    return np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])


def is_watertight(mesh: TriMesh) -> bool:
    """Every directed edge appears once and is matched by exactly one reversed edge."""
    if mesh.is_empty:
        return False
    e = _directed_edges(mesh.triangles)
    n = len(mesh.vertices)
    fwd = e[:, 0] * n + e[:, 1]
    rev = e[:, 1] * n + e[:, 0]
    fwd_sorted = np.sort(fwd)
    if np.any(fwd_sorted[1:] == fwd_sorted[:-1]):
        return False
    return bool(np.array_equal(fwd_sorted, np.sort(rev)))


def euler_characteristic(mesh: TriMesh) -> int:
    tris = mesh.triangles
    if len(tris) == 0:
        return 0
    e = np.sort(_directed_edges(tris), axis=1)
    n_edges = len(np.unique(e[:, 0] * len(mesh.vertices) + e[:, 1]))
    n_verts = len(np.unique(tris))
    return int(n_verts - n_edges + len(tris))


def mesh_diagnostics(mesh: TriMesh) -> MeshDiagnostics:
    if mesh.is_empty:
        return MeshDiagnostics(False, 0.0, 0, 0)
    extent = float(np.ptp(mesh.vertices, axis=0).max())
    tol = 1e-12 * max(extent, 1.0) ** 2
    degenerate = int(np.count_nonzero(triangle_areas(mesh) <= tol))
    return MeshDiagnostics(is_watertight(mesh), signed_volume(mesh), euler_characteristic(mesh), degenerate)


def shells(mesh: TriMesh) -> list[TriMesh]:
    """Split into vertex-connected components, each re-indexed compactly."""
    if mesh.is_empty:
        return []
    n = len(mesh.vertices)
    t = mesh.triangles
    rows = np.concatenate([t[:, 0], t[:, 1], t[:, 2]])
    cols = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    tri_label = labels[t[:, 0]]
    out = []
    # order shells by first appearance so the result is stable
    _, first = np.unique(tri_label, return_index=True)
    for lab in tri_label[np.sort(first)]:
        sub = t[tri_label == lab]
        used, inverse = np.unique(sub, return_inverse=True)
        out.append(TriMesh(mesh.vertices[used], inverse.reshape(-1, 3)))
    return out
