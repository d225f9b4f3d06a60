"""Binary STL read/write (little-endian, float32)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import EmptyMesh, IoFailure
from .mesh import TriMesh

HEADER = b"keyforge".ljust(80, b"\0")
_RECORD = np.dtype([("normal", "<f4", (3,)), ("v", "<f4", (3, 3)), ("attr", "<u2")])


def face_normals(corners: np.ndarray) -> np.ndarray:
    """Unit normals of CCW triangles; zero for degenerate ones."""
    n = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)


def stl_bytes(mesh: TriMesh) -> bytes:
    if mesh.is_empty:
        raise EmptyMesh("refusing to write a mesh without triangles")
    # normals come from the stored float32 vertices so a re-write is byte-identical
    corners = mesh.corners().astype(np.float32).astype(np.float64)
    rec = np.zeros(len(corners), dtype=_RECORD)
    rec["normal"] = face_normals(corners)
    rec["v"] = corners
    return HEADER + np.uint32(len(rec)).astype("<u4").tobytes() + rec.tobytes()


def write_stl(mesh: TriMesh, path: str | Path) -> None:
    data = stl_bytes(mesh)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_stl(path: str | Path) -> TriMesh:
    """Read a binary STL; bit-identical vertices are merged into one index."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(data) < 84:
        raise IoFailure(f"{path}: too short for a binary STL")
    count = int(np.frombuffer(data, dtype="<u4", count=1, offset=80)[0])
    if len(data) != 84 + count * _RECORD.itemsize:
        raise IoFailure(f"{path}: size {len(data)} does not match {count} triangles")
    rec = np.frombuffer(data, dtype=_RECORD, count=count, offset=84)
    soup = rec["v"].reshape(-1, 3)
    verts, inverse = np.unique(soup, axis=0, return_inverse=True)
    return TriMesh(verts.astype(np.float64), inverse.reshape(-1, 3))
