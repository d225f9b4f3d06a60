"""Printable key solids: height profiles, swept blade meshes, bow, STL and CSG output."""

from .blade import (
    BowSpec,
    HeightProfile,
    attach_bow,
    bitting_height_profile,
    bow_mesh,
    build_blade_mesh,
    profile_from_code,
    resample_ring,
    section_area,
)
from .csg import csg_script, emit_csg_script
from .mesh import MeshDiagnostics, TriMesh, box_mesh, mesh_diagnostics, shells, signed_volume
from .stl import read_stl, stl_bytes, write_stl

__all__ = [
    "BowSpec",
    "HeightProfile",
    "MeshDiagnostics",
    "TriMesh",
    "attach_bow",
    "bitting_height_profile",
    "bow_mesh",
    "box_mesh",
    "build_blade_mesh",
    "csg_script",
    "emit_csg_script",
    "mesh_diagnostics",
    "profile_from_code",
    "read_stl",
    "resample_ring",
    "section_area",
    "shells",
    "signed_volume",
    "stl_bytes",
    "write_stl",
]
