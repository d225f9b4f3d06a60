"""OpenSCAD-style CSG script for the same key solid.

The script uses linear_extrude, polygon, difference and union (multmatrix only
places the extrusions), so it can be evaluated by an exact solid modeller as a
cross-check of the swept mesh.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..bitting import KeySpec
from ..errors import IoFailure
from .blade import BowSpec, HeightProfile


def _f(v: float) -> str:
    s = "%.6f" % v
    return "0.000000" if s == "-0.000000" else s


def _points(pts) -> str:
    return "[" + ", ".join(f"[{_f(a)}, {_f(b)}]" for a, b in pts) + "]"


def _matrix(rows) -> str:
    return "[" + ", ".join("[" + ", ".join(_f(v) for v in row) + "]" for row in rows) + "]"


# linear_extrude runs along the local z axis; these rotations place it in (x, u, v)
def _along_x(x0: float):
    return [[0, 0, 1, x0], [1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1]]


def _along_minus_u(u0: float):
    return [[1, 0, 0, 0], [0, 0, -1, u0], [0, 1, 0, 0], [0, 0, 0, 1]]


def csg_script(spec: KeySpec, profile: HeightProfile, bow: BowSpec) -> str:
    length = spec.blade_length_mm
    keyway = np.asarray(spec.keyway)
    umin, umax, vmax = keyway[:, 0].min(), keyway[:, 0].max(), keyway[:, 1].max()
    width = umax - umin
    lid = vmax + 1.0
    xs, hs = profile.xs, profile.hs
    # region above the bitting line in the (x, v) plane
    cut = [(-1.0, lid), (-1.0, hs[0])] + list(zip(xs, hs)) + [(length + 1.0, hs[-1]), (length + 1.0, lid)]
    x0, _ = bow.x_range

    lines = [
        "// keyforge key solid, units mm; axes x along blade, y across keyway, z up",
        "union() {",
        "  difference() {",
        f"    multmatrix({_matrix(_along_x(0.0))})",
        f"      linear_extrude(height = {_f(length)})",
        f"        polygon(points = {_points(keyway)});",
        f"    multmatrix({_matrix(_along_minus_u(umax + 1.0))})",
        f"      linear_extrude(height = {_f(width + 2.0)})",
        f"        polygon(points = {_points(cut)});",
        "  }",
        f"  multmatrix({_matrix(_along_x(x0))})",
        f"    linear_extrude(height = {_f(bow.thickness_mm)})",
        f"      polygon(points = {_points(bow.outline)});",
        "}",
        "",
    ]
    return "\n".join(lines)


def emit_csg_script(spec: KeySpec, profile: HeightProfile, bow: BowSpec, path: str | Path) -> None:
    try:
        Path(path).write_text(csg_script(spec, profile, bow), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
