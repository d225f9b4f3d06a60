"""Blade solid: keyway extrusion clipped by the bitting surface, plus the bow shell.

Mesh coordinates are (X, Y, Z) = (x along the blade, u across the keyway,
v up the blade). Keyway polygons live in the (u, v) plane.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import shapely
from shapely.geometry import Polygon, box
from shapely.geometry.polygon import orient

from ..bitting import BittingCode, KeySpec, bitting_surface
from ..errors import ClipNotSimple, DegenerateBlade, NoOverlap, ProfileExceedsKeyway
from .mesh import TriMesh


@dataclass(frozen=True)
class HeightProfile:
    """Piecewise-linear bitting height h(x) in mm, stored as (x, h) knots."""

    xs: tuple[float, ...]
    hs: tuple[float, ...]

    def __post_init__(self):
        xs = tuple(float(x) for x in self.xs)
        hs = tuple(float(h) for h in self.hs)
        if len(xs) != len(hs) or len(xs) < 2:
            raise ValueError("need at least two (x, h) knots of matching length")
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ValueError("knots must be strictly increasing in x")
        if min(hs) <= 0:
            raise ValueError("heights must be positive")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "hs", hs)

    def __call__(self, x):
        return np.interp(x, self.xs, self.hs)

    @property
    def max_height(self) -> float:
        return max(self.hs)

    def to_dict(self) -> dict:
        return {"x_mm": list(self.xs), "h_mm": list(self.hs)}

    @classmethod
    def from_dict(cls, d: dict) -> "HeightProfile":
        return cls(tuple(d["x_mm"]), tuple(d["h_mm"]))

    @classmethod
    def constant(cls, length_mm: float, h: float) -> "HeightProfile":
        return cls((0.0, float(length_mm)), (float(h), float(h)))


def bitting_height_profile(
    boundary: Sequence[tuple[int, int]],
    keypoints: tuple[tuple[int, int], tuple[int, int]],
    spec: KeySpec,
    n: int = 256,
) -> HeightProfile:
    """Upper envelope of an upright boundary trace, resampled at ``n`` stations.

    Pixel column ``c`` covers x in [(c - sx) / s, (c - sx + 1) / s) mm with
    s = (tx - sx + 1) / blade_length, i.e. the shoulder pixel's left edge sits
    at x = 0 and the tip pixel's right edge at x = blade_length. Heights are
    measured up from the bottom edge of the shoulder-tip baseline.
    """
    if n < 2:
        raise ValueError("need at least two stations")
    pts = np.asarray(boundary, dtype=np.int64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("boundary is empty")
    (sx, sy), (tx, ty) = keypoints
    if sx == tx:
        raise DegenerateBlade("shoulder and tip share a column")
    if tx < sx:
        raise DegenerateBlade("tip lies left of the shoulder")
    length = spec.blade_length_mm
    s = (tx - sx + 1) / length

    ncols = tx - sx + 1
    top = np.full(ncols, np.iinfo(np.int64).max)
    inside = (pts[:, 0] >= sx) & (pts[:, 0] <= tx)
    np.minimum.at(top, pts[inside, 0] - sx, pts[inside, 1])
    known = top != np.iinfo(np.int64).max
    if not known.any():
        raise DegenerateBlade("no boundary points between shoulder and tip")
    cols = np.arange(ncols)
    baseline = sy + cols / (tx - sx) * (ty - sy) + 1
    col_h = (baseline - top) / s
    if not known.all():
        col_h = np.interp(cols, cols[known], col_h[known])

    xs = np.linspace(0.0, length, n)
    idx = np.clip(np.floor(xs * s).astype(np.int64), 0, ncols - 1)
    hs = np.clip(col_h[idx], 1e-3, spec.blade_height_mm)
    return HeightProfile(tuple(xs), tuple(hs))


def profile_from_code(code: BittingCode, spec: KeySpec, root_width_mm: float = 0.8) -> HeightProfile:
    """Exact piecewise-linear profile of the nominal cuts of ``code``."""
    length = spec.blade_length_mm
    top = spec.blade_height_mm
    half = 0.5 * root_width_mm
    pins = spec.pin_positions_mm
    heights = [spec.depth_chart.height_mm(d) for d in code]
    # every kink of min(top, V-cuts) is among these candidates
    cand = {0.0, length}
    for p, h in zip(pins, heights):
        cand.update((p - half, p + half, p - half - (top - h), p + half + (top - h)))
    for (p, h), (q, g) in zip(zip(pins, heights), zip(pins[1:], heights[1:])):
        cand.add(0.5 * (g - h + p + q))
    xs = np.array(sorted(c for c in cand if 0.0 <= c <= length))
    return HeightProfile(tuple(xs), tuple(bitting_surface(code, spec, xs, root_width_mm)))


def _clip_section(keyway: Polygon, h: float) -> Polygon:
    minu, minv, maxu, _ = keyway.bounds
    clipped = keyway.intersection(box(minu - 1.0, minv - 1.0, maxu + 1.0, h))
    if clipped.geom_type != "Polygon" or clipped.is_empty or clipped.area <= 0:
        n = 0 if clipped.is_empty else len(getattr(clipped, "geoms", [clipped]))
        raise ClipNotSimple(f"clip at v <= {h:.6f} yields {n} pieces ({clipped.geom_type})")
    if len(clipped.interiors):
        raise ClipNotSimple(f"clip at v <= {h:.6f} has holes")
    return orient(clipped, 1.0)


def _ring_vertices(poly: Polygon) -> np.ndarray:
    """CCW exterior without the closing point or repeated vertices, starting at
    the lowest vertex on the u-minimum side."""
    pts = np.asarray(poly.exterior.coords)[:-1]
    keep = np.linalg.norm(pts - np.roll(pts, 1, axis=0), axis=1) > 1e-12
    pts = pts[keep]
    umin = pts[:, 0].min()
    cand = np.flatnonzero(pts[:, 0] <= umin + 1e-9)
    start = cand[np.argmin(pts[cand, 1])]
    return np.roll(pts, -start, axis=0)


def resample_ring(vertices: np.ndarray, ring: int) -> np.ndarray:
    """Resample a closed polyline to ``ring`` points by arc length.

    When ``ring`` is at least the vertex count every original vertex is kept and
    the extra points are shared among edges in proportion to their length, so
    the resampled polygon is exactly the input shape.
    """
    v = np.asarray(vertices, dtype=np.float64)
    nv = len(v)
    seg = np.roll(v, -1, axis=0) - v
    lengths = np.linalg.norm(seg, axis=1)
    total = lengths.sum()
    if ring >= nv:
        extra = ring - nv
        quota = lengths / total * extra
        counts = np.floor(quota).astype(np.int64)
        left = extra - counts.sum()
        if left:
            # largest remainders first; stable sort keeps ties in edge order
            order = np.argsort(-(quota - counts), kind="stable")
            counts[order[:left]] += 1
        out = []
        for i in range(nv):
            k = counts[i]
            t = np.arange(k + 1) / (k + 1)
            out.append(v[i] + t[:, None] * seg[i])
        return np.concatenate(out)
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    targets = np.arange(ring) * total / ring
    i = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, nv - 1)
    t = (targets - cum[i]) / np.where(lengths[i] > 0, lengths[i], 1.0)
    return v[i] + t[:, None] * seg[i]


def triangulate_polygon(ring2d: np.ndarray) -> np.ndarray:
    """CCW index triples covering a simple polygon given by its CCW ring."""
    ring2d = np.asarray(ring2d, dtype=np.float64)
    lookup = {(float(u), float(v)): i for i, (u, v) in enumerate(ring2d)}
    tris = shapely.constrained_delaunay_triangles(Polygon(ring2d))
    out = []
    for tri in tris.geoms:
        c = np.asarray(tri.exterior.coords)[:3]
        try:
            idx = [lookup[(float(u), float(v))] for u, v in c]
        except KeyError as exc:
            raise ClipNotSimple("cap triangulation introduced a new vertex") from exc
        a, b, d = ring2d[idx]
        cross = (b[0] - a[0]) * (d[1] - a[1]) - (b[1] - a[1]) * (d[0] - a[0])
        if cross == 0:
            continue
        out.append(idx if cross > 0 else idx[::-1])
    return np.array(out, dtype=np.int64).reshape(-1, 3)


def extrude_rings(xs: Sequence[float], rings: Sequence[np.ndarray]) -> TriMesh:
    """Stitch equal-length CCW (u, v) rings placed at increasing x into a closed shell."""
    xs = np.asarray(xs, dtype=np.float64)
    s, r = len(rings), len(rings[0])
    verts = np.empty((s, r, 3))
    for k, (x, ring2d) in enumerate(zip(xs, rings)):
        if len(ring2d) != r:
            raise ValueError("all rings need the same vertex count")
        verts[k, :, 0] = x
        verts[k, :, 1:] = ring2d
    idx = np.arange(s * r).reshape(s, r)
    a = idx[:-1]
    b = np.roll(idx, -1, axis=1)[:-1]
    c = np.roll(idx, -1, axis=1)[1:]
    d = idx[1:]
    sides = np.concatenate(
        [np.stack([a, b, c], axis=-1).reshape(-1, 3), np.stack([a, c, d], axis=-1).reshape(-1, 3)]
    )
    # x-max cap faces +X (CCW in (u, v)); x-min cap faces -X
    cap_last = triangulate_polygon(rings[-1]) + idx[-1, 0]
    cap_first = triangulate_polygon(rings[0])[:, ::-1] + idx[0, 0]
    return TriMesh(verts.reshape(-1, 3), np.concatenate([sides, cap_first, cap_last]))


def build_blade_mesh(spec: KeySpec, profile: HeightProfile, stations: int = 256, ring: int = 128) -> TriMesh:
    """Slice-clip-stitch sweep of the keyway under the bitting profile."""
    if stations < 2:
        raise ValueError("stations must be >= 2")
    if ring < 8:
        raise ValueError("ring must be >= 8")
    keyway = orient(Polygon(spec.keyway), 1.0)
    top = keyway.bounds[3]
    xs = np.linspace(0.0, spec.blade_length_mm, stations)
    hs = np.asarray(profile(xs), dtype=np.float64)
    if np.any(hs > top + 1e-9):
        warnings.warn(
            f"profile reaches {hs.max():.4f} mm, above the keyway top {top:.4f} mm; clamped",
            ProfileExceedsKeyway,
            stacklevel=2,
        )
        hs = np.minimum(hs, top)
    cache: dict[float, np.ndarray] = {}
    rings = []
    for h in hs:
        key = float(h)
        if key not in cache:
            cache[key] = resample_ring(_ring_vertices(_clip_section(keyway, key)), ring)
        rings.append(cache[key])
    return extrude_rings(xs, rings)


def section_area(spec: KeySpec, h: float) -> float:
    """Area of the keyway below v = h (mm^2)."""
    return float(_clip_section(orient(Polygon(spec.keyway), 1.0), h).area)


@dataclass(frozen=True)
class BowSpec:
    """Bow outline in the keyway (u, v) plane, extruded along x.

    The prism spans x in [-thickness_mm + overlap_mm, overlap_mm], so it
    reaches ``overlap_mm`` into the blade base.
    """

    outline: tuple[tuple[float, float], ...]
    thickness_mm: float = 2.5
    overlap_mm: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "outline", tuple((float(u), float(v)) for u, v in self.outline))
        if len(self.outline) < 3:
            raise ValueError("bow outline needs at least 3 vertices")
        if not Polygon(self.outline).is_valid or Polygon(self.outline).area <= 0:
            raise ValueError("bow outline must be a simple polygon")
        if self.thickness_mm <= 0:
            raise ValueError("bow thickness must be positive")

    @property
    def x_range(self) -> tuple[float, float]:
        return -self.thickness_mm + self.overlap_mm, self.overlap_mm

    @property
    def prism_volume(self) -> float:
        return Polygon(self.outline).area * self.thickness_mm

    @classmethod
    def default(cls, spec: KeySpec, size_mm: float = 20.0, corner_mm: float = 3.0, segments: int = 8) -> "BowSpec":
        """Rounded square of side ``size_mm`` centred on the keyway centroid."""
        c = Polygon(spec.keyway).centroid
        half = 0.5 * size_mm - corner_mm
        pts = []
        for k, (cu, cv) in enumerate(((half, -half), (half, half), (-half, half), (-half, -half))):
            a0 = -0.5 * math.pi + k * 0.5 * math.pi
            for j in range(segments + 1):
                a = a0 + 0.5 * math.pi * j / segments
                pts.append((c.x + cu + corner_mm * math.cos(a), c.y + cv + corner_mm * math.sin(a)))
        return cls(tuple(pts))


def bow_mesh(bow: BowSpec) -> TriMesh:
    poly = orient(Polygon(bow.outline), 1.0)
    ring2d = _ring_vertices(poly)
    x0, x1 = bow.x_range
    return extrude_rings([x0, x1], [ring2d, ring2d])


def attach_bow(blade: TriMesh, bow: BowSpec, spec: KeySpec) -> TriMesh:
    """Append the bow prism as a second shell overlapping the blade base."""
    if bow.overlap_mm <= 0:
        raise NoOverlap(f"overlap {bow.overlap_mm} mm leaves a gap between bow and blade")
    if not Polygon(bow.outline).intersects(Polygon(spec.keyway)) or (
        Polygon(bow.outline).intersection(Polygon(spec.keyway)).area <= 0
    ):
        raise NoOverlap("bow outline does not cover the keyway cross-section")
    return TriMesh.concatenate([blade, bow_mesh(bow)])
