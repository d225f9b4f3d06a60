"""From a pose-normalized key mask to a validated bitting code.

Masks are upright: blade pointing right, bitting edge on top, image rows
growing downward. Pixel (col, row) is reported as the point (x, y).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from shapely.geometry import LinearRing, Polygon

from .errors import (
    DegenerateBlade,
    EmptyMask,
    InvalidKeySpec,
    LengthMismatch,
    MultipleComponents,
    NoForeground,
    OutOfFrame,
    RayMiss,
)

Point = tuple[int, int]


@dataclass
class BitMask:
    """Binary key silhouette, optionally carrying (shoulder, tip) keypoints."""

    bits: np.ndarray
    keypoints: tuple[Point, Point] | None = None

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise ValueError("mask must be 2-D")
        if self.keypoints is not None:
            (sx, sy), (tx, ty) = self.keypoints
            self.keypoints = ((int(sx), int(sy)), (int(tx), int(ty)))

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def flipped_vertical(self) -> "BitMask":
        kp = None
        if self.keypoints is not None:
            kp = tuple((x, self.height - 1 - y) for x, y in self.keypoints)
        return BitMask(self.bits[::-1].copy(), kp)


@dataclass(frozen=True)
class BittingCode:
    depths: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))

    @classmethod
    def parse(cls, text: str) -> "BittingCode":
        try:
            return cls(tuple(int(part) for part in text.strip().split("-")))
        except ValueError as exc:
            raise ValueError(f"bad bitting code {text!r}; expected digits like 2-4-0-7-5") from exc

    def __str__(self) -> str:
        return "-".join(str(d) for d in self.depths)

    def __len__(self) -> int:
        return len(self.depths)

    def __iter__(self):
        return iter(self.depths)


@dataclass(frozen=True)
class DepthChart:
    num_depths: int
    shallowest_mm: float
    increment_mm: float

    def height_mm(self, depth: int) -> float:
        """Remaining blade material above the baseline for a cut of ``depth``."""
        return self.shallowest_mm - depth * self.increment_mm


@dataclass(frozen=True)
class KeySpec:
    """Public manufacturer data for one key type. All lengths in mm."""

    keyway: tuple[tuple[float, float], ...]
    blade_length_mm: float
    blade_height_mm: float
    pin_positions_mm: tuple[float, ...]
    depth_chart: DepthChart
    macs: int
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "keyway", tuple((float(u), float(v)) for u, v in self.keyway))
        object.__setattr__(self, "pin_positions_mm", tuple(float(p) for p in self.pin_positions_mm))
        self.validate()

    def validate(self) -> None:
        if len(self.keyway) < 3:
            raise InvalidKeySpec("keyway needs at least 3 vertices")
        ring = LinearRing(self.keyway)
        if not ring.is_simple or Polygon(self.keyway).area <= 0:
            raise InvalidKeySpec("keyway polygon must be simple with positive area")
        if self.blade_length_mm <= 0 or self.blade_height_mm <= 0:
            raise InvalidKeySpec("blade dimensions must be positive")
        pins = self.pin_positions_mm
        if not pins:
            raise InvalidKeySpec("need at least one pin")
        if any(b <= a for a, b in zip(pins, pins[1:])):
            raise InvalidKeySpec("pin positions must be strictly increasing")
        if pins[0] <= 0 or pins[-1] >= self.blade_length_mm:
            raise InvalidKeySpec("pin positions must lie inside (0, blade_length_mm)")
        chart = self.depth_chart
        if chart.num_depths < 1 or chart.increment_mm <= 0:
            raise InvalidKeySpec("depth chart needs >= 1 depth and a positive increment")
        if chart.height_mm(chart.num_depths - 1) <= 0:
            raise InvalidKeySpec("deepest cut leaves no material")
        if chart.shallowest_mm > self.blade_height_mm:
            raise InvalidKeySpec("shallowest cut is above the uncut blade")
        if self.macs < 0:
            raise InvalidKeySpec("macs must be non-negative")

    @property
    def pin_count(self) -> int:
        return len(self.pin_positions_mm)

    def code_heights(self, code: BittingCode) -> np.ndarray:
        """Chart heights of ``code`` as fractions of the blade height."""
        return np.array([self.depth_chart.height_mm(d) for d in code]) / self.blade_height_mm

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "keyway": [list(p) for p in self.keyway],
            "blade_length_mm": self.blade_length_mm,
            "blade_height_mm": self.blade_height_mm,
            "pin_positions_mm": list(self.pin_positions_mm),
            "depth_chart": {
                "num_depths": self.depth_chart.num_depths,
                "shallowest_mm": self.depth_chart.shallowest_mm,
                "increment_mm": self.depth_chart.increment_mm,
            },
            "macs": self.macs,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "KeySpec":
        try:
            chart = data["depth_chart"]
            return cls(
                keyway=tuple(tuple(p) for p in data["keyway"]),
                blade_length_mm=float(data["blade_length_mm"]),
                blade_height_mm=float(data["blade_height_mm"]),
                pin_positions_mm=tuple(data["pin_positions_mm"]),
                depth_chart=DepthChart(
                    int(chart["num_depths"]), float(chart["shallowest_mm"]), float(chart["increment_mm"])
                ),
                macs=int(data["macs"]),
                name=data.get("name", "custom"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidKeySpec(f"malformed key spec: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "KeySpec":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path: str | Path) -> "KeySpec":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def default(cls) -> "KeySpec":
        """Built-in Yale-style 5-pin spec (declared defaults, not measured data)."""
        text = resources.files("keyforge").joinpath("data/yale.json").read_text(encoding="utf-8")
        return cls.from_json(text)


def bitting_surface(code: BittingCode, spec: KeySpec, u, root_width_mm: float = 0.8) -> np.ndarray:
    """Material height (mm) along the blade for flat-root cuts with 45-degree flanks."""
    u = np.asarray(u, dtype=np.float64)
    h = np.full(u.shape, spec.blade_height_mm)
    half = 0.5 * root_width_mm
    for pos, depth in zip(spec.pin_positions_mm, code):
        cut = spec.depth_chart.height_mm(depth) + np.maximum(0.0, np.abs(u - pos) - half)
        h = np.minimum(h, cut)
    return h


def otsu_threshold(gray: np.ndarray, bins: int = 256) -> tuple[float, float]:
    """Return (threshold, separability) for values in [0, 1].

    Separability is between-class variance over total variance (0..1).
    """
    hist, edges = np.histogram(gray, bins=bins, range=(0.0, 1.0))
    p = hist.astype(np.float64) / hist.sum()
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(p)
    mu = np.cumsum(p * centers)
    mu_t = mu[-1]
    var_t = float(np.sum(p * (centers - mu_t) ** 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu_t * w0 - mu) ** 2 / (w0 * (1.0 - w0))
    between = np.nan_to_num(between[:-1], nan=0.0, posinf=0.0)
    k = int(np.argmax(between))
    sep = float(between[k] / var_t) if var_t > 0 else 0.0
    return float(edges[k + 1]), sep


def segment_threshold(patch: np.ndarray, min_separability: float = 0.85) -> BitMask:
    """Classical key segmentation: Otsu threshold, largest 4-component, hole fill.

    The key is assumed brighter than its surroundings. Histograms that are
    not clearly bimodal (separability below ``min_separability``) are
    reported as having no foreground.
    """
    gray = np.asarray(patch, dtype=np.float64)
    if gray.ndim == 3:
        gray = gray.mean(axis=2)
    t, sep = otsu_threshold(gray)
    if sep < min_separability:
        raise NoForeground(f"intensity histogram not bimodal (separability {sep:.3f})")
    fg = gray >= t
    if not fg.any():
        raise NoForeground("threshold leaves no foreground")
    labels, n = ndimage.label(fg)
    if n > 1:
        sizes = np.bincount(labels.ravel())
        sizes[0] = 0
        fg = labels == int(np.argmax(sizes))
    return BitMask(ndimage.binary_fill_holes(fg))


# screen-CCW order: E, NE, N, NW, W, SW, S, SE (y grows downward)
_DIRS = ((1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1))


def extract_boundary(mask: BitMask | np.ndarray) -> list[Point]:
    """Trace the outer boundary counter-clockwise (as displayed).

    Moore-neighbour tracing starting at the left-most pixel of the top row;
    consecutive points are 8-adjacent and the cycle closes on the start.
    """
    bits = np.asarray(getattr(mask, "bits", mask), dtype=bool)
    if not bits.any():
        raise EmptyMask("mask has no foreground")
    _, n = ndimage.label(bits)
    if n > 1:
        raise MultipleComponents(f"mask has {n} 4-connected components")

    h, w = bits.shape
    padded = np.zeros((h + 2, w + 2), dtype=bool)
    padded[1:-1, 1:-1] = bits
    rows = np.flatnonzero(bits.any(axis=1))
    y0 = int(rows[0])
    x0 = int(np.flatnonzero(bits[y0])[0])
    start = (x0, y0)

    def step(p: Point, d: int) -> tuple[Point, int] | None:
        for k in range(8):
            nd = (d - 3 + k) % 8
            dx, dy = _DIRS[nd]
            q = (p[0] + dx, p[1] + dy)
            if padded[q[1] + 1, q[0] + 1]:
                return q, nd
        return None

    first = step(start, 6)
    if first is None:
        return [start]
    out = [start]
    p, d = first
    first_dir = d
    while True:
        if p == start:
            nxt = step(p, d)
            if nxt[1] == first_dir and nxt[0] == first[0]:
                break
        out.append(p)
        p, d = step(p, d)
    return out


def locate_keypoints(mask: BitMask | np.ndarray) -> tuple[Point, Point]:
    """Shoulder and tip of an upright key, in pixel coordinates.

    tip: right-most foreground pixel, the lowest one among ties.
    shoulder: left-most foreground pixel of the bottom quarter of the key
    (the blade baseline band), the lowest one among ties.
    """
    bits = np.asarray(getattr(mask, "bits", mask), dtype=bool)
    if not bits.any():
        raise EmptyMask("mask has no foreground")
    rows = np.flatnonzero(bits.any(axis=1))
    cols = np.flatnonzero(bits.any(axis=0))
    top, bottom = int(rows[0]), int(rows[-1])
    right = int(cols[-1])
    tip = (right, int(np.flatnonzero(bits[:, right])[-1]))

    band_top = top + int(math.ceil(0.75 * (bottom - top + 1) - 1e-9))
    band_top = min(band_top, bottom)
    band = bits[band_top : bottom + 1]
    left = int(np.flatnonzero(band.any(axis=0))[0])
    shoulder = (left, band_top + int(np.flatnonzero(band[:, left])[-1]))
    if shoulder[0] >= tip[0]:
        raise DegenerateBlade(f"shoulder x={shoulder[0]} is not left of tip x={tip[0]}")
    return shoulder, tip


def _keypoints(mask: BitMask) -> tuple[Point, Point]:
    kp = mask.keypoints if isinstance(mask, BitMask) and mask.keypoints is not None else locate_keypoints(mask)
    (sx, _), (tx, _) = kp
    if sx >= tx:
        raise DegenerateBlade(f"shoulder x={sx} is not left of tip x={tx}")
    return kp


def pin_pixel_heights(mask: BitMask, spec: KeySpec) -> tuple[np.ndarray, float]:
    """Raw virtual-pin heights in pixels plus the pixels-per-blade-height scale."""
    bits = np.asarray(getattr(mask, "bits", mask), dtype=bool)
    (sx, sy), (tx, ty) = _keypoints(mask)
    length = spec.blade_length_mm
    px_per_mm = (tx - sx + 1) / length
    scale = px_per_mm * spec.blade_height_mm
    heights = np.empty(spec.pin_count)
    for i, d in enumerate(spec.pin_positions_mm):
        x = int(math.floor(sx + d / length * (tx - sx) + 0.5))
        if x < 0 or x >= bits.shape[1] or x < sx or x > tx:
            raise OutOfFrame(f"pin {i} column {x} outside the blade")
        col = np.flatnonzero(bits[:, x])
        if col.size == 0:
            raise RayMiss(i)
        # walk upward from the lowest foreground pixel to the first gap
        run = col[::-1]
        gaps = np.flatnonzero(np.diff(run) != -1)
        top = int(run[gaps[0]]) if gaps.size else int(run[-1])
        # baseline is the bottom edge of the shoulder-tip pixel row
        baseline = sy + (x - sx) / (tx - sx) * (ty - sy) + 1
        heights[i] = baseline - top
    return heights, scale


def cast_virtual_pins(mask: BitMask, spec: KeySpec) -> np.ndarray:
    """Remaining material height at each pin, as a fraction of blade height."""
    raw, scale = pin_pixel_heights(mask, spec)
    return raw / scale


def heights_to_code(heights: Sequence[float], spec: KeySpec) -> BittingCode:
    """Snap measured heights to the nearest chart depth (ties go shallower)."""
    chart = spec.depth_chart
    out = []
    for h in heights:
        k_real = (chart.shallowest_mm - float(h) * spec.blade_height_mm) / chart.increment_mm
        k = math.ceil(k_real - 0.5 - 1e-9)
        out.append(min(max(k, 0), chart.num_depths - 1))
    return BittingCode(tuple(out))


def validate_macs(code: BittingCode, spec: KeySpec) -> list[tuple[int, int]]:
    """Adjacent pairs violating the MACS, as (left pin index, |delta|). Empty means valid."""
    if len(code) != spec.pin_count:
        raise LengthMismatch(f"code has {len(code)} cuts, spec has {spec.pin_count} pins")
    d = code.depths
    return [(i, abs(d[i] - d[i + 1])) for i in range(len(d) - 1) if abs(d[i] - d[i + 1]) > spec.macs]


def decode_mask(mask: BitMask, spec: KeySpec) -> tuple[BittingCode, np.ndarray]:
    heights = cast_virtual_pins(mask, spec)
    return heights_to_code(heights, spec), heights
