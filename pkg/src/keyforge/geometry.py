"""Planar projective transforms for key-patch rectification.

A transform is held as the eight free entries of a 3x3 homography whose
bottom-right entry is fixed to 1::

    H = [[t0, t1, t2],
         [t3, t4, t5],
         [t6, t7, 1 ]]

Throughout keyforge, ``theta`` maps *scene* pixel coordinates to the
*normalized patch* frame (the forward map). Rectifying a scene is therefore
``warp_image(scene, theta, ...)``, and rendering a patch into a scene is
``warp_image(patch, theta.inverse(), ...)``.

Pixel (col, row) has its center at the continuous coordinate (x=col, y=row).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .errors import (
    DegenerateCorrespondences,
    EmptyMask,
    NonInvertibleTransform,
    PointAtInfinity,
)

DET_EPS = 1e-12
W_EPS = 1e-12


def _inv3(m: np.ndarray) -> np.ndarray:
    # adjugate / det: exact for identity and integer translations
    a, b, c = m[0]
    d, e, f = m[1]
    g, h, i = m[2]
    co = np.array(
        [
            [e * i - f * h, c * h - b * i, b * f - c * e],
            [f * g - d * i, a * i - c * g, c * d - a * f],
            [d * h - e * g, b * g - a * h, a * e - b * d],
        ]
    )
    det = a * co[0, 0] + b * co[1, 0] + c * co[2, 0]
    if abs(det) <= DET_EPS:
        raise NonInvertibleTransform(f"determinant {det:.3g} too small")
    return co / det


@dataclass(frozen=True)
class PerspectiveParams:
    """Eight-parameter homography (H[2][2] == 1)."""

    theta: tuple[float, ...]

    def __post_init__(self):
        theta = tuple(float(t) for t in self.theta)
        if len(theta) != 8:
            raise ValueError(f"expected 8 parameters, got {len(theta)}")
        if not all(np.isfinite(theta)):
            raise NonInvertibleTransform("non-finite parameter")
        object.__setattr__(self, "theta", theta)
        if abs(np.linalg.det(self.matrix)) <= DET_EPS:
            raise NonInvertibleTransform("homography is singular")

    @classmethod
    def identity(cls) -> "PerspectiveParams":
        return cls((1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0))

    @classmethod
    def from_matrix(cls, m) -> "PerspectiveParams":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError("expected a 3x3 matrix")
        scale = np.abs(m).max()
        if scale == 0 or abs(m[2, 2]) <= 1e-12 * scale:
            raise NonInvertibleTransform("H[2][2] vanishes; not representable with 8 parameters")
        m = m / m[2, 2]
        return cls(tuple(m.ravel()[:8]))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "PerspectiveParams":
        return cls((1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0))

    @classmethod
    def scaling(cls, sx: float, sy: float | None = None) -> "PerspectiveParams":
        return cls((sx, 0.0, 0.0, 0.0, sx if sy is None else sy, 0.0, 0.0, 0.0))

    @property
    def matrix(self) -> np.ndarray:
        return np.array([*self.theta, 1.0]).reshape(3, 3)

    def inverse(self) -> "PerspectiveParams":
        return PerspectiveParams.from_matrix(_inv3(self.matrix))

    def then(self, other: "PerspectiveParams") -> "PerspectiveParams":
        """Composition: apply ``self`` first, then ``other``."""
        return PerspectiveParams.from_matrix(other.matrix @ self.matrix)

    def to_list(self) -> list[float]:
        return list(self.theta)


@dataclass(frozen=True)
class ParamStats:
    """Per-component mean/std of homography parameters over a training set."""

    mean: tuple[float, ...]
    std: tuple[float, ...]
    degenerate: tuple[bool, ...] = field(default=(False,) * 8)

    def __post_init__(self):
        mean = tuple(float(v) for v in self.mean)
        std = tuple(float(v) for v in self.std)
        if len(mean) != 8 or len(std) != 8:
            raise ValueError("mean and std need 8 components each")
        flags = tuple(bool(f) for f in self.degenerate)
        # degenerate components are replaced by 1 and flagged
        fixed = tuple(1.0 if (not np.isfinite(s) or s <= 1e-12) else s for s in std)
        flags = tuple(f or fixed[i] != std[i] for i, f in enumerate(flags))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", fixed)
        object.__setattr__(self, "degenerate", flags)

    @classmethod
    def from_samples(cls, thetas: Sequence[PerspectiveParams] | np.ndarray) -> "ParamStats":
        arr = np.array([t.theta if isinstance(t, PerspectiveParams) else t for t in thetas], dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 8 or len(arr) == 0:
            raise ValueError("need a non-empty (N, 8) collection of parameters")
        return cls(tuple(arr.mean(axis=0)), tuple(arr.std(axis=0)))

    def to_json(self) -> str:
        return json.dumps({"mean": list(self.mean), "std": list(self.std)})

    @classmethod
    def from_json(cls, text: str) -> "ParamStats":
        data = json.loads(text)
        return cls(tuple(data["mean"]), tuple(data["std"]))

    @classmethod
    def load(cls, path: str | Path) -> "ParamStats":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _check_not_collinear(pts: np.ndarray, which: str) -> None:
    span = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]), 1e-300)
    for i, j, k in combinations(range(4), 3):
        u = pts[j] - pts[i]
        v = pts[k] - pts[i]
        if abs(u[0] * v[1] - u[1] * v[0]) <= 1e-12 * span * span:
            raise DegenerateCorrespondences(f"{which} points {i},{j},{k} are collinear or coincident")


def _solve_partial_pivot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gaussian elimination with partial pivoting for a small dense system."""
    a = a.astype(np.float64, copy=True)
    b = b.astype(np.float64, copy=True)
    n = len(b)
    scale = np.abs(a).max()
    for col in range(n):
        piv = col + int(np.argmax(np.abs(a[col:, col])))
        if abs(a[piv, col]) <= 1e-13 * scale:
            raise DegenerateCorrespondences("correspondence system is singular")
        if piv != col:
            a[[col, piv]] = a[[piv, col]]
            b[[col, piv]] = b[[piv, col]]
        factors = a[col + 1 :, col] / a[col, col]
        a[col + 1 :, col:] -= np.outer(factors, a[col, col:])
        b[col + 1 :] -= factors * b[col]
    x = np.empty(n)
    for row in range(n - 1, -1, -1):
        x[row] = (b[row] - a[row, row + 1 :] @ x[row + 1 :]) / a[row, row]
    return x


def homography_from_correspondences(src, dst) -> PerspectiveParams:
    """Exact homography mapping four ``src`` points onto four ``dst`` points."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if src.shape != (4, 2) or dst.shape != (4, 2):
        raise ValueError("need exactly four point pairs")
    _check_not_collinear(src, "source")
    _check_not_collinear(dst, "destination")

    # pure rescaling keeps the origin fixed, so H[2][2] = 1 is preserved
    s_src = max(np.abs(src).max(), 1e-300)
    s_dst = max(np.abs(dst).max(), 1e-300)
    p = src / s_src
    q = dst / s_dst
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(p, q)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    h = _solve_partial_pivot(a, b)
    hn = np.append(h, 1.0).reshape(3, 3)
    m = np.diag([s_dst, s_dst, 1.0]) @ hn @ np.diag([1.0 / s_src, 1.0 / s_src, 1.0])
    try:
        return PerspectiveParams.from_matrix(m)
    except NonInvertibleTransform as exc:
        raise DegenerateCorrespondences(str(exc)) from exc


def apply_homography(p: PerspectiveParams, pt) -> tuple[float, float]:
    t = p.theta
    x, y = float(pt[0]), float(pt[1])
    w = t[6] * x + t[7] * y + 1.0
    if abs(w) < W_EPS:
        raise PointAtInfinity(f"({x}, {y}) maps to infinity")
    return ((t[0] * x + t[1] * y + t[2]) / w, (t[3] * x + t[4] * y + t[5]) / w)


def apply_homography_points(p: PerspectiveParams, pts) -> np.ndarray:
    """Vectorized :func:`apply_homography` for an (N, 2) array."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    t = p.theta
    x, y = pts[:, 0], pts[:, 1]
    w = t[6] * x + t[7] * y + 1.0
    if np.any(np.abs(w) < W_EPS):
        raise PointAtInfinity("a point maps to infinity")
    return np.column_stack(((t[0] * x + t[1] * y + t[2]) / w, (t[3] * x + t[4] * y + t[5]) / w))


def warp_image(img: np.ndarray, p: PerspectiveParams, out_w: int, out_h: int) -> np.ndarray:
    """Resample ``img`` into an ``out_h x out_w`` raster through ``p``.

    Output pixel q takes the bilinear sample of ``img`` at ``p^-1(q)``.
    Taps outside the source are zero, so regions mapped from outside are black.
    """
    if out_w < 1 or out_h < 1:
        raise ValueError("output size must be at least 1x1")
    img = np.asarray(img, dtype=np.float64)
    inv = _inv3(p.matrix)
    h, w = img.shape[:2]

    xs = np.arange(out_w, dtype=np.float64)
    ys = np.arange(out_h, dtype=np.float64)[:, None]
    den = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
    ok = np.abs(den) >= W_EPS
    den = np.where(ok, den, 1.0)
    sx = (inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]) / den
    sy = (inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]) / den
    # points at infinity and far-away samples read as zero
    ok &= (sx > -2) & (sx < w + 1) & (sy > -2) & (sy < h + 1)
    coords = np.stack((np.where(ok, sy, -10.0), np.where(ok, sx, -10.0)))

    def sample(channel: np.ndarray) -> np.ndarray:
        # grid-constant pads every out-of-range tap with 0 before interpolating
        return ndimage.map_coordinates(channel, coords, order=1, mode="grid-constant", cval=0.0, prefilter=False)

    if img.ndim == 2:
        return sample(img)
    return np.stack([sample(img[:, :, c]) for c in range(img.shape[2])], axis=2)


def flip_horizontal(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(img)[:, ::-1])


def flip_vertical(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(img)[::-1])


def normalize_params(p: PerspectiveParams, stats: ParamStats) -> np.ndarray:
    return (np.asarray(p.theta) - np.asarray(stats.mean)) / np.asarray(stats.std)


def denormalize_params(z, stats: ParamStats) -> PerspectiveParams:
    return PerspectiveParams(tuple(np.asarray(z, dtype=np.float64) * np.asarray(stats.std) + np.asarray(stats.mean)))


class FlipDecision(NamedTuple):
    orientation: str  # "upright" or "flipped"
    confidence: float

    @property
    def flipped(self) -> bool:
        return self.orientation == "flipped"


FLIP_CONFIDENCE_GATE = 0.6


def detect_flip_heuristic(mask) -> FlipDecision:
    """Guess whether the bitting faces up by comparing edge roughness.

    The key's top and bottom outlines are measured per column; the edge with
    the larger height variance is taken to be the bitting. Columns much
    taller than the median (the bow) are ignored. Equal variance reports
    upright at confidence 0.5.
    """
    bits = np.asarray(getattr(mask, "bits", mask), dtype=bool)
    cols = np.flatnonzero(bits.any(axis=0))
    if cols.size == 0:
        raise EmptyMask("mask has no foreground")
    sub = bits[:, cols]
    top = np.argmax(sub, axis=0)
    bottom = sub.shape[0] - 1 - np.argmax(sub[::-1], axis=0)
    extent = bottom - top + 1
    keep = extent <= 1.25 * np.median(extent)
    var_top = float(np.var(top[keep]))
    var_bottom = float(np.var(bottom[keep]))
    total = var_top + var_bottom
    if total == 0.0 or var_top == var_bottom:
        return FlipDecision("upright", 0.5)
    if var_top > var_bottom:
        return FlipDecision("upright", var_top / total)
    return FlipDecision("flipped", var_bottom / total)
