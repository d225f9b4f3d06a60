"""Mask-level metrics: per-pin cut-height error and pixel overlap."""

from __future__ import annotations

import numpy as np

from ..bitting import BitMask, KeySpec, pin_pixel_heights
from ..errors import DimensionMismatch, EmptyPrediction


def pin_errors(pred: BitMask, gt: BitMask, spec: KeySpec) -> np.ndarray:
    """|height_pred - height_gt| at each virtual pin, in blade-height units."""
    raw_p, scale_p = pin_pixel_heights(pred, spec)
    raw_g, scale_g = pin_pixel_heights(gt, spec)
    if scale_p == scale_g:
        # same pixel scale: divide the pixel difference once, so 3 px / 100 px is exactly 0.03
        return np.abs(raw_p - raw_g) / scale_g
    return np.abs(raw_p / scale_p - raw_g / scale_g)


def max_pin_error(pred: BitMask, gt: BitMask, spec: KeySpec) -> float:
    """MPE: the worst virtual-pin height difference."""
    return float(pin_errors(pred, gt, spec).max())


def mean_pin_error(pred: BitMask, gt: BitMask, spec: KeySpec) -> float:
    return float(pin_errors(pred, gt, spec).mean())


def pixel_overlap(pred, gt, mode: str = "paper") -> float:
    """``paper``: |pred & gt| / |pred|.  ``iou``: |pred & gt| / |pred | gt|."""
    p = np.asarray(getattr(pred, "bits", pred), dtype=bool)
    g = np.asarray(getattr(gt, "bits", gt), dtype=bool)
    if p.shape != g.shape:
        raise DimensionMismatch(f"mask shapes differ: {p.shape} vs {g.shape}")
    inter = int(np.count_nonzero(p & g))
    if mode == "paper":
        denom = int(np.count_nonzero(p))
    elif mode == "iou":
        denom = int(np.count_nonzero(p | g))
    else:
        raise ValueError(f"unknown overlap mode {mode!r}")
    if denom == 0:
        raise EmptyPrediction("prediction mask is empty")
    return inter / denom
