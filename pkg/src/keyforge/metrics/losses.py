"""Training-loss formulas as plain functions, numerically stabilised."""

from __future__ import annotations

import numpy as np

from ..bitting import BitMask
from ..errors import DimensionMismatch, LengthMismatch
from ..geometry import ParamStats


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def loss_smooth_l1(pred, target) -> float:
    """Mean over elements of 0.5 d^2 for |d| < 1, else |d| - 0.5."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise LengthMismatch(f"{p.size} predictions vs {t.size} targets")
    d = np.abs(p - t)
    return float(np.where(d < 1.0, 0.5 * d * d, d - 0.5).mean())


def loss_mse_normalized(pred, target, stats: ParamStats) -> float:
    """Mean of squared per-component errors, each divided by its training std."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    std = np.asarray(stats.std)
    if p.shape != t.shape or p.size != std.size:
        raise LengthMismatch("pred, target and stats need the same length")
    return float((((p - t) / std) ** 2).mean())


def loss_classification(logits, label: int, kind: str = "softmax_ce") -> float:
    """``softmax_ce``: log-sum-exp(z) - z[label].

    ``log_loss``: independent sigmoid per class against a one-hot target,
    averaged over classes (the per-anchor objectness form).
    """
    z = np.asarray(logits, dtype=np.float64).ravel()
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    if not 0 <= label < z.size:
        raise ValueError(f"label {label} outside {z.size} classes")
    if kind == "softmax_ce":
        m = z.max()
        return float(m + np.log(np.exp(z - m).sum()) - z[label])
    if kind == "log_loss":
        y = np.zeros_like(z)
        y[label] = 1.0
        return float((_softplus(z) - y * z).mean())
    raise ValueError(f"unknown loss kind {kind!r}")


def loss_pixel_bce(logit_mask, gt) -> float:
    """Per-pixel sigmoid cross entropy, averaged over all pixels."""
    z = np.asarray(logit_mask, dtype=np.float64)
    y = np.asarray(gt.bits if isinstance(gt, BitMask) else gt, dtype=np.float64)
    if z.shape != y.shape:
        raise DimensionMismatch(f"logits {z.shape} vs mask {y.shape}")
    return float((_softplus(z) - y * z).mean())
