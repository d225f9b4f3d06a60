"""Evaluation quantities: pin errors, overlap, detection AP, ROC-AUC and losses."""

from .losses import loss_classification, loss_mse_normalized, loss_pixel_bce, loss_smooth_l1
from .pins import max_pin_error, mean_pin_error, pin_errors, pixel_overlap
from .ranking import Detection, PRCurve, average_precision, box_iou, roc_auc

__all__ = [
    "Detection",
    "PRCurve",
    "average_precision",
    "box_iou",
    "loss_classification",
    "loss_mse_normalized",
    "loss_pixel_bce",
    "loss_smooth_l1",
    "max_pin_error",
    "mean_pin_error",
    "pin_errors",
    "pixel_overlap",
    "roc_auc",
]
