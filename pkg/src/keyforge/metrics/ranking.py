"""Detection PR/AP and ROC-AUC, computed exactly with rational arithmetic."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

from ..errors import LengthMismatch, NoGroundTruth, SingleClass

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    image_id: str

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"detection box {self.box} has no area")


@dataclass(frozen=True)
class PRCurve:
    recall: tuple[float, ...]
    precision: tuple[float, ...]
    ap: float

    def to_dict(self) -> dict:
        return {"recall": list(self.recall), "precision": list(self.precision), "ap": self.ap}


def box_iou(a: Box, b: Box) -> float:
    """Intersection over union of (x0, y0, x1, y1) boxes in pixel-edge coordinates."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def average_precision(
    dets: Sequence[Detection], gts: Mapping[str, Sequence[Box]], iou_thr: float = 0.5
) -> PRCurve:
    """All-point interpolated AP with greedy score-ordered matching.

    Each detection (highest score first, ties in input order) claims the
    still-unmatched ground-truth box of its image with the highest IoU, if
    that IoU reaches ``iou_thr``.
    """
    if not 0 < iou_thr < 1:
        raise ValueError("iou_thr must lie in (0, 1)")
    n_gt = sum(len(b) for b in gts.values())
    if n_gt == 0:
        raise NoGroundTruth("AP is undefined without ground-truth boxes")
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    used = {img: [False] * len(boxes) for img, boxes in gts.items()}
    tp = 0
    recall, precision = [], []
    for k, i in enumerate(order, start=1):
        d = dets[i]
        boxes = gts.get(d.image_id, ())
        best, best_j = -1.0, -1
        for j, g in enumerate(boxes):
            if used[d.image_id][j]:
                continue
            iou = box_iou(d.box, g)
            if iou > best:
                best, best_j = iou, j
        if best_j >= 0 and best >= iou_thr:
            used[d.image_id][best_j] = True
            tp += 1
        recall.append(Fraction(tp, n_gt))
        precision.append(Fraction(tp, k))

    # area under the monotone precision envelope
    ap = Fraction(0)
    env = Fraction(0)
    envelope = [Fraction(0)] * len(precision)
    for k in range(len(precision) - 1, -1, -1):
        env = max(env, precision[k])
        envelope[k] = env
    prev = Fraction(0)
    for r, p in zip(recall, envelope):
        ap += (r - prev) * p
        prev = r
    return PRCurve(tuple(float(r) for r in recall), tuple(float(p) for p in precision), float(ap))


def roc_auc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg), ties counting one half."""
    if len(scores) != len(labels):
        raise LengthMismatch(f"{len(scores)} scores vs {len(labels)} labels")
    n_pos = sum(1 for y in labels if y)
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC needs both positive and negative samples")
    pairs = sorted(zip((float(s) for s in scores), (bool(y) for y in labels)), key=lambda t: t[0])
    twice_u = 0
    neg_below = 0
    i = 0
    while i < len(pairs):
        j = i
        pos = neg = 0
        while j < len(pairs) and pairs[j][0] == pairs[i][0]:
            if pairs[j][1]:
                pos += 1
            else:
                neg += 1
            j += 1
        twice_u += 2 * pos * neg_below + pos * neg
        neg_below += neg
        i = j
    return float(Fraction(twice_u, 2 * n_pos * n_neg))
