"""Evaluation metrics: dataset-level mIoU and mask AP at IoU 0.5.

AP uses all-point interpolation (the precision envelope), with predictions
ranked by descending confidence and greedily matched to the highest-IoU
unmatched same-class ground-truth instance in their image.  Both metrics
ship with deliberately naive reference implementations used as test
oracles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class InstancePrediction:
    class_id: int
    confidence: float
    mask: np.ndarray  # (H, W) bool


# ------------------------------------------------------------------- mIoU


class ConfusionAccumulator:
    """Per-class intersection/union pixel counts over a dataset.

    Mergeable: accumulators from disjoint shards combine associatively.
    """

    def __init__(self, num_classes: int):
        self.num_classes = num_classes  # including background
        self.intersection = np.zeros(num_classes, dtype=np.int64)
        self.union = np.zeros(num_classes, dtype=np.int64)

    def update(self, predicted: np.ndarray, target: np.ndarray) -> None:
        predicted = np.asarray(predicted)
        target = np.asarray(target)
        if predicted.shape != target.shape:
            raise ValueError("prediction and target shapes differ")
        if predicted.min() < 0 or predicted.max() >= self.num_classes:
            raise ValueError("predicted class id out of range")
        if target.min() < 0 or target.max() >= self.num_classes:
            raise ValueError("target class id out of range")
        for cls in range(self.num_classes):
            p = predicted == cls
            t = target == cls
            self.intersection[cls] += int((p & t).sum())
            self.union[cls] += int((p | t).sum())

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.num_classes != self.num_classes:
            raise ValueError("accumulators disagree on class count")
        out = ConfusionAccumulator(self.num_classes)
        out.intersection = self.intersection + other.intersection
        out.union = self.union + other.union
        return out

    def per_class_iou(self) -> dict[int, float]:
        return {
            cls: float(self.intersection[cls]) / float(self.union[cls])
            for cls in range(self.num_classes)
            if self.union[cls] > 0
        }

    def miou(self) -> float:
        per_class = self.per_class_iou()
        if not per_class:
            raise ValueError("no class present in ground truth or predictions")
        return float(np.mean(list(per_class.values())))


def miou(predictions: list[np.ndarray], targets: list[np.ndarray], num_classes: int) -> float:
    """Dataset-level mean IoU over classes present in gt or predictions."""
    acc = ConfusionAccumulator(num_classes)
    for p, t in zip(predictions, targets, strict=True):
        acc.update(p, t)
    return acc.miou()


def miou_reference(predictions, targets, num_classes: int) -> float:
    """Independent per-pixel tally (pure loops); test oracle for ``miou``."""
    inter = {c: 0 for c in range(num_classes)}
    union = {c: 0 for c in range(num_classes)}
    for pred, tgt in zip(predictions, targets, strict=True):
        h, w = np.asarray(pred).shape
        for i in range(h):
            for j in range(w):
                p, t = int(pred[i][j]), int(tgt[i][j])
                if p == t:
                    inter[p] += 1
                    union[p] += 1
                else:
                    union[p] += 1
                    union[t] += 1
    ious = [inter[c] / union[c] for c in range(num_classes) if union[c] > 0]
    return float(sum(ious) / len(ious))


# ------------------------------------------------------------------- AP@0.5


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = int((a | b).sum())
    if union == 0:
        return 0.0
    return int((a & b).sum()) / union


def _check_binary(mask: np.ndarray) -> None:
    arr = np.asarray(mask)
    if arr.dtype != bool and not np.isin(arr, (0, 1)).all():
        raise ValueError("prediction masks must be binary")


def _ranked(predictions_per_image: list[list[InstancePrediction]], cls: int):
    """Deterministic global ranking of one class's predictions."""
    entries = []
    for img, preds in enumerate(predictions_per_image):
        for k, p in enumerate(preds):
            if p.class_id == cls:
                entries.append((-p.confidence, img, k, p))
    entries.sort(key=lambda e: e[:3])
    return [(img, p) for _, img, _, p in entries]


def _greedy_flags(ranked, gts_per_image, cls: int, iou_threshold: float) -> list[bool]:
    """True/false-positive flags in rank order; each gt matched at most once."""
    matched: set[tuple[int, int]] = set()
    flags = []
    for img, pred in ranked:
        best_iou, best_j = 0.0, -1
        for j, (gcls, gmask) in enumerate(gts_per_image[img]):
            if gcls != cls or (img, j) in matched:
                continue
            iou = _mask_iou(pred.mask, gmask)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_threshold:
            matched.add((img, best_j))
            flags.append(True)
        else:
            flags.append(False)
    return flags


def ap50(
    predictions_per_image: list[list[InstancePrediction]],
    gts_per_image: list[list[tuple[int, np.ndarray]]],
    iou_threshold: float = 0.5,
) -> float:
    """Mean average precision at mask IoU 0.5 (all-point interpolation)."""
    if len(predictions_per_image) != len(gts_per_image):
        raise ValueError("prediction and ground-truth image counts differ")
    for preds in predictions_per_image:
        for p in preds:
            _check_binary(p.mask)

    classes = sorted({cls for gts in gts_per_image for cls, _ in gts})
    if not classes:
        raise ValueError("no ground-truth instances to evaluate against")
    aps = []
    for cls in classes:
        n_gt = sum(1 for gts in gts_per_image for gcls, _ in gts if gcls == cls)
        ranked = _ranked(predictions_per_image, cls)
        if not ranked:
            aps.append(0.0)
            continue
        flags = _greedy_flags(ranked, gts_per_image, cls, iou_threshold)
        tp = np.cumsum(flags)
        fp = np.cumsum([not f for f in flags])
        recall = tp / n_gt
        precision = tp / (tp + fp)
        envelope = np.maximum.accumulate(precision[::-1])[::-1]
        prev_r = 0.0
        ap = 0.0
        for k in range(len(ranked)):
            if flags[k]:
                ap += (recall[k] - prev_r) * envelope[k]
                prev_r = recall[k]
        aps.append(float(ap))
    return float(np.mean(aps))


def ap50_reference(
    predictions_per_image: list[list[InstancePrediction]],
    gts_per_image: list[list[tuple[int, np.ndarray]]],
    iou_threshold: float = 0.5,
) -> float:
    """Oracle: re-match every ranked prefix from scratch, then take the
    textbook sum over recall steps of the best precision at or beyond each."""
    classes = sorted({cls for gts in gts_per_image for cls, _ in gts})
    aps = []
    for cls in classes:
        n_gt = sum(1 for gts in gts_per_image for gcls, _ in gts if gcls == cls)
        ranked = _ranked(predictions_per_image, cls)
        points = []  # (recall, precision) per prefix
        for k in range(1, len(ranked) + 1):
            flags = _greedy_flags(ranked[:k], gts_per_image, cls, iou_threshold)
            tp = sum(flags)
            points.append((tp / n_gt, tp / k))
        ap = 0.0
        prev_r = 0.0
        for i, (r, _) in enumerate(points):
            if r > prev_r:
                best_p = max(p for rr, p in points[i:] if rr >= r)
                ap += (r - prev_r) * best_p
                prev_r = r
        aps.append(ap)
    return float(np.mean(aps))


def ap50_per_class(
    predictions_per_image: list[list[InstancePrediction]],
    gts_per_image: list[list[tuple[int, np.ndarray]]],
    iou_threshold: float = 0.5,
) -> dict[int, float]:
    classes = sorted({cls for gts in gts_per_image for cls, _ in gts})
    out = {}
    for cls in classes:
        filtered_gts = [[(c, m) for c, m in gts if c == cls] for gts in gts_per_image]
        filtered_preds = [[p for p in preds if p.class_id == cls] for preds in predictions_per_image]
        if not any(filtered_gts):
            continue
        out[cls] = ap50(filtered_preds, filtered_gts, iou_threshold)
    return out
