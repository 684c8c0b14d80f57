"""Training objectives for the segmenter and the sequential decoders.

Sequence losses pair prediction steps with ground-truth instances via a
minimum-cost assignment on (1 - sIoU) and back-propagate only through the
matched pairs; unmatched steps receive stop supervision alone, since their
masks have no defined target.  Stop targets follow the optimal assignment,
not step order: the decoder imposes no order on its output sequence.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .matching import Assignment, hungarian, masked_hungarian, siou_cost_matrix
from .models import DecodeBatch


@dataclass
class LossBreakdown:
    total: Tensor
    mask_term: float
    class_term: float = 0.0
    stop_term: float = 0.0
    assignments: list[Assignment] = field(default_factory=list)

    @property
    def value(self) -> float:
        return float(self.total.value)


def semantic_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy over C+1 classes including background."""
    labels = np.asarray(labels)
    if labels.shape != logits.value.shape[:-1]:
        raise ValueError("label shape must match logits spatial shape")
    n_classes = logits.value.shape[-1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("label id out of range")
    onehot = np.eye(n_classes)[labels]
    return ad.mean(ad.cross_entropy_logits(logits, onehot))


def _gt_arrays(gt_instances, height, width):
    masks = [np.asarray(m, dtype=np.float64).reshape(-1) for _, m in gt_instances]
    classes = [int(c) for c, _ in gt_instances]
    return classes, masks


def _batched_siou(mask_stack: Tensor, targets: np.ndarray, target_sums: np.ndarray) -> Tensor:
    """Per-(image, step) soft IoU against constant targets (zero where unmatched)."""
    inter = ad.sum_(mask_stack * targets, axis=2)
    pred_sum = ad.sum_(mask_stack, axis=2)
    return inter / (pred_sum + Tensor(target_sums) - inter)


def rsis_loss(
    batch: DecodeBatch,
    gt_instances: list[list[tuple[int, np.ndarray]]],
    lambda_cls: float = 1.0,
    lambda_stop: float = 1.0,
    sample_weights: np.ndarray | None = None,
    normalizer: float | None = None,
) -> LossBreakdown:
    """Hungarian-matched sIoU + class cross-entropy + stop BCE.

    Per image: mean (1 - sIoU) over matched pairs, mean class cross-entropy
    over matched steps, mean stop BCE over all steps (target 1 on matched
    rows, 0 elsewhere); terms then average over the batch.  An explicit
    ``normalizer`` replaces the weight sum so chunked gradient accumulation
    reproduces the full-batch loss exactly.
    """
    t_steps = len(batch.mask_logits)
    b = batch.mask_logits[0].value.shape[0]
    if len(gt_instances) != b:
        raise ValueError("one ground-truth instance list per image required")
    for gts in gt_instances:
        if len(gts) > t_steps:
            raise ValueError("fewer prediction steps than ground-truth instances")
    n_cls = batch.class_logits[0].value.shape[1]
    hw = batch.mask_logits[0].value.shape[1]
    weights = np.ones(b) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    norm = float(weights.sum()) if normalizer is None else float(normalizer)
    if norm <= 0:
        raise ValueError("sample weights must sum to a positive value")

    masks = [ad.sigmoid(m) for m in batch.mask_logits]
    pred_values = np.stack([m.value for m in masks], axis=1)  # (B, T, HW)

    targets = np.zeros((b, t_steps, hw))
    target_sums = np.zeros((b, t_steps))
    mask_w = np.zeros((b, t_steps))
    cls_onehot = np.zeros((b, t_steps, n_cls))
    cls_w = np.zeros((b, t_steps))
    stop_targets = np.zeros((b, t_steps))
    assignments: list[Assignment] = []

    for i, gts in enumerate(gt_instances):
        if not gts:
            assignments.append(Assignment(pairs=(), total_cost=0.0))
            continue
        classes, gt_masks = _gt_arrays(gts, batch.height, batch.width)
        costs = siou_cost_matrix(pred_values[i], np.stack(gt_masks))
        assignment = hungarian(costs)
        assignments.append(assignment)
        for row, col in assignment.pairs:
            targets[i, row] = gt_masks[col]
            target_sums[i, row] = gt_masks[col].sum()
            mask_w[i, row] = weights[i] / (len(assignment.pairs) * norm)
            cls_onehot[i, row, classes[col] - 1] = 1.0
            cls_w[i, row] = weights[i] / (len(assignment.pairs) * norm)
            stop_targets[i, row] = 1.0

    mask_stack = ad.stack(masks, axis=1)
    siou = _batched_siou(mask_stack, targets, target_sums)
    mask_term = ad.sum_((Tensor(np.ones_like(mask_w)) - siou) * mask_w)

    cls_stack = ad.stack(batch.class_logits, axis=1)
    ce = ad.cross_entropy_logits(cls_stack, cls_onehot)
    class_term = ad.sum_(ce * cls_w)

    stop_stack = ad.stack(batch.stop_logits, axis=1)
    stop_w = (weights / (t_steps * norm))[:, None] * np.ones((1, t_steps))
    stop_term = ad.sum_(ad.binary_cross_entropy_logits(stop_stack, stop_targets) * stop_w)

    total = mask_term + lambda_cls * class_term + lambda_stop * stop_term
    return LossBreakdown(
        total=total,
        mask_term=float(mask_term.value),
        class_term=float(class_term.value),
        stop_term=float(stop_term.value),
        assignments=assignments,
    )


def wrsis_loss(
    batch: DecodeBatch,
    gt_instances: list[list[tuple[int, np.ndarray]]],
    masked: bool = True,
    sample_weights: np.ndarray | None = None,
    normalizer: float | None = None,
) -> LossBreakdown:
    """Class-masked Hungarian on (1 - sIoU); mask term only.

    Step i carries the class of its input token; pairs are restricted to
    equal classes (``masked=False`` drops that restriction, the ablation
    that loses input/output class alignment).  The token multiset must
    equal the ground-truth class multiset.
    """
    if batch.token_classes is None:
        raise ValueError("wrsis_loss needs a token-conditioned decode")
    t_steps = len(batch.mask_logits)
    b = batch.mask_logits[0].value.shape[0]
    hw = batch.mask_logits[0].value.shape[1]
    weights = np.ones(b) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    norm = float(weights.sum()) if normalizer is None else float(normalizer)

    masks = [ad.sigmoid(m) for m in batch.mask_logits]
    pred_values = np.stack([m.value for m in masks], axis=1)

    targets = np.zeros((b, t_steps, hw))
    target_sums = np.zeros((b, t_steps))
    mask_w = np.zeros((b, t_steps))
    assignments: list[Assignment] = []

    for i, gts in enumerate(gt_instances):
        real = batch.step_mask[i] > 0
        token_cls = [int(c) for c in batch.token_classes[i][real]]
        classes, gt_masks = _gt_arrays(gts, batch.height, batch.width)
        if Counter(token_cls) != Counter(classes):
            raise ValueError(
                f"token class multiset {sorted(token_cls)} does not match "
                f"ground truth {sorted(classes)} (corrupt weak label)"
            )
        costs = siou_cost_matrix(pred_values[i, : len(token_cls)], np.stack(gt_masks))
        if masked:
            assignment = masked_hungarian(costs, token_cls, classes)
        else:
            assignment = hungarian(costs)
        assignments.append(assignment)
        for row, col in assignment.pairs:
            targets[i, row] = gt_masks[col]
            target_sums[i, row] = gt_masks[col].sum()
            mask_w[i, row] = weights[i] / (len(assignment.pairs) * norm)

    mask_stack = ad.stack(masks, axis=1)
    siou = _batched_siou(mask_stack, targets, target_sums)
    mask_term = ad.sum_((Tensor(np.ones_like(mask_w)) - siou) * mask_w)
    return LossBreakdown(
        total=mask_term,
        mask_term=float(mask_term.value),
        assignments=assignments,
    )
