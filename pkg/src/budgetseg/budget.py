"""Annotation-cost model and budget planning.

Per-image labeling times for the four supervision signals are derived from
three dataset statistics (average classes present, average objects, total
classes) plus per-action timings.  All costs are real-valued seconds; days
are a display convention (truncated, not rounded, to two decimals).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction

SECONDS_PER_DAY = 86_400.0

# Float-tolerance slack (seconds) when comparing costs against a budget.
# Boundary gaps in any sane cost model are >> 1e-6 s.
_BUDGET_EPS = 1e-6


class SupervisionKind(enum.Enum):
    """Level of supervision attached to an image."""

    IMAGE_LEVEL = "il"
    IMAGE_LEVEL_COUNTS = "il+c"
    BOUNDING_BOXES = "bb"
    FULL_MASKS = "full"
    UNLABELED = "none"

    @classmethod
    def parse(cls, text: str) -> "SupervisionKind":
        aliases = {
            "il": cls.IMAGE_LEVEL,
            "image-level": cls.IMAGE_LEVEL,
            "il+c": cls.IMAGE_LEVEL_COUNTS,
            "ilc": cls.IMAGE_LEVEL_COUNTS,
            "counts": cls.IMAGE_LEVEL_COUNTS,
            "bb": cls.BOUNDING_BOXES,
            "boxes": cls.BOUNDING_BOXES,
            "full": cls.FULL_MASKS,
            "masks": cls.FULL_MASKS,
            "none": cls.UNLABELED,
            "unlabeled": cls.UNLABELED,
        }
        key = text.strip().lower()
        if key not in aliases:
            raise ValueError(f"unknown supervision kind: {text!r}")
        return aliases[key]


@dataclass(frozen=True)
class CostModel:
    """Per-image annotation-time parameters (Pascal-style statistics).

    ``absent_verify_classes`` is exposed independently even though the
    default equals ``classes_total - classes_present_avg``.
    """

    classes_total: int = 20
    classes_present_avg: float = 1.5
    objects_avg: float = 2.8
    verify_time: float = 1.0        # s per class presence check
    count_extra_time: float = 1.48  # s per present class, counting overhead
    mask_time: float = 79.0         # s per instance mask
    box_time: float = 7.0           # s per bounding box
    absent_verify_classes: float = 18.5

    def __post_init__(self) -> None:
        for field in (
            "classes_total",
            "classes_present_avg",
            "objects_avg",
            "verify_time",
            "count_extra_time",
            "mask_time",
            "box_time",
            "absent_verify_classes",
        ):
            if getattr(self, field) <= 0:
                raise ValueError(f"CostModel.{field} must be strictly positive")


DEFAULT_COST_MODEL = CostModel()


@dataclass(frozen=True)
class Allocation:
    """A labeled-set composition: N strong images plus M weak/unlabeled ones."""

    n_strong: int
    strong_kind: SupervisionKind = SupervisionKind.FULL_MASKS
    m_weak: int = 0
    weak_kind: SupervisionKind = SupervisionKind.UNLABELED

    def __post_init__(self) -> None:
        if self.n_strong < 0 or self.m_weak < 0:
            raise ValueError("allocation sizes must be nonnegative")


def per_image_cost(kind: SupervisionKind, model: CostModel = DEFAULT_COST_MODEL) -> float:
    """Average annotation seconds for one image at the given supervision level.

    Image-level: verify every class of the dataset.  Counts add a per-present-
    class surcharge.  Masks/boxes pay verification of absent classes plus a
    per-object drawing time.  Unlabeled data is free.
    """
    if kind is SupervisionKind.IMAGE_LEVEL:
        return model.classes_total * model.verify_time
    if kind is SupervisionKind.IMAGE_LEVEL_COUNTS:
        return (
            model.classes_total * model.verify_time
            + model.classes_present_avg * model.count_extra_time
        )
    if kind is SupervisionKind.FULL_MASKS:
        return (
            model.absent_verify_classes * model.verify_time
            + model.objects_avg * model.mask_time
        )
    if kind is SupervisionKind.BOUNDING_BOXES:
        return (
            model.absent_verify_classes * model.verify_time
            + model.objects_avg * model.box_time
        )
    if kind is SupervisionKind.UNLABELED:
        return 0.0
    raise ValueError(f"unknown supervision kind: {kind!r}")


def allocation_cost(alloc: Allocation, model: CostModel = DEFAULT_COST_MODEL) -> float:
    """Total annotation seconds for an allocation."""
    return alloc.n_strong * per_image_cost(alloc.strong_kind, model) + alloc.m_weak * per_image_cost(alloc.weak_kind, model)


def seconds_to_days(seconds: float) -> float:
    """Raw day value (seconds / 86400), no rounding."""
    if seconds < 0:
        raise ValueError("seconds must be nonnegative")
    return seconds / SECONDS_PER_DAY


def seconds_to_days_display(seconds: float) -> str:
    """Days truncated (not rounded) to two decimals, as a string.

    Truncation is exact over the binary value of ``seconds`` (Fraction
    arithmetic), so the bound display*86400 <= seconds < (display+0.01)*86400
    holds for every representable input.
    """
    if seconds < 0:
        raise ValueError("seconds must be nonnegative")
    hundredths = int(Fraction(seconds) * 100 / 86_400)
    return f"{hundredths // 100}.{hundredths % 100:02d}"


def allocations_for_budget(
    budget_seconds: float,
    strong_kind: SupervisionKind = SupervisionKind.FULL_MASKS,
    weak_kind: SupervisionKind = SupervisionKind.UNLABELED,
    model: CostModel = DEFAULT_COST_MODEL,
) -> list[Allocation]:
    """Pareto-maximal (N, M) compositions affordable within the budget.

    For each strong count N from the strong-only maximum down to 0, pairs N
    with the largest affordable M; rows whose M ties the next-larger N are
    dominated and dropped.  A free weak kind (unlabeled) makes M unbounded,
    so only the strong-only maximum is returned.
    """
    if budget_seconds < 0:
        raise ValueError("budget must be nonnegative")
    strong_cost = per_image_cost(strong_kind, model)
    weak_cost = per_image_cost(weak_kind, model)
    if strong_cost <= 0:
        raise ValueError("strong kind must have positive cost")

    budget = budget_seconds + _BUDGET_EPS
    max_n = int(budget // strong_cost)
    if weak_cost <= 0:
        return [Allocation(max_n, strong_kind, 0, weak_kind)]

    result: list[Allocation] = []
    prev_m = -1
    for n in range(max_n, -1, -1):
        m = int((budget - n * strong_cost) // weak_cost)
        if m > prev_m:
            result.append(Allocation(n, strong_kind, m, weak_kind))
            prev_m = m
    return result
