"""Deterministic synthetic-shapes scenes with instance masks.

Every scene is a pure function of (seed, index): sampling uses a
counter-based Philox stream keyed by (seed, index, purpose), so generation
is order-independent and reproducible bit for bit.  Shapes are painted
back to front; an instance's mask covers only its visible pixels, and
fully occluded instances are dropped.  Images are quantized to 8-bit
levels at generation time so the on-disk PPM/PGM round trip is exact.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .budget import Allocation, SupervisionKind

SHAPE_NAMES = {1: "circle", 2: "square", 3: "triangle", 4: "cross"}

# base colors correlate with class so that desk-scale networks can learn
# categories; per-instance jitter keeps the correlation imperfect
CLASS_COLORS = {
    1: (0.85, 0.25, 0.25),
    2: (0.25, 0.80, 0.30),
    3: (0.30, 0.40, 0.85),
    4: (0.85, 0.80, 0.25),
}


class GenerationError(Exception):
    """Scene generation is infeasible under the given configuration."""


@dataclass(frozen=True)
class DataConfig:
    image_height: int = 48
    image_width: int = 48
    num_classes: int = 4
    min_instances: int = 1
    max_instances: int = 4
    min_extent: int = 5   # half-extent of a shape, pixels
    max_extent: int = 9
    allow_overlap: bool = True
    color_noise: float = 0.10
    pixel_noise: float = 0.03
    background_level: float = 0.15
    seed: int = 0

    def __post_init__(self) -> None:
        if not (self.max_instances >= self.min_instances >= 1):
            raise ValueError("need max_instances >= min_instances >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.num_classes > len(SHAPE_NAMES):
            raise ValueError(f"at most {len(SHAPE_NAMES)} shape classes available")
        if self.min_extent < 2 or self.max_extent < self.min_extent:
            raise ValueError("invalid shape extent range")


@dataclass
class Scene:
    """An image plus its full instance and semantic annotation."""

    index: int
    image: np.ndarray                      # (H, W, 3) float64 in [0, 1]
    instances: list[tuple[int, np.ndarray]]  # (class_id, bool mask), draw order
    semantic: np.ndarray                   # (H, W) int64, 0 = background


@dataclass
class LabelSet:
    """All four supervision signals derived from the full annotation.

    A restricted view keeps only the fields its supervision kind pays for;
    missing fields are None.
    """

    full: list[tuple[int, np.ndarray]] | None = None
    boxes: list[tuple[int, tuple[int, int, int, int]]] | None = None
    image_level: tuple[int, ...] | None = None
    counts: dict[int, int] | None = None


@dataclass
class DatasetSplit:
    strong: list[tuple[Scene, LabelSet]]
    weak: list[tuple[Scene, LabelSet]]
    unlabeled: list[Scene]
    allocation: Allocation


def rng_for(seed: int, index: int, purpose: str) -> np.random.Generator:
    """Named counter-based stream; independent per (seed, index, purpose)."""
    digest = hashlib.blake2b(
        f"{seed}:{index}:{purpose}".encode(), digest_size=16
    ).digest()
    key = np.frombuffer(digest, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _shape_mask(kind: int, cy: float, cx: float, r: float, h: int, w: int) -> np.ndarray:
    rr, cc = np.mgrid[0:h, 0:w]
    dy, dx = rr - cy, cc - cx
    if kind == 1:  # circle
        return dy * dy + dx * dx <= r * r
    if kind == 2:  # square
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == 3:  # upward triangle: apex (cy-r, cx), base (cy+r, cx +- r)
        inside = dy >= -r
        inside &= dy + 2.0 * dx >= -r  # left edge
        inside &= dy - 2.0 * dx >= -r  # right edge
        return inside & (dy <= r)
    if kind == 4:  # cross: two overlapping bars
        bar = max(r / 3.0, 1.0)
        horiz = (np.abs(dy) <= bar) & (np.abs(dx) <= r)
        vert = (np.abs(dx) <= bar) & (np.abs(dy) <= r)
        return horiz | vert
    raise ValueError(f"unknown shape class {kind}")


def generate_scene(config: DataConfig, index: int) -> Scene:
    """Deterministic scene for (config.seed, index)."""
    if index < 0:
        raise ValueError("index must be nonnegative")
    h, w = config.image_height, config.image_width
    if 2 * config.max_extent + 2 > min(h, w):
        raise GenerationError("largest shape cannot fit in the canvas")
    rng = rng_for(config.seed, index, "scene")

    n = int(rng.integers(config.min_instances, config.max_instances + 1))
    drawn: list[tuple[int, np.ndarray]] = []
    occupied = np.zeros((h, w), dtype=bool)
    for _ in range(n):
        cls = int(rng.integers(1, config.num_classes + 1))
        for attempt in range(200):
            r = float(rng.uniform(config.min_extent, config.max_extent))
            cy = float(rng.uniform(r, h - 1 - r))
            cx = float(rng.uniform(r, w - 1 - r))
            mask = _shape_mask(cls, cy, cx, r, h, w)
            if not mask.any():
                continue
            if config.allow_overlap or not (mask & occupied).any():
                break
        else:
            raise GenerationError("could not place a non-overlapping shape")
        occupied |= mask
        drawn.append((cls, mask))

    # painter's algorithm: later shapes occlude earlier ones
    image = np.empty((h, w, 3))
    bg = config.background_level + rng.uniform(-0.05, 0.05)
    image[:] = bg
    semantic = np.zeros((h, w), dtype=np.int64)
    colors = []
    for cls, mask in drawn:
        base = np.array(CLASS_COLORS[cls])
        jitter = rng.uniform(-config.color_noise, config.color_noise, size=3)
        colors.append(np.clip(base + jitter, 0.0, 1.0))
    for (cls, mask), color in zip(drawn, colors):
        image[mask] = color
        semantic[mask] = cls

    image += rng.uniform(-config.pixel_noise, config.pixel_noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    image = np.round(image * 255.0) / 255.0  # 8-bit levels: exact file round trip

    instances: list[tuple[int, np.ndarray]] = []
    later = np.zeros((h, w), dtype=bool)
    for cls, mask in reversed(drawn):
        visible = mask & ~later
        later |= mask
        if visible.any():
            instances.append((cls, visible))
    instances.reverse()
    if not instances:
        raise GenerationError("all instances fully occluded")
    return Scene(index=index, image=image, instances=instances, semantic=semantic)


def generate_pool(config: DataConfig, count: int, start_index: int = 0) -> list[Scene]:
    return [generate_scene(config, i) for i in range(start_index, start_index + count)]


def derive_labels(scene: Scene) -> LabelSet:
    """All four supervision signals, derived from the full masks only."""
    boxes = []
    counts: dict[int, int] = {}
    for cls, mask in scene.instances:
        rows, cols = np.nonzero(mask)
        boxes.append((cls, (int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))))
        counts[cls] = counts.get(cls, 0) + 1
    return LabelSet(
        full=[(cls, mask.copy()) for cls, mask in scene.instances],
        boxes=boxes,
        image_level=tuple(sorted(counts)),
        counts=dict(sorted(counts.items())),
    )


def restrict_labels(labels: LabelSet, kind: SupervisionKind) -> LabelSet:
    """Keep only the signal the supervision kind pays for."""
    if kind is SupervisionKind.FULL_MASKS:
        return replace(labels)
    if kind is SupervisionKind.BOUNDING_BOXES:
        return LabelSet(boxes=labels.boxes, image_level=labels.image_level)
    if kind is SupervisionKind.IMAGE_LEVEL:
        return LabelSet(image_level=labels.image_level)
    if kind is SupervisionKind.IMAGE_LEVEL_COUNTS:
        return LabelSet(image_level=labels.image_level, counts=labels.counts)
    if kind is SupervisionKind.UNLABELED:
        return LabelSet()
    raise ValueError(f"unknown supervision kind {kind!r}")


def split_dataset(scenes: list[Scene], alloc: Allocation, split_seed: int) -> DatasetSplit:
    """Disjoint strong/weak/unlabeled subsets drawn deterministically."""
    n, m = alloc.n_strong, alloc.m_weak
    if len(scenes) < n + m:
        raise ValueError(f"need at least {n + m} scenes, got {len(scenes)}")
    if alloc.strong_kind is not SupervisionKind.FULL_MASKS:
        raise ValueError("strong samples must carry full masks")
    perm = rng_for(split_seed, 0, "split").permutation(len(scenes))
    strong = [scenes[i] for i in perm[:n]]
    rest = [scenes[i] for i in perm[n : n + m]]
    strong_pairs = [(s, derive_labels(s)) for s in strong]
    if alloc.weak_kind is SupervisionKind.UNLABELED:
        return DatasetSplit(strong=strong_pairs, weak=[], unlabeled=rest, allocation=alloc)
    weak_pairs = [(s, restrict_labels(derive_labels(s), alloc.weak_kind)) for s in rest]
    return DatasetSplit(strong=strong_pairs, weak=weak_pairs, unlabeled=[], allocation=alloc)


# ------------------------------------------------------------------ file I/O


def write_ppm(path: str, image01: np.ndarray) -> None:
    """Binary PPM (P6), 8-bit; input floats in [0,1] on 1/255 levels."""
    data = np.round(np.asarray(image01) * 255.0).astype(np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, dims, maxval = fh.readline(), fh.readline(), fh.readline()
        if magic.strip() != b"P6" or maxval.strip() != b"255":
            raise ValueError(f"unsupported PPM file: {path}")
        w, h = (int(t) for t in dims.split())
        data = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    return (data.reshape(h, w, 3).astype(np.float64)) / 255.0


def write_pgm(path: str, gray: np.ndarray) -> None:
    """Binary PGM (P5), 8-bit."""
    data = np.asarray(gray).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, dims, maxval = fh.readline(), fh.readline(), fh.readline()
        if magic.strip() != b"P5" or maxval.strip() != b"255":
            raise ValueError(f"unsupported PGM file: {path}")
        w, h = (int(t) for t in dims.split())
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8)
    return data.reshape(h, w)


def save_dataset(
    out_dir: str,
    scenes: Iterable[Scene],
    split_of: dict[int, str] | None = None,
    label_kind_of: dict[int, str] | None = None,
) -> None:
    """Write scenes, masks, labels.jsonl and manifest.csv under ``out_dir``."""
    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)

    manifest_rows = []
    with open(os.path.join(out_dir, "labels.jsonl"), "w") as labels_fh:
        for scene in scenes:
            idx = scene.index
            image_rel = f"images/scene_{idx:06d}.ppm"
            sem_rel = f"masks/scene_{idx:06d}_sem.pgm"
            write_ppm(os.path.join(out_dir, image_rel), scene.image)
            write_pgm(os.path.join(out_dir, sem_rel), scene.semantic)
            inst_rels = []
            for k, (_, mask) in enumerate(scene.instances):
                rel = f"masks/scene_{idx:06d}_inst_{k:02d}.pgm"
                write_pgm(os.path.join(out_dir, rel), mask.astype(np.uint8) * 255)
                inst_rels.append(rel)
            labels = derive_labels(scene)
            labels_fh.write(
                json.dumps(
                    {
                        "index": idx,
                        "classes": list(labels.image_level),
                        "counts": {str(c): n for c, n in labels.counts.items()},
                        "boxes": [[cls, *box] for cls, box in labels.boxes],
                    },
                    sort_keys=True,
                )
                + "\n"
            )
            manifest_rows.append(
                (
                    idx,
                    (split_of or {}).get(idx, "pool"),
                    (label_kind_of or {}).get(idx, "full"),
                    image_rel,
                    sem_rel,
                    ";".join(inst_rels),
                )
            )

    with open(os.path.join(out_dir, "manifest.csv"), "w") as fh:
        fh.write("index,split,label_kind,image,semantic,instances\n")
        for row in manifest_rows:
            fh.write(",".join(str(x) for x in row) + "\n")


def load_dataset(out_dir: str) -> list[Scene]:
    """Re-read a saved dataset; inverse of ``save_dataset`` bit for bit."""
    with open(os.path.join(out_dir, "labels.jsonl")) as fh:
        labels_by_index = {obj["index"]: obj for obj in map(json.loads, fh)}

    scenes = []
    with open(os.path.join(out_dir, "manifest.csv")) as fh:
        header = fh.readline().strip().split(",")
        if header[:3] != ["index", "split", "label_kind"]:
            raise ValueError("unexpected manifest header")
        for line in fh:
            idx_s, _split, _kind, image_rel, sem_rel, inst_field = line.rstrip("\n").split(",")
            idx = int(idx_s)
            image = read_ppm(os.path.join(out_dir, image_rel))
            semantic = read_pgm(os.path.join(out_dir, sem_rel)).astype(np.int64)
            inst_classes = [box[0] for box in labels_by_index[idx]["boxes"]]
            instances = []
            rels = inst_field.split(";") if inst_field else []
            for cls, rel in zip(inst_classes, rels):
                mask = read_pgm(os.path.join(out_dir, rel)) > 0
                instances.append((int(cls), mask))
            scenes.append(Scene(index=idx, image=image, instances=instances, semantic=semantic))
    return scenes
