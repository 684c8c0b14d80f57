"""Two-network semi-supervised training: annotate, pseudo-label, re-train.

An annotation network learns from the N strong samples (optionally
conditioned on weak class-count labels), produces pseudo-labels for the
M weak/unlabeled samples, and a segmentation network of the unconditioned
architecture trains on the union.  The segmenter never sees weak labels:
at test time it runs from the image alone.

Pseudo-labels are built from annotator outputs plus, for the weak
variants, the weak labels themselves; the hidden ground truth of the weak
set is never read.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import SGD
from .budget import Allocation, SupervisionKind, allocation_cost, seconds_to_days_display
from .losses import rsis_loss, semantic_loss, wrsis_loss
from .metrics import ConfusionAccumulator, InstancePrediction, ap50
from .models import (
    ConditionedInstanceNet,
    ModelConfig,
    RecurrentInstanceNet,
    SemanticNet,
    tokens_for_counts,
)
from .synthdata import DataConfig, DatasetSplit, LabelSet, Scene, generate_pool, rng_for, split_dataset

EVAL_INDEX_BASE = 1_000_000  # reserved scene indices for the shared held-out split


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class AnnotatorVariant(enum.Enum):
    PLAIN = "plain"            # stop-truncated free decoding
    PLAIN_IL = "plain+il"      # class argmax masked to the image-level set
    PLAIN_ILC = "plain+il+c"   # additionally truncated by per-class counts
    CONDITIONED = "wrsis"      # class tokens drive the decoder
    SEMANTIC = "semantic"      # per-pixel segmenter

    @property
    def needs_weak_labels(self) -> bool:
        return self in (AnnotatorVariant.PLAIN_IL, AnnotatorVariant.PLAIN_ILC, AnnotatorVariant.CONDITIONED)

    @classmethod
    def parse(cls, text: str) -> "AnnotatorVariant":
        for v in cls:
            if v.value == text.strip().lower():
                return v
        raise ValueError(f"unknown annotator variant: {text!r}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    epochs_annotator: int = 300
    epochs_segmenter: int = 300
    chunk_size: int = 64
    lambda_cls: float = 1.0
    lambda_stop: float = 1.0
    pseudo_weight: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    n_strong: int
    m_weak: int
    weak_kind: SupervisionKind = SupervisionKind.UNLABELED
    variant: AnnotatorVariant = AnnotatorVariant.PLAIN
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    stop_threshold: float = 0.5
    repeats: int = 5
    data_seed: int = 0
    split_seed: int = 1
    init_seed: int = 2
    pool_size: int | None = None
    eval_size: int = 256
    masked_matching: bool = True  # masked vs plain Hungarian for the conditioned variant

    def __post_init__(self) -> None:
        if self.repeats < 1:
            raise ValueError("repeats must be at least 1")
        if self.n_strong < 1:
            raise ValueError("n_strong must be at least 1")
        if self.variant.needs_weak_labels:
            needed = (
                (SupervisionKind.IMAGE_LEVEL_COUNTS,)
                if self.variant in (AnnotatorVariant.PLAIN_ILC, AnnotatorVariant.CONDITIONED)
                else (
                    SupervisionKind.IMAGE_LEVEL,
                    SupervisionKind.IMAGE_LEVEL_COUNTS,
                    SupervisionKind.BOUNDING_BOXES,
                )
            )
            if self.weak_kind not in needed:
                raise ValueError(
                    f"variant {self.variant.value} needs weak kind in "
                    f"{[k.value for k in needed]}, got {self.weak_kind.value}"
                )

    @property
    def max_steps(self) -> int:
        # one step beyond the instance maximum so the stop head sees a
        # "should stop" position in every image
        return self.data.max_instances + 1

    @property
    def allocation(self) -> Allocation:
        return Allocation(self.n_strong, SupervisionKind.FULL_MASKS, self.m_weak, self.weak_kind)

    def config_hash(self) -> str:
        def encode(obj):
            if isinstance(obj, enum.Enum):
                return obj.value
            raise TypeError(f"unhashable config field {obj!r}")

        canonical = json.dumps(asdict(self), sort_keys=True, default=encode)
        return hashlib.sha256(canonical.encode()).hexdigest()[:12]


@dataclass
class PseudoLabeledImage:
    """Annotator output for one weak/unlabeled image."""

    scene_index: int
    image: np.ndarray
    instances: list[tuple[int, np.ndarray]] = field(default_factory=list)
    confidences: list[float] = field(default_factory=list)
    semantic: np.ndarray | None = None


@dataclass
class RepeatResult:
    repeat: int
    f_score: float
    g_score: float
    n_pseudo_images: int
    n_pseudo_instances: int


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    repeats: list[RepeatResult]
    budget_seconds: float
    budget_days_display: str
    score_name: str  # "ap50" or "miou"

    @property
    def mean_f(self) -> float:
        return float(np.mean([r.f_score for r in self.repeats]))

    @property
    def mean_g(self) -> float:
        return float(np.mean([r.g_score for r in self.repeats]))


def derive_seed(base: int, repeat: int, purpose: str) -> int:
    digest = hashlib.blake2b(f"{base}:{repeat}:{purpose}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def _chunks(n: int, size: int):
    for lo in range(0, n, size):
        yield lo, min(lo + size, n)


def _pad_tokens(token_lists: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    t_max = max(len(t) for t in token_lists)
    tokens = np.zeros((len(token_lists), t_max), dtype=int)
    step_mask = np.zeros((len(token_lists), t_max))
    for i, toks in enumerate(token_lists):
        tokens[i, : len(toks)] = toks
        step_mask[i, : len(toks)] = 1.0
    return tokens, step_mask


def _gt_lists(labels: list[LabelSet]) -> list[list[tuple[int, np.ndarray]]]:
    return [[(cls, mask.astype(np.float64)) for cls, mask in lbl.full] for lbl in labels]


def _run_epochs(opt: SGD, epochs: int, epoch_fn, what: str) -> list[float]:
    history = []
    for epoch in range(epochs):
        opt.zero_grad()
        try:
            loss_value = epoch_fn()
        except FloatingPointError as exc:
            raise DivergenceError(f"{what}: non-finite loss at epoch {epoch}: {exc}") from exc
        if not np.isfinite(loss_value):
            raise DivergenceError(f"{what}: non-finite loss at epoch {epoch}")
        opt.step()
        history.append(loss_value)
    return history


def train_annotator(
    config: ExperimentConfig, split: DatasetSplit, init_seed: int
) -> tuple[object, list[float]]:
    """Fit the annotation network on the strong set; returns (net, loss history)."""
    if not split.strong:
        raise ValueError("training requires at least one strong sample")
    variant = config.variant
    images = np.stack([scene.image for scene, _ in split.strong])
    labels = [lbl for _, lbl in split.strong]
    rng = rng_for(init_seed, 0, "init/annotator")
    tc = config.train
    n = len(images)

    if variant is AnnotatorVariant.SEMANTIC:
        net = SemanticNet(config.model, rng)
        sem = np.stack([scene.semantic for scene, _ in split.strong])
        opt = SGD(net.params, tc.lr, tc.momentum)

        def epoch() -> float:
            total = 0.0
            for lo, hi in _chunks(n, tc.chunk_size):
                loss = semantic_loss(net.forward_batch(images[lo:hi]), sem[lo:hi])
                loss.backward(seed=(hi - lo) / n)
                total += float(loss.value) * (hi - lo) / n
            return total

        return net, _run_epochs(opt, tc.epochs_annotator, epoch, "annotator")

    gts = _gt_lists(labels)
    if variant is AnnotatorVariant.CONDITIONED:
        net = ConditionedInstanceNet(config.model, rng)
        tokens, step_mask = _pad_tokens([tokens_for_counts(lbl.counts) for lbl in labels])
        opt = SGD(net.params, tc.lr, tc.momentum)

        def epoch() -> float:
            total = 0.0
            for lo, hi in _chunks(n, tc.chunk_size):
                batch = net.decode_batch(images[lo:hi], tokens[lo:hi], step_mask[lo:hi])
                loss = wrsis_loss(
                    batch, gts[lo:hi], masked=config.masked_matching, normalizer=float(n)
                )
                loss.total.backward()
                total += loss.value
            return total

        return net, _run_epochs(opt, tc.epochs_annotator, epoch, "annotator")

    net = RecurrentInstanceNet(config.model, rng)
    opt = SGD(net.params, tc.lr, tc.momentum)

    def epoch() -> float:
        total = 0.0
        for lo, hi in _chunks(n, tc.chunk_size):
            batch = net.decode_batch(images[lo:hi], config.max_steps)
            loss = rsis_loss(
                batch,
                gts[lo:hi],
                lambda_cls=tc.lambda_cls,
                lambda_stop=tc.lambda_stop,
                normalizer=float(n),
            )
            loss.total.backward()
            total += loss.value
        return total

    return net, _run_epochs(opt, tc.epochs_annotator, epoch, "annotator")


def _binarize(mask: np.ndarray) -> np.ndarray:
    return mask >= 0.5


def _mask_mean_confidence(soft: np.ndarray) -> float:
    fg = soft[soft >= 0.5]
    return float(fg.mean()) if fg.size else 0.0


def pseudo_label(
    net,
    items: list[tuple[int, np.ndarray, LabelSet | None]],
    variant: AnnotatorVariant,
    stop_threshold: float,
    max_steps: int,
) -> list[PseudoLabeledImage]:
    """Predict pseudo-labels for (index, image, weak labels) items.

    Reads only images and weak labels; the weak set's hidden ground truth
    is invisible to this function by construction.
    """
    out = []
    for index, image, weak in items:
        if variant.needs_weak_labels:
            if weak is None or weak.image_level is None:
                raise ValueError(f"variant {variant.value} requires weak labels")
            if variant in (AnnotatorVariant.PLAIN_ILC, AnnotatorVariant.CONDITIONED) and weak.counts is None:
                raise ValueError(f"variant {variant.value} requires per-class counts")

        if variant is AnnotatorVariant.SEMANTIC:
            logits = net.predict(image)
            out.append(
                PseudoLabeledImage(
                    scene_index=index, image=image, semantic=np.argmax(logits, axis=-1)
                )
            )
            continue

        if variant is AnnotatorVariant.CONDITIONED:
            tokens = tokens_for_counts(weak.counts)
            pred = net.predict(image, tokens)
            img_out = PseudoLabeledImage(scene_index=index, image=image)
            for t, cls in enumerate(tokens):  # every token emits; stop score ignored
                mask = _binarize(pred.masks[t])
                if mask.any():
                    img_out.instances.append((cls, mask))
                    img_out.confidences.append(_mask_mean_confidence(pred.masks[t]))
            out.append(img_out)
            continue

        pred = net.predict(image, max_steps)
        if variant is AnnotatorVariant.PLAIN:
            keep = range(pred.survivor_count(stop_threshold))
            class_scores = pred.class_dists
        else:
            il = np.array(weak.image_level, dtype=int)
            class_scores = np.zeros_like(pred.class_dists)
            class_scores[:, il - 1] = pred.class_dists[:, il - 1]
            if variant is AnnotatorVariant.PLAIN_IL:
                keep = range(pred.survivor_count(stop_threshold))
            else:  # PLAIN_ILC: counts bound each class; the stop score is ignored
                remaining = dict(weak.counts)
                keep = []
                for t in range(max_steps):
                    cls = int(np.argmax(class_scores[t])) + 1
                    if remaining.get(cls, 0) > 0:
                        remaining[cls] -= 1
                        keep.append(t)
        img_out = PseudoLabeledImage(scene_index=index, image=image)
        for t in keep:
            mask = _binarize(pred.masks[t])
            if not mask.any():
                continue
            cls = int(np.argmax(class_scores[t])) + 1
            conf = float(pred.stop_scores[t] * class_scores[t].max())
            img_out.instances.append((cls, mask))
            img_out.confidences.append(conf)
        out.append(img_out)
    return out


def weak_items_of(split: DatasetSplit) -> list[tuple[int, np.ndarray, LabelSet | None]]:
    items = [(scene.index, scene.image, weak) for scene, weak in split.weak]
    items += [(scene.index, scene.image, None) for scene in split.unlabeled]
    return items


def train_segmenter(
    config: ExperimentConfig,
    split: DatasetSplit,
    pseudo: list[PseudoLabeledImage],
    init_seed: int,
) -> tuple[object, list[float]]:
    """Fit the unconditioned network on strong + pseudo-labeled union."""
    rng = rng_for(init_seed, 0, "init/segmenter")
    tc = config.train
    strong_imgs = [scene.image for scene, _ in split.strong]

    if config.variant is AnnotatorVariant.SEMANTIC:
        usable = [p for p in pseudo if p.semantic is not None]
        images = np.stack(strong_imgs + [p.image for p in usable])
        sem = np.stack(
            [scene.semantic for scene, _ in split.strong] + [p.semantic for p in usable]
        )
        weights = np.concatenate(
            [np.ones(len(strong_imgs)), np.full(len(usable), tc.pseudo_weight)]
        )
        net = SemanticNet(config.model, rng)
        opt = SGD(net.params, tc.lr, tc.momentum)
        norm = float(weights.sum())
        n = len(images)

        def epoch() -> float:
            total = 0.0
            for lo, hi in _chunks(n, tc.chunk_size):
                # per-chunk pixel CE scaled by the chunk's weight share
                loss = semantic_loss(net.forward_batch(images[lo:hi]), sem[lo:hi])
                share = float(weights[lo:hi].sum()) / norm
                loss.backward(seed=share)
                total += float(loss.value) * share
            return total

        net_, hist = net, _run_epochs(opt, tc.epochs_segmenter, epoch, "segmenter")
        return net_, hist

    usable = [p for p in pseudo if p.instances]
    images_list = strong_imgs + [p.image for p in usable]
    gts = _gt_lists([lbl for _, lbl in split.strong]) + [
        [(cls, mask.astype(np.float64)) for cls, mask in p.instances] for p in usable
    ]
    weights = np.concatenate([np.ones(len(strong_imgs)), np.full(len(usable), tc.pseudo_weight)])
    if not images_list:
        raise ValueError("segmenter training set is empty")
    images = np.stack(images_list)
    n = len(images)
    norm = float(weights.sum())
    net = RecurrentInstanceNet(config.model, rng)
    opt = SGD(net.params, tc.lr, tc.momentum)

    def epoch() -> float:
        total = 0.0
        for lo, hi in _chunks(n, tc.chunk_size):
            batch = net.decode_batch(images[lo:hi], config.max_steps)
            loss = rsis_loss(
                batch,
                gts[lo:hi],
                lambda_cls=tc.lambda_cls,
                lambda_stop=tc.lambda_stop,
                sample_weights=weights[lo:hi],
                normalizer=norm,
            )
            loss.total.backward()
            total += loss.value
        return total

    return net, _run_epochs(opt, tc.epochs_segmenter, epoch, "segmenter")


# ------------------------------------------------------------------ evaluation


def predictions_for_scene(
    net,
    image: np.ndarray,
    max_steps: int,
    stop_threshold: float,
    confidence_mode: str,
    tokens: list[int] | None = None,
) -> list[InstancePrediction]:
    """Decode one image into scored binary instance predictions."""
    if tokens is not None:
        pred = net.predict(image, tokens)
        keep = range(len(tokens))
        classes = list(tokens)
    else:
        pred = net.predict(image, max_steps)
        keep = range(pred.survivor_count(stop_threshold))
        classes = [int(np.argmax(pred.class_dists[t])) + 1 for t in range(max_steps)]
    out = []
    for t in keep:
        mask = _binarize(pred.masks[t])
        if not mask.any():
            continue
        if confidence_mode == "stop_class":
            conf = float(pred.stop_scores[t] * pred.class_dists[t].max())
        elif confidence_mode == "mask_mean":
            conf = _mask_mean_confidence(pred.masks[t])
        else:
            raise ValueError(f"unknown confidence mode {confidence_mode!r}")
        out.append(InstancePrediction(class_id=classes[t], confidence=conf, mask=mask))
    return out


def evaluate_instance_net(
    net,
    scenes: list[Scene],
    max_steps: int,
    stop_threshold: float,
    confidence_mode: str,
    conditioned: bool = False,
) -> float:
    """AP at 0.5 against scene ground truth; conditioned nets consume the
    true class counts of each evaluation scene."""
    preds, gts = [], []
    for scene in scenes:
        tokens = None
        if conditioned:
            counts: dict[int, int] = {}
            for cls, _ in scene.instances:
                counts[cls] = counts.get(cls, 0) + 1
            tokens = tokens_for_counts(counts)
        preds.append(
            predictions_for_scene(net, scene.image, max_steps, stop_threshold, confidence_mode, tokens)
        )
        gts.append([(cls, mask) for cls, mask in scene.instances])
    return ap50(preds, gts)


def evaluate_semantic_net(net, scenes: list[Scene], num_classes: int) -> float:
    acc = ConfusionAccumulator(num_classes + 1)
    for scene in scenes:
        pred = np.argmax(net.predict(scene.image), axis=-1)
        acc.update(pred, scene.semantic)
    return acc.miou()


def pseudo_label_ap(pseudo: list[PseudoLabeledImage], scenes_by_index: dict[int, Scene]) -> float:
    """AP of pseudo-labels against the weak set's hidden ground truth."""
    preds, gts = [], []
    for p in pseudo:
        preds.append(
            [
                InstancePrediction(class_id=cls, confidence=conf, mask=mask)
                for (cls, mask), conf in zip(p.instances, p.confidences)
            ]
        )
        scene = scenes_by_index[p.scene_index]
        gts.append([(cls, mask) for cls, mask in scene.instances])
    return ap50(preds, gts)


# ------------------------------------------------------------------ experiment


def eval_scenes_for(config: ExperimentConfig) -> list[Scene]:
    return generate_pool(config.data, config.eval_size, start_index=EVAL_INDEX_BASE)


def training_pool_for(config: ExperimentConfig) -> list[Scene]:
    pool_size = config.pool_size or (config.n_strong + config.m_weak)
    if pool_size < config.n_strong + config.m_weak:
        raise ValueError("pool smaller than n_strong + m_weak")
    return generate_pool(config.data, pool_size)


def run_repeat(
    config: ExperimentConfig,
    pool: list[Scene],
    eval_scenes: list[Scene],
    repeat: int,
) -> tuple[RepeatResult, object, object, list[PseudoLabeledImage], DatasetSplit]:
    split = split_dataset(pool, config.allocation, derive_seed(config.split_seed, repeat, "split"))
    f_seed = derive_seed(config.init_seed, repeat, "f")
    g_seed = derive_seed(config.init_seed, repeat, "g")
    f_net, _ = train_annotator(config, split, f_seed)
    pseudo = pseudo_label(
        f_net, weak_items_of(split), config.variant, config.stop_threshold, config.max_steps
    )
    g_net, _ = train_segmenter(config, split, pseudo, g_seed)

    if config.variant is AnnotatorVariant.SEMANTIC:
        f_score = evaluate_semantic_net(f_net, eval_scenes, config.data.num_classes)
        g_score = evaluate_semantic_net(g_net, eval_scenes, config.data.num_classes)
    else:
        f_score = evaluate_instance_net(
            f_net,
            eval_scenes,
            config.max_steps,
            config.stop_threshold,
            confidence_mode="mask_mean" if config.variant is AnnotatorVariant.CONDITIONED else "stop_class",
            conditioned=config.variant is AnnotatorVariant.CONDITIONED,
        )
        g_score = evaluate_instance_net(
            g_net, eval_scenes, config.max_steps, config.stop_threshold, confidence_mode="mask_mean"
        )
    result = RepeatResult(
        repeat=repeat,
        f_score=f_score,
        g_score=g_score,
        n_pseudo_images=sum(1 for p in pseudo if p.instances or p.semantic is not None),
        n_pseudo_instances=sum(len(p.instances) for p in pseudo),
    )
    return result, f_net, g_net, pseudo, split


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    pool = training_pool_for(config)
    eval_scenes = eval_scenes_for(config)
    rows = [run_repeat(config, pool, eval_scenes, r)[0] for r in range(config.repeats)]
    budget = allocation_cost(config.allocation)
    return ExperimentResult(
        config=config,
        repeats=rows,
        budget_seconds=budget,
        budget_days_display=seconds_to_days_display(budget),
        score_name="miou" if config.variant is AnnotatorVariant.SEMANTIC else "ap50",
    )


def results_csv(result: ExperimentResult) -> str:
    """Canonical results table; one row per repeat plus a mean row."""
    cfg = result.config
    score = result.score_name
    header = (
        "config_hash,variant,n_strong,m_weak,weak_kind,repeat_seed,"
        f"budget_seconds,budget_days_display,f_{score},g_{score}\n"
    )
    lines = [header]
    chash = cfg.config_hash()
    for row in result.repeats:
        seed = derive_seed(cfg.split_seed, row.repeat, "split")
        lines.append(
            f"{chash},{cfg.variant.value},{cfg.n_strong},{cfg.m_weak},{cfg.weak_kind.value},"
            f"{seed},{result.budget_seconds!r},{result.budget_days_display},"
            f"{row.f_score!r},{row.g_score!r}\n"
        )
    lines.append(
        f"{chash},{cfg.variant.value},{cfg.n_strong},{cfg.m_weak},{cfg.weak_kind.value},"
        f"mean,{result.budget_seconds!r},{result.budget_days_display},"
        f"{result.mean_f!r},{result.mean_g!r}\n"
    )
    return "".join(lines)
