"""Tiny stand-in networks: semantic segmenter and sequential instance decoders.

All three share a small convolutional encoder over RGB plus two coordinate
channels.  The sequential decoders unroll a single GRU-style gated cell on
the pooled scene embedding; each step produces a soft mask through a
broadcast-and-convolve head, and (for the unconditioned variant) a class
distribution and a stop score.  The conditioned variant instead consumes
one class token per expected instance and has no class or stop head.

Forward passes are pure functions of (parameters, input); training and
inference share the same code paths, inference running under ``no_grad``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 4
    encoder_channels: int = 8
    mask_channels: int = 8
    hidden_size: int = 16
    token_dim: int = 8


@dataclass
class SequencePrediction:
    """Per-image decoder output; one entry per emitted step.

    masks are soft values in [0, 1]; class_dists rows sum to 1.  The stop
    and class fields are None for the conditioned variant, the token field
    None for the unconditioned one.
    """

    masks: np.ndarray                      # (T, H, W)
    class_dists: np.ndarray | None = None  # (T, C)
    stop_scores: np.ndarray | None = None  # (T,)
    token_classes: tuple[int, ...] | None = None

    def survivor_count(self, threshold: float) -> int:
        """Steps kept by stop-truncation: everything before the first
        stop score below the threshold."""
        if self.stop_scores is None:
            return len(self.masks)
        below = np.nonzero(self.stop_scores < threshold)[0]
        return int(below[0]) if below.size else len(self.masks)


@dataclass
class DecodeBatch:
    """Batched decoder graph output used by the training losses."""

    mask_logits: list[Tensor]          # T tensors of shape (B, H*W)
    class_logits: list[Tensor] | None  # T tensors of shape (B, C)
    stop_logits: list[Tensor] | None   # T tensors of shape (B,)
    token_classes: np.ndarray | None   # (B, T) int, 0 where padded
    step_mask: np.ndarray              # (B, T) float, 1 for real steps
    height: int
    width: int

    def masks(self) -> list[Tensor]:
        return [ad.sigmoid(m) for m in self.mask_logits]


def with_coords(images: np.ndarray) -> np.ndarray:
    """Append normalized row/col coordinate channels: (B,H,W,3) -> (B,H,W,5)."""
    b, h, w, _ = images.shape
    ys = np.linspace(-1.0, 1.0, h)[None, :, None, None]
    xs = np.linspace(-1.0, 1.0, w)[None, None, :, None]
    coord_y = np.broadcast_to(ys, (b, h, w, 1))
    coord_x = np.broadcast_to(xs, (b, h, w, 1))
    return np.concatenate([images, coord_y, coord_x], axis=3)


def _linear_params(rng, name: str, n_in: int, n_out: int, params: dict) -> None:
    params[f"{name}/w"] = ad.glorot_uniform((n_in, n_out), rng, n_in, n_out)
    params[f"{name}/b"] = Tensor(np.zeros(n_out), requires_grad=True)


def _conv_params(rng, name: str, k: int, c_in: int, c_out: int, params: dict) -> None:
    fan_in, fan_out = k * k * c_in, k * k * c_out
    params[f"{name}/w"] = ad.glorot_uniform((k, k, c_in, c_out), rng, fan_in, fan_out)
    params[f"{name}/b"] = Tensor(np.zeros(c_out), requires_grad=True)


def _linear(params: dict, name: str, x: Tensor) -> Tensor:
    return ad.matmul(x, params[f"{name}/w"]) + params[f"{name}/b"]


def _conv(params: dict, name: str, x: Tensor) -> Tensor:
    return ad.conv2d(x, params[f"{name}/w"]) + params[f"{name}/b"]


class _GruCell:
    """Gated update h' = (1-z)*n + z*h over a fixed-size input."""

    def __init__(self, rng, prefix: str, n_in: int, hidden: int, params: dict):
        self.prefix = prefix
        self.hidden = hidden
        for gate in ("z", "r", "n"):
            _linear_params(rng, f"{prefix}/w{gate}", n_in, hidden, params)
            params[f"{prefix}/u{gate}/w"] = ad.glorot_uniform(
                (hidden, hidden), rng, hidden, hidden
            )

    def __call__(self, params: dict, x: Tensor, h: Tensor) -> Tensor:
        p = self.prefix
        z = ad.sigmoid(_linear(params, f"{p}/wz", x) + ad.matmul(h, params[f"{p}/uz/w"]))
        r = ad.sigmoid(_linear(params, f"{p}/wr", x) + ad.matmul(h, params[f"{p}/ur/w"]))
        n = ad.tanh(_linear(params, f"{p}/wn", x) + r * ad.matmul(h, params[f"{p}/un/w"]))
        one = Tensor(np.ones_like(z.value))
        return (one - z) * n + z * h


def _linear_1x1(params: dict, name: str, x: Tensor) -> Tensor:
    """1x1 convolution via matmul on flattened pixels: (..., Cin) -> (..., Cout)."""
    shape = x.value.shape
    c_in = shape[-1]
    c_out = params[f"{name}/w"].value.shape[1]
    flat = ad.reshape(x, (-1, c_in))
    return ad.reshape(_linear(params, name, flat), shape[:-1] + (c_out,))


class _EncoderMixin:
    """A full-resolution convolution, a strided-slice downsample, and a
    half-resolution convolution; shared by every net.  Inputs are RGB plus
    two coordinate channels."""

    def _init_encoder(self, rng, params: dict, channels: int) -> None:
        _conv_params(rng, "enc1", 3, 5, channels, params)
        _conv_params(rng, "enc2", 3, channels, channels, params)

    def _encode_full(self, images: np.ndarray) -> Tensor:
        x = Tensor(with_coords(np.asarray(images, dtype=np.float64)))
        return ad.relu(_conv(self.params, "enc1", x))

    def _encode_half(self, full: Tensor) -> Tensor:
        return ad.relu(_conv(self.params, "enc2", full[:, ::2, ::2, :]))


class SemanticNet(_EncoderMixin):
    """Encoder-decoder producing per-pixel logits over C+1 classes."""

    arch = "semantic"

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.params: dict[str, Tensor] = {}
        c = config.encoder_channels
        self._init_encoder(rng, self.params, c)
        _conv_params(rng, "mid", 3, c, c, self.params)
        _linear_params(rng, "out", 2 * c, config.num_classes + 1, self.params)

    def forward_batch(self, images: np.ndarray) -> Tensor:
        full = self._encode_full(images)
        half = self._encode_half(full)
        mid = ad.relu(_conv(self.params, "mid", half))
        up = ad.upsample2x(mid)
        return _linear_1x1(self.params, "out", ad.concat([full, up], axis=3))

    def predict(self, image: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.forward_batch(image[None]).value[0]


class _SequentialDecoder(_EncoderMixin):
    """Mask head runs on the half-resolution grid; per-step logits are
    upsampled back to full resolution (nearest), trading boundary detail
    for a 4x smaller per-step footprint."""

    def _init_decoder(self, rng, gru_input: int) -> None:
        cfg = self.config
        c, k, d = cfg.encoder_channels, cfg.mask_channels, cfg.hidden_size
        _linear_params(rng, "maskg", c, k, self.params)   # 1x1 conv on features
        _linear_params(rng, "maskh", d, k, self.params)   # hidden-state broadcast
        _linear_params(rng, "masko", k, 1, self.params)   # per-pixel output
        self.gru = _GruCell(rng, "gru", gru_input, d, self.params)

    def _feature_grid(self, images: np.ndarray):
        full = self._encode_full(images)
        half = self._encode_half(full)
        b, hh, hw_, c = half.value.shape
        grid = ad.reshape(
            _linear_1x1(self.params, "maskg", half), (b, hh * hw_, self.config.mask_channels)
        )
        pooled = ad.mean(half, axis=(1, 2))
        return grid, pooled, (b, 2 * hh, 2 * hw_)

    def _step_mask_logits(self, grid: Tensor, h_state: Tensor, dims) -> Tensor:
        b, h, w = dims
        k = self.config.mask_channels
        proj = ad.reshape(_linear(self.params, "maskh", h_state), (b, 1, k))
        u = ad.relu(grid + proj)
        flat = ad.reshape(u, (-1, k))
        half_logits = ad.reshape(_linear(self.params, "masko", flat), (b, h // 2, w // 2, 1))
        return ad.reshape(ad.upsample2x(half_logits), (b, h * w))


class RecurrentInstanceNet(_SequentialDecoder):
    """Sequential decoder with mask, class, and stop heads."""

    arch = "plain"

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._init_encoder(rng, self.params, config.encoder_channels)
        self._init_decoder(rng, gru_input=config.encoder_channels)
        _linear_params(rng, "cls", config.hidden_size, config.num_classes, self.params)
        _linear_params(rng, "stop", config.hidden_size, 1, self.params)

    def decode_batch(self, images: np.ndarray, max_steps: int) -> DecodeBatch:
        if max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        grid, pooled, (b, h, w) = self._feature_grid(images)
        h_state = Tensor(np.zeros((b, self.config.hidden_size)))
        mask_logits, class_logits, stop_logits = [], [], []
        for _ in range(max_steps):
            h_state = self.gru(self.params, pooled, h_state)
            mask_logits.append(self._step_mask_logits(grid, h_state, (b, h, w)))
            class_logits.append(_linear(self.params, "cls", h_state))
            stop_logits.append(ad.reshape(_linear(self.params, "stop", h_state), (b,)))
        return DecodeBatch(
            mask_logits=mask_logits,
            class_logits=class_logits,
            stop_logits=stop_logits,
            token_classes=None,
            step_mask=np.ones((b, max_steps)),
            height=h,
            width=w,
        )

    def predict(self, image: np.ndarray, max_steps: int) -> SequencePrediction:
        with ad.no_grad():
            batch = self.decode_batch(image[None], max_steps)
            masks = np.stack([ad.sigmoid(m).value[0].reshape(batch.height, batch.width) for m in batch.mask_logits])
            dists = np.stack([ad.softmax(c).value[0] for c in batch.class_logits])
            stops = np.array([ad.sigmoid(s).value[0] for s in batch.stop_logits])
        return SequencePrediction(masks=masks, class_dists=dists, stop_scores=stops)


class ConditionedInstanceNet(_SequentialDecoder):
    """Sequential decoder driven by one class token per instance."""

    arch = "conditioned"

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._init_encoder(rng, self.params, config.encoder_channels)
        self.params["emb/table"] = ad.glorot_uniform(
            (config.num_classes, config.token_dim), rng, config.num_classes, config.token_dim
        )
        self._init_decoder(rng, gru_input=config.encoder_channels + config.token_dim)

    def decode_batch(self, images: np.ndarray, token_classes: np.ndarray, step_mask: np.ndarray) -> DecodeBatch:
        """token_classes: (B, T) class ids in [1, C], 0 where padded."""
        token_classes = np.asarray(token_classes)
        b, t = token_classes.shape
        if t < 1:
            raise ValueError("token list must be non-empty")
        if token_classes[step_mask > 0].min(initial=1) < 1 or token_classes.max(initial=0) > self.config.num_classes:
            raise ValueError("token classes must lie in [1, num_classes]")
        grid, pooled, (bb, h, w) = self._feature_grid(images)
        h_state = Tensor(np.zeros((b, self.config.hidden_size)))
        mask_logits = []
        eye = np.eye(self.config.num_classes)
        for step in range(t):
            onehot = np.zeros((b, self.config.num_classes))
            real = token_classes[:, step] > 0
            onehot[real] = eye[token_classes[real, step] - 1]
            emb = ad.embedding_lookup(onehot, self.params["emb/table"])
            h_state = self.gru(self.params, ad.concat([pooled, emb], axis=1), h_state)
            mask_logits.append(self._step_mask_logits(grid, h_state, (b, h, w)))
        return DecodeBatch(
            mask_logits=mask_logits,
            class_logits=None,
            stop_logits=None,
            token_classes=token_classes,
            step_mask=step_mask,
            height=h,
            width=w,
        )

    def predict(self, image: np.ndarray, token_classes: list[int]) -> SequencePrediction:
        if not token_classes:
            raise ValueError("token list must be non-empty")
        tokens = np.asarray(token_classes)[None, :]
        with ad.no_grad():
            batch = self.decode_batch(image[None], tokens, np.ones_like(tokens, dtype=float))
            masks = np.stack([ad.sigmoid(m).value[0].reshape(batch.height, batch.width) for m in batch.mask_logits])
        return SequencePrediction(masks=masks, token_classes=tuple(token_classes))


def tokens_for_counts(counts: dict[int, int]) -> list[int]:
    """Canonical token order: class ids ascending, repeated per count."""
    out: list[int] = []
    for cls in sorted(counts):
        out.extend([cls] * counts[cls])
    return out


# spec-level convenience wrappers ------------------------------------------


def semantic_forward(net: SemanticNet, image: np.ndarray) -> np.ndarray:
    """Per-pixel logits (H, W, C+1) for one image."""
    return net.predict(image)


def instance_forward(net: RecurrentInstanceNet, image: np.ndarray, max_steps: int) -> SequencePrediction:
    return net.predict(image, max_steps)


def conditioned_forward(net: ConditionedInstanceNet, image: np.ndarray, token_classes: list[int]) -> SequencePrediction:
    return net.predict(image, token_classes)


# ------------------------------------------------------------- persistence

_ARCHES = {"semantic": SemanticNet, "plain": RecurrentInstanceNet, "conditioned": ConditionedInstanceNet}


def save_model(path_base: str, net) -> None:
    ad.save_checkpoint(path_base, net.params)
    with open(path_base + ".config.jsonl", "w") as fh:
        fh.write(json.dumps({"arch": net.arch, **asdict(net.config)}, sort_keys=True) + "\n")


def load_model(path_base: str):
    with open(path_base + ".config.jsonl") as fh:
        meta = json.loads(fh.readline())
    arch = meta.pop("arch")
    if arch not in _ARCHES:
        raise ValueError(f"unknown architecture {arch!r}")
    net = _ARCHES[arch](ModelConfig(**meta), np.random.default_rng(0))
    ad.load_params_into(path_base, net.params)
    return net
