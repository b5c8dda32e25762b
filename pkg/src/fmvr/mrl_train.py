"""Multi-scale classifier training over the token pyramid.

The objective is a weighted sum of per-level softmax cross entropies.  Every
pyramid level owns a linear head over the channel mean of its restored
tokens; gradients flow through all heads and every level's restoration gains
simultaneously, and any single level can be used on its own at inference.

The synthetic task encodes class identity at several spatial frequencies.
Each class is the sum of

* a coarse per-channel offset shared by a class pair (the only part visible
  to a plain token average),
* one checker pattern per even pyramid level, zero inside even columns and
  zero-mean inside every 2x2 block, with class-specific channel amplitudes,
* a zero-mean "spotlight" pattern at the odd level whose top-left cell is
  zero,
* a per-cell zero-mean texture plus white noise.

The checkers and the spotlight are invisible to token averaging and to the
sequential/spatial samplers (their sampled positions are all zeros), so a
model without restoration can at best tell class pairs apart.  The
restoration block's residual terms expose the amplitudes to the linear
heads, which is what the per-level accuracy comparisons measure.  The
texture cancels exactly under block averaging but rides along under cell
selection, making the selection samplers strictly noisier.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .matryoshka import (
    PyramidConfig,
    build_pyramid,
    downsample_adjoint,
    pyramid_sides,
)
from .restoration import FmvrParams, fmvr_backward
from .tensor_core import (
    InvalidConfig,
    ShapeMismatch,
    as_tensor,
    block_avg_pool,
    read_fmt1,
    upsample_replicate,
    write_fmt1,
)

__all__ = [
    "ScaleHead",
    "MrlModel",
    "SyntheticDataset",
    "make_model",
    "generate_dataset",
    "forward_loss",
    "compute_gradients",
    "backward_and_step",
    "train",
    "evaluate",
    "save_model",
    "load_model",
]

# Synthetic-task shape: coarse pair offsets, class amplitude range, per-level
# amplitude falloff, and the cell texture that penalizes cell selection.
# Patterns are RMS-normalized so the falloff alone orders per-level SNR.
_COARSE_SCALE = 0.5
_AMP_RANGE = (0.6, 1.6)
_AMP_BASE = 1.0
_AMP_DECAY = 0.8
_TEXTURE_SCALE = 0.2

_SPLIT_STREAMS = {"train": 1, "eval": 2}


@dataclass
class ScaleHead:
    """Linear classifier for one pyramid level."""

    weight: np.ndarray  # (num_classes, channels)
    bias: np.ndarray  # (num_classes,)


@dataclass
class MrlModel:
    pyramid: PyramidConfig
    heads: list[ScaleHead]
    loss_weights: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.loss_weights = as_tensor(self.loss_weights)
        levels = self.pyramid.num_levels()
        if len(self.heads) != levels or self.loss_weights.shape != (levels,):
            raise InvalidConfig(
                f"need one head and one loss weight per level ({levels})"
            )
        if np.any(self.loss_weights < 0):
            raise InvalidConfig("loss weights must be non-negative")


def make_model(
    cfg: PyramidConfig, num_classes: int, loss_weights=None
) -> MrlModel:
    """Zero-initialized heads (uniform logits) with unit restoration gains."""
    if num_classes < 2:
        raise InvalidConfig(f"num_classes must be >= 2, got {num_classes}")
    levels = cfg.num_levels()
    heads = [
        ScaleHead(np.zeros((num_classes, cfg.channels)), np.zeros(num_classes))
        for _ in range(levels)
    ]
    if loss_weights is None:
        loss_weights = np.ones(levels)
    return MrlModel(cfg, heads, loss_weights, num_classes)


@dataclass
class SyntheticDataset:
    features: np.ndarray  # (N, C, S, S)
    labels: np.ndarray  # (N,)
    prototypes: np.ndarray  # (K, C, S, S), noise-free class means
    num_classes: int
    channels: int
    base_side: int
    seed: int
    split: str
    noise_sigma: float

    def __len__(self) -> int:
        return self.features.shape[0]


def _stripe_cells(cells: np.ndarray, cell: int) -> np.ndarray:
    """Expand a cell grid so each cell's mean is its value but every even
    base column is zero.

    One average pooling collapses the stripes back to the plain cell values,
    so the average-pooling chain carries the full signal; the sequential and
    spatial samplers only ever read even base columns (each selection step
    multiplies flat indices by window^2 or picks index zero), so selection
    chains read exact zeros from these patterns at every level past the
    first.
    """
    base = np.kron(cells, np.ones((cell, cell)))
    stripes = 2.0 * (np.arange(base.shape[1]) % 2)
    return base * stripes[None, :]


def _checker(base_side: int, cell: int) -> np.ndarray:
    """Checker over cells: zero on even cell columns, +/-1 by cell-row parity.

    Zero-mean inside every 2x2 block of cells, so one more pooling after the
    level where cells become single tokens erases it.
    """
    side = base_side // cell
    idx = np.arange(side)
    col_odd = (idx % 2).astype(np.float64)
    row_sign = 1.0 - 2.0 * (idx % 2)
    cells = row_sign[:, None] * col_odd[None, :]
    if cell == 1:
        return cells
    return _stripe_cells(cells, cell)


def _spotlight(base_side: int, odd_side: int) -> np.ndarray:
    """Zero-sum odd-level pattern: one positive center cell, zero top-left."""
    cells = np.full((odd_side, odd_side), -1.0 / (odd_side * odd_side - 2))
    cells[0, 0] = 0.0
    cells[odd_side // 2, odd_side // 2] = 1.0
    return _stripe_cells(cells, base_side // odd_side)


def generate_dataset(
    seed: int,
    n_samples: int,
    num_classes: int = 8,
    channels: int = 16,
    base_side: int = 24,
    noise_sigma: float = 0.1,
    split: str = "train",
) -> SyntheticDataset:
    """Deterministic class-balanced dataset for the multi-frequency task.

    The class prototypes depend only on ``seed``; the per-sample texture and
    noise additionally depend on ``split``, so train and eval splits share
    the same task but draw disjoint perturbations.
    """
    if num_classes < 2:
        raise InvalidConfig(f"num_classes must be >= 2, got {num_classes}")
    if channels < 1:
        raise InvalidConfig(f"channels must be >= 1, got {channels}")
    if n_samples < 1:
        raise InvalidConfig(f"n_samples must be >= 1, got {n_samples}")
    if base_side < 2 or base_side % 2:
        raise InvalidConfig(f"base_side must be even and >= 2, got {base_side}")
    if noise_sigma < 0:
        raise InvalidConfig("noise_sigma must be non-negative")
    if split not in _SPLIT_STREAMS:
        raise InvalidConfig(f"split must be one of {sorted(_SPLIT_STREAMS)}")

    proto_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    sample_rng = np.random.default_rng(
        np.random.SeedSequence([seed, _SPLIT_STREAMS[split]])
    )

    sides = pyramid_sides(base_side)
    odd_side = next((s for s in sides if s > 1 and s % 2 == 1), None)

    patterns: list[tuple[float, np.ndarray]] = []
    for e, side in enumerate(sides):
        if side >= 2 and side % 2 == 0:
            pattern = _checker(base_side, base_side // side)
        elif side > 1:
            pattern = _spotlight(base_side, side)
        else:
            continue
        pattern = pattern / np.sqrt(np.mean(pattern * pattern))
        patterns.append((_AMP_BASE * _AMP_DECAY**e, pattern))

    n_pairs = (num_classes + 1) // 2
    mu = proto_rng.normal(0.0, _COARSE_SCALE, (n_pairs, channels))
    amps = proto_rng.uniform(*_AMP_RANGE, (num_classes, channels))

    prototypes = np.zeros((num_classes, channels, base_side, base_side))
    for k in range(num_classes):
        proto = np.broadcast_to(
            mu[k // 2][:, None, None], (channels, base_side, base_side)
        ).copy()
        for rho, pattern in patterns:
            proto += rho * amps[k][:, None, None] * pattern
        prototypes[k] = proto

    counts = [n_samples // num_classes + (1 if k < n_samples % num_classes else 0)
              for k in range(num_classes)]
    labels = np.concatenate(
        [np.full(c, k, dtype=np.int64) for k, c in enumerate(counts)]
    )
    labels = labels[sample_rng.permutation(n_samples)]

    features = prototypes[labels].copy()
    tex_cell = base_side // sides[-2] if len(sides) >= 2 else 1
    if tex_cell >= 2 and _TEXTURE_SCALE > 0:
        texture = sample_rng.normal(0.0, _TEXTURE_SCALE, features.shape)
        texture -= upsample_replicate(block_avg_pool(texture, tex_cell), tex_cell)
        features += texture
    if noise_sigma > 0:
        features += sample_rng.normal(0.0, noise_sigma, features.shape)

    return SyntheticDataset(
        features,
        labels,
        prototypes,
        num_classes,
        channels,
        base_side,
        seed,
        split,
        noise_sigma,
    )


def _softmax_stats(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross entropy and softmax probabilities, numerically stable."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    n = logits.shape[0]
    loss = float(-log_probs[np.arange(n), labels].mean())
    return loss, np.exp(log_probs)


def _check_batch(model: MrlModel, batch) -> tuple[np.ndarray, np.ndarray]:
    features, labels = batch
    features = as_tensor(features)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim == 3:
        features = features[None]
        labels = labels.reshape(1)
    if features.ndim != 4:
        raise ShapeMismatch(f"expected batched features, got shape {features.shape}")
    if features.shape[0] == 0:
        raise InvalidConfig("batch must be nonempty")
    if labels.shape != (features.shape[0],):
        raise ShapeMismatch(
            f"{labels.shape} labels do not match batch of {features.shape[0]}"
        )
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise InvalidConfig("labels out of range")
    return features, labels


def _forward_levels(model: MrlModel, features: np.ndarray):
    """Pyramid plus per-level channel means and logits."""
    pyramid = build_pyramid(features, model.pyramid)
    means, logits = [], []
    for head, level in zip(model.heads, pyramid.levels):
        mean = level.restored.mean(axis=(-2, -1))
        means.append(mean)
        logits.append(mean @ head.weight.T + head.bias)
    return pyramid, means, logits


def forward_loss(model: MrlModel, batch) -> tuple[float, list[float]]:
    """Total weighted loss and the per-level losses for one batch."""
    features, labels = _check_batch(model, batch)
    _, _, logits = _forward_levels(model, features)
    per_scale = [_softmax_stats(z, labels)[0] for z in logits]
    total = float(np.dot(model.loss_weights, per_scale))
    return total, per_scale


def compute_gradients(model: MrlModel, batch):
    """Loss report plus gradients for every head and restoration gain.

    With ``chain_restored`` enabled, gradients also flow from each level's
    raw tokens back through the downsampling step into the previous level's
    restored output.
    """
    features, labels = _check_batch(model, batch)
    pyramid, means, logits = _forward_levels(model, features)
    batch_size = features.shape[0]
    onehot = np.zeros((batch_size, model.num_classes))
    onehot[np.arange(batch_size), labels] = 1.0

    per_scale = []
    grads: dict[tuple, np.ndarray] = {}
    pending_restored: np.ndarray | None = None

    for e in reversed(range(len(pyramid.levels))):
        level = pyramid.levels[e]
        head = model.heads[e]
        loss_e, probs = _softmax_stats(logits[e], labels)
        per_scale.append(loss_e)

        d_logits = float(model.loss_weights[e]) * (probs - onehot) / batch_size
        grads[("head", e, "weight")] = d_logits.T @ means[e]
        grads[("head", e, "bias")] = d_logits.sum(axis=0)

        d_mean = d_logits @ head.weight
        grad_restored = np.broadcast_to(
            d_mean[:, :, None, None] / float(level.side * level.side),
            level.restored.shape,
        )
        if pending_restored is not None:
            grad_restored = grad_restored + pending_restored
            pending_restored = None

        if model.pyramid.fmvr_enabled:
            grad_raw, grad_w_a, grad_w_m = fmvr_backward(
                grad_restored, level.acts, model.pyramid.fmvr_params[e]
            )
            grads[("fmvr", e, "w_a")] = grad_w_a
            grads[("fmvr", e, "w_m")] = grad_w_m
        else:
            grad_raw = np.asarray(grad_restored)

        if model.pyramid.chain_restored and e > 0:
            parent = pyramid.levels[e - 1]
            pending_restored = downsample_adjoint(
                grad_raw,
                model.pyramid.sampling,
                parent.window,
                parent.restored.shape,
                level.down_index,
            )

    per_scale.reverse()
    total = float(np.dot(model.loss_weights, per_scale))
    return total, per_scale, grads


def backward_and_step(
    model: MrlModel,
    batch,
    lr: float,
    momentum: float = 0.9,
    velocity: dict | None = None,
) -> tuple[float, list[float]]:
    """One descent step; returns the pre-update loss report.

    ``velocity`` carries momentum state across calls (mutated in place);
    omit it for a plain gradient step.
    """
    if lr < 0:
        raise InvalidConfig(f"learning rate must be >= 0, got {lr}")
    total, per_scale, grads = compute_gradients(model, batch)

    def step_value(key):
        g = grads[key]
        if velocity is None:
            return g
        v = momentum * velocity.get(key, 0.0) + g
        velocity[key] = v
        return v

    for e in range(model.pyramid.num_levels()):
        head = model.heads[e]
        head.weight -= lr * step_value(("head", e, "weight"))
        head.bias -= lr * step_value(("head", e, "bias"))
        if model.pyramid.fmvr_enabled:
            params = model.pyramid.fmvr_params[e]
            model.pyramid.fmvr_params[e] = FmvrParams(
                params.w_a_high - lr * step_value(("fmvr", e, "w_a")),
                params.w_m_low - lr * step_value(("fmvr", e, "w_m")),
                params.residual_skip,
            )
    return total, per_scale


class _BalancedBatches:
    """Class-balanced batch indices from independently shuffled class pools.

    Balancing removes the class-composition component of the batch loss
    noise, which keeps the smoothed training loss cleanly monotone.
    """

    def __init__(self, labels: np.ndarray, num_classes: int, batch_size: int, rng):
        self.rng = rng
        self.pools = [np.flatnonzero(labels == k) for k in range(num_classes)]
        if any(len(p) == 0 for p in self.pools):
            raise InvalidConfig("every class needs at least one sample to train")
        per = batch_size // num_classes
        rem = batch_size - per * num_classes
        self.take = [per + (1 if k < rem else 0) for k in range(num_classes)]
        self.orders = [p.copy() for p in self.pools]
        self.cursors = [len(p) for p in self.pools]  # reshuffle on first use

    def next(self) -> np.ndarray:
        idx: list[int] = []
        for k, need in enumerate(self.take):
            while need > 0:
                if self.cursors[k] >= len(self.orders[k]):
                    self.orders[k] = self.rng.permutation(self.pools[k])
                    self.cursors[k] = 0
                grab = min(need, len(self.orders[k]) - self.cursors[k])
                idx.extend(self.orders[k][self.cursors[k] : self.cursors[k] + grab])
                self.cursors[k] += grab
                need -= grab
        return np.asarray(idx, dtype=np.int64)


def train(
    model: MrlModel,
    dataset: SyntheticDataset,
    steps: int,
    lr: float = 1e-2,
    momentum: float = 0.9,
    batch_size: int = 32,
    seed: int = 0,
) -> list[dict]:
    """Momentum-SGD over class-balanced batches; returns the loss history."""
    if steps < 0:
        raise InvalidConfig("steps must be >= 0")
    batch_size = min(batch_size, len(dataset))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    batches = _BalancedBatches(dataset.labels, dataset.num_classes, batch_size, rng)
    velocity: dict = {}
    history = []
    for step in range(steps):
        idx = batches.next()
        batch = (dataset.features[idx], dataset.labels[idx])
        total, per_scale = backward_and_step(model, batch, lr, momentum, velocity)
        history.append({"step": step, "total_loss": total, "per_scale": per_scale})
    return history


def evaluate(
    model: MrlModel, dataset: SyntheticDataset, batch_size: int = 256
) -> np.ndarray:
    """Argmax-logit accuracy per pyramid level."""
    n = len(dataset)
    hits = np.zeros(model.pyramid.num_levels())
    for start in range(0, n, batch_size):
        feats = dataset.features[start : start + batch_size]
        labels = dataset.labels[start : start + batch_size]
        _, _, logits = _forward_levels(model, as_tensor(feats))
        for e, z in enumerate(logits):
            hits[e] += np.count_nonzero(np.argmax(z, axis=1) == labels)
    return hits / n


# --- model persistence -------------------------------------------------------

_MODEL_FORMAT = "fmvr-model/1"


def save_model(model: MrlModel, out_dir, extra: dict | None = None) -> None:
    """Write one FMT1 file per parameter plus a JSON manifest."""
    os.makedirs(out_dir, exist_ok=True)
    tensors = []

    def put(name, role, level, array):
        write_fmt1(array, os.path.join(out_dir, name))
        tensors.append(
            {"file": name, "role": role, "level": level, "shape": list(array.shape)}
        )

    for e, head in enumerate(model.heads):
        put(f"head_{e}_weight.fmt1", "head_weight", e, head.weight)
        put(f"head_{e}_bias.fmt1", "head_bias", e, head.bias)
    if model.pyramid.fmvr_enabled:
        for e, params in enumerate(model.pyramid.fmvr_params):
            put(f"fmvr_{e}_avg_gain.fmt1", "fmvr_avg_gain", e, params.w_a_high)
            put(f"fmvr_{e}_max_gain.fmt1", "fmvr_max_gain", e, params.w_m_low)

    manifest = {
        "format": _MODEL_FORMAT,
        "num_classes": model.num_classes,
        "loss_weights": model.loss_weights.tolist(),
        "pyramid": {
            "base_side": model.pyramid.base_side,
            "channels": model.pyramid.channels,
            "sampling": model.pyramid.sampling,
            "fmvr_enabled": model.pyramid.fmvr_enabled,
            "chain_restored": model.pyramid.chain_restored,
            "residual_skip": model.pyramid.residual_skip,
        },
        "tensors": tensors,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(model_dir) -> tuple[MrlModel, dict]:
    """Rebuild a model from :func:`save_model` output; returns the manifest too."""
    with open(os.path.join(model_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != _MODEL_FORMAT:
        raise InvalidConfig(f"unrecognized model format {manifest.get('format')!r}")
    p = manifest["pyramid"]
    cfg = PyramidConfig(
        base_side=p["base_side"],
        channels=p["channels"],
        sampling=p["sampling"],
        fmvr_enabled=p["fmvr_enabled"],
        chain_restored=p["chain_restored"],
        residual_skip=p["residual_skip"],
    )
    model = make_model(cfg, manifest["num_classes"], manifest["loss_weights"])
    for entry in manifest["tensors"]:
        array = read_fmt1(os.path.join(model_dir, entry["file"]))
        e = entry["level"]
        if entry["role"] == "head_weight":
            model.heads[e].weight = array
        elif entry["role"] == "head_bias":
            model.heads[e].bias = array
        elif entry["role"] == "fmvr_avg_gain":
            params = cfg.fmvr_params[e]
            cfg.fmvr_params[e] = FmvrParams(
                array, params.w_m_low, params.residual_skip
            )
        elif entry["role"] == "fmvr_max_gain":
            params = cfg.fmvr_params[e]
            cfg.fmvr_params[e] = FmvrParams(
                params.w_a_high, array, params.residual_skip
            )
        else:
            raise InvalidConfig(f"unknown tensor role {entry['role']!r}")
    return model, manifest
