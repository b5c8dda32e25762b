"""Nested coarse-to-fine token pyramids with optional per-level restoration.

A square feature grid is repeatedly downsampled by non-overlapping 2x2
windows; once the side becomes odd (3 for a 24-token side) a single final
window spanning the whole grid collapses it to one token.  A 24x24 grid
therefore yields token counts [576, 144, 36, 9, 1].

Four downsampling strategies are supported: block average, block max,
sequential (first of each group of window^2 tokens in flattened row-major
order), and spatial (top-left cell of each window).  The pooling chain always
consumes raw levels; when restoration is enabled each level additionally
carries a restored tensor for downstream consumers.  Chained restoration
(pooling the restored output instead) is available behind ``chain_restored``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import (
    DimensionError,
    InvalidConfig,
    ShapeMismatch,
    _blocked,
    _unblocked,
    as_tensor,
    block_avg_pool,
    block_max_pool_with_index,
    upsample_replicate,
)
from .restoration import FmvrActivations, FmvrParams, fmvr_forward, init_fmvr_params

__all__ = [
    "SAMPLING_STRATEGIES",
    "PyramidConfig",
    "PyramidLevel",
    "TokenPyramid",
    "pyramid_sides",
    "level_window",
    "downsample",
    "downsample_adjoint",
    "build_pyramid",
    "flatten_tokens",
    "unflatten_tokens",
]

SAMPLING_STRATEGIES = ("avg_pool", "max_pool", "sequential", "spatial")


def pyramid_sides(base_side: int) -> list[int]:
    """Level sides: halve while even, then collapse any odd side > 1 to 1."""
    if base_side < 1:
        raise InvalidConfig(f"base_side must be >= 1, got {base_side}")
    sides = [base_side]
    side = base_side
    while side > 1:
        side = side // 2 if side % 2 == 0 else 1
        sides.append(side)
    return sides


def level_window(side: int) -> int:
    """Window used to pool *from* a level of the given side (and inside its
    restoration block): 2 for even sides, the full side for odd sides > 1."""
    if side <= 1:
        return 1
    return 2 if side % 2 == 0 else side


@dataclass
class PyramidConfig:
    """Static pyramid settings plus the per-level restoration gains."""

    base_side: int = 24
    channels: int = 16
    sampling: str = "avg_pool"
    fmvr_enabled: bool = True
    chain_restored: bool = False
    residual_skip: bool = False
    fmvr_params: list[FmvrParams] | None = None

    def __post_init__(self):
        if self.base_side < 1:
            raise InvalidConfig(f"base_side must be >= 1, got {self.base_side}")
        if self.channels < 1:
            raise InvalidConfig(f"channels must be >= 1, got {self.channels}")
        if self.sampling not in SAMPLING_STRATEGIES:
            raise InvalidConfig(
                f"sampling must be one of {SAMPLING_STRATEGIES}, got {self.sampling!r}"
            )
        if self.fmvr_enabled and self.fmvr_params is None:
            self.fmvr_params = [
                init_fmvr_params(self.channels, self.residual_skip)
                for _ in self.sides()
            ]
        if self.fmvr_params is not None:
            if len(self.fmvr_params) != len(self.sides()):
                raise InvalidConfig(
                    f"need {len(self.sides())} per-level parameter sets, "
                    f"got {len(self.fmvr_params)}"
                )
            for p in self.fmvr_params:
                if p.channels != self.channels:
                    raise InvalidConfig("per-level gains must match channel count")

    def sides(self) -> list[int]:
        return pyramid_sides(self.base_side)

    def token_counts(self) -> list[int]:
        return [s * s for s in self.sides()]

    def num_levels(self) -> int:
        return len(self.sides())


@dataclass
class PyramidLevel:
    """One pyramid level: raw tokens, restored tokens, and backward caches."""

    token_count: int
    side: int
    raw: np.ndarray
    restored: np.ndarray
    window: int
    acts: FmvrActivations | None = None
    down_index: np.ndarray | None = None  # max-pool argmax used to build raw


@dataclass
class TokenPyramid:
    levels: list[PyramidLevel]

    def token_counts(self) -> list[int]:
        return [lvl.token_count for lvl in self.levels]


def downsample(x, strategy: str, window: int = 2) -> np.ndarray:
    """Reduce both spatial dims by ``window`` using the given strategy."""
    x = as_tensor(x)
    if strategy not in SAMPLING_STRATEGIES:
        raise InvalidConfig(f"unknown sampling strategy {strategy!r}")
    if x.ndim < 2:
        raise DimensionError(f"downsample: need at least 2 axes, got {x.shape}")
    h, w = x.shape[-2], x.shape[-1]
    if window < 1 or h % window or w % window:
        raise DimensionError(
            f"downsample: dims ({h}, {w}) not divisible by window {window}"
        )
    if strategy == "avg_pool":
        return block_avg_pool(x, window)
    if strategy == "max_pool":
        pooled, _ = block_max_pool_with_index(x, window)
        return pooled
    if strategy == "sequential":
        lead = x.shape[:-2]
        flat = x.reshape(*lead, h * w)
        return flat[..., :: window * window].reshape(
            *lead, h // window, w // window
        ).copy()
    # spatial: top-left cell of each window
    return x[..., ::window, ::window].copy()


def downsample_adjoint(
    grad_out,
    strategy: str,
    window: int,
    parent_shape: tuple[int, ...],
    max_index: np.ndarray | None = None,
) -> np.ndarray:
    """Adjoint of :func:`downsample`, mapping child grads to the parent grid."""
    grad_out = as_tensor(grad_out)
    if strategy == "avg_pool":
        return upsample_replicate(grad_out, window) / float(window * window)
    if strategy == "max_pool":
        if max_index is None:
            raise InvalidConfig("max_pool adjoint needs the forward argmax index")
        blocked_shape = grad_out.shape + (window * window,)
        buf = np.zeros(blocked_shape)
        np.put_along_axis(buf, max_index[..., None], grad_out[..., None], axis=-1)
        return _unblocked(buf, window)
    grad_parent = np.zeros(parent_shape)
    if strategy == "sequential":
        lead = parent_shape[:-2]
        h, w = parent_shape[-2], parent_shape[-1]
        flat = grad_parent.reshape(*lead, h * w)
        flat[..., :: window * window] = grad_out.reshape(*lead, -1)
        return flat.reshape(parent_shape)
    if strategy == "spatial":
        grad_parent[..., ::window, ::window] = grad_out
        return grad_parent
    raise InvalidConfig(f"unknown sampling strategy {strategy!r}")


def build_pyramid(features, cfg: PyramidConfig) -> TokenPyramid:
    """Construct every level from a (C, S, S) or (B, C, S, S) feature grid."""
    features = as_tensor(features)
    if features.ndim not in (3, 4):
        raise DimensionError(
            f"expected (C, S, S) or (B, C, S, S) features, got shape {features.shape}"
        )
    h, w = features.shape[-2], features.shape[-1]
    if h != w:
        raise DimensionError(f"features must be square, got ({h}, {w})")
    if h != cfg.base_side:
        raise DimensionError(f"side {h} does not match configured {cfg.base_side}")
    if features.shape[-3] != cfg.channels:
        raise ShapeMismatch(
            f"{features.shape[-3]} channels do not match configured {cfg.channels}"
        )

    levels: list[PyramidLevel] = []
    raw = features
    for i, side in enumerate(cfg.sides()):
        down_index = None
        if i > 0:
            parent = levels[-1]
            source = parent.restored if cfg.chain_restored else parent.raw
            if cfg.sampling == "max_pool":
                raw, down_index = block_max_pool_with_index(source, parent.window)
            else:
                raw = downsample(source, cfg.sampling, parent.window)
        window = level_window(side)
        if cfg.fmvr_enabled:
            restored, acts = fmvr_forward(raw, cfg.fmvr_params[i], window)
        else:
            restored, acts = raw, None
        levels.append(
            PyramidLevel(side * side, side, raw, restored, window, acts, down_index)
        )
    return TokenPyramid(levels)


def flatten_tokens(level) -> np.ndarray:
    """Row-major token sequence: (C, H, W) -> (H*W, C), batched likewise."""
    level = as_tensor(level)
    if level.ndim == 3:
        c, h, w = level.shape
        return np.ascontiguousarray(level.reshape(c, h * w).T)
    if level.ndim == 4:
        b, c, h, w = level.shape
        return np.ascontiguousarray(np.moveaxis(level.reshape(b, c, h * w), 1, 2))
    raise DimensionError(f"expected 3-D or 4-D level, got shape {level.shape}")


def unflatten_tokens(tokens, side: int) -> np.ndarray:
    """Inverse of :func:`flatten_tokens` for square levels."""
    tokens = as_tensor(tokens)
    if tokens.ndim == 2:
        m, c = tokens.shape
        if m != side * side:
            raise DimensionError(f"{m} tokens do not fill a {side}x{side} grid")
        return np.ascontiguousarray(tokens.T.reshape(c, side, side))
    if tokens.ndim == 3:
        b, m, c = tokens.shape
        if m != side * side:
            raise DimensionError(f"{m} tokens do not fill a {side}x{side} grid")
        return np.ascontiguousarray(
            np.moveaxis(tokens, 1, 2).reshape(b, c, side, side)
        )
    raise DimensionError(f"expected 2-D or 3-D token sequence, got {tokens.shape}")
