"""Frequency-modulated restoration of pooled feature maps.

A feature map ``x`` is split two ways over non-overlapping ``k x k`` blocks:

* average route: ``x_l_a`` is the block mean replicated back to full size
  (the blockwise DC part) and ``x_h_a = x - x_l_a`` is the detail residual,
  which acts as a saliency filter;
* max route: ``x_h_m`` is the replicated block maximum and
  ``x_l_m = x - x_h_m <= 0`` is the anti-saliency residual that re-weights
  suppressed content.

Each residual is scaled by a learnable per-channel gain and also used as a
multiplicative attention map over ``x``; the block output is the sum of the
two routes.  Degenerate grids with a unit spatial dimension pass through
unchanged, since the residuals would annihilate the single token.

Backward passes are closed form.  The adjoint of replicate-after-average
spreads each block's gradient uniformly at weight ``1/k^2``; the adjoint of
replicate-after-max routes the block's summed gradient to the cell that won
the forward max (first cell in row-major order on exact ties).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import (
    DimensionError,
    ShapeMismatch,
    _blocked,
    _unblocked,
    as_tensor,
    block_avg_pool,
    block_max_pool_with_index,
    broadcast_mul,
    upsample_replicate,
)

__all__ = [
    "OddDimension",
    "FmvrParams",
    "FmvrActivations",
    "init_fmvr_params",
    "avg_decompose",
    "max_decompose",
    "avg_unit_forward",
    "max_unit_forward",
    "fmvr_forward",
    "fmvr_backward",
]


class OddDimension(DimensionError):
    """Spatial dims are > 1 but not divisible by the pooling window."""


@dataclass(frozen=True)
class FmvrParams:
    """Per-channel gains for one restoration block.

    ``w_a_high`` scales the average route's detail residual, ``w_m_low`` the
    max route's anti-saliency residual.  ``residual_skip`` adds the input
    back onto the output; it is off by default, keeping the property that
    blockwise-constant content annihilates to zero.
    """

    w_a_high: np.ndarray
    w_m_low: np.ndarray
    residual_skip: bool = False

    def __post_init__(self):
        object.__setattr__(self, "w_a_high", as_tensor(self.w_a_high))
        object.__setattr__(self, "w_m_low", as_tensor(self.w_m_low))
        if self.w_a_high.ndim != 1 or self.w_m_low.ndim != 1:
            raise ShapeMismatch("gain vectors must be 1-D")
        if self.w_a_high.shape != self.w_m_low.shape:
            raise ShapeMismatch("gain vectors must have equal length")
        if not (np.all(np.isfinite(self.w_a_high)) and np.all(np.isfinite(self.w_m_low))):
            raise ValueError("gain vectors must be finite")

    @property
    def channels(self) -> int:
        return self.w_a_high.shape[0]


def init_fmvr_params(channels: int, residual_skip: bool = False) -> FmvrParams:
    """Unit gains: the neutral starting point for a multiplicative gate."""
    return FmvrParams(np.ones(channels), np.ones(channels), residual_skip)


@dataclass
class FmvrActivations:
    """Intermediates cached by the forward pass for the backward pass."""

    x: np.ndarray
    x_l_a: np.ndarray | None = None
    x_h_a: np.ndarray | None = None
    x_h_m: np.ndarray | None = None
    x_l_m: np.ndarray | None = None
    max_index: np.ndarray | None = None
    window: int = 2
    passthrough: bool = False

    def __post_init__(self):
        if self.passthrough:
            return
        # Both splits must recompose to x; the additions round at the scale
        # of the split operands, hence the 1-ulp band instead of equality.
        _check_recomposes(self.x_l_a, self.x_h_a, self.x)
        _check_recomposes(self.x_h_m, self.x_l_m, self.x)


def _check_recomposes(part_a, part_b, x):
    recon = part_a + part_b
    scale = np.maximum(np.abs(x), np.abs(part_a))
    if not np.all(np.abs(recon - x) <= np.spacing(scale)):
        raise AssertionError("decomposition does not recompose to the input")


def _channel_count(x: np.ndarray) -> int:
    if x.ndim not in (3, 4):
        raise ShapeMismatch(
            f"expected a (C, H, W) or (B, C, H, W) tensor, got shape {x.shape}"
        )
    return x.shape[-3]


def _check_divisible(x: np.ndarray, window: int) -> None:
    h, w = x.shape[-2], x.shape[-1]
    if h % window or w % window:
        raise OddDimension(
            f"spatial dims ({h}, {w}) are not divisible by window {window}"
        )


def avg_decompose(x, window: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Split into (replicated block mean, detail residual); parts sum to x."""
    x = as_tensor(x)
    x_l_a = upsample_replicate(block_avg_pool(x, window), window)
    return x_l_a, x - x_l_a


def max_decompose(x, window: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Split into (replicated block max, anti-saliency residual <= 0)."""
    x = as_tensor(x)
    pooled, _ = block_max_pool_with_index(x, window)
    x_h_m = upsample_replicate(pooled, window)
    return x_h_m, x - x_h_m


def avg_unit_forward(x, w, window: int = 2) -> np.ndarray:
    """Gained detail residual plus residual-gated input: w*h + h*x."""
    x = as_tensor(x)
    _, x_h_a = avg_decompose(x, window)
    return broadcast_mul(x_h_a, w) + x_h_a * x


def max_unit_forward(x, w, window: int = 2) -> np.ndarray:
    """Gained anti-saliency residual plus residual-gated input: w*l + l*x."""
    x = as_tensor(x)
    _, x_l_m = max_decompose(x, window)
    return broadcast_mul(x_l_m, w) + x_l_m * x


def fmvr_forward(
    x, params: FmvrParams, window: int = 2
) -> tuple[np.ndarray, FmvrActivations]:
    """Apply the restoration block; returns output plus cached activations.

    Grids with H == 1 or W == 1 pass through unchanged.  Other grids must
    tile exactly with ``window x window`` blocks.
    """
    x = as_tensor(x)
    channels = _channel_count(x)
    if params.channels != channels:
        raise ShapeMismatch(
            f"params have {params.channels} channels, tensor has {channels}"
        )
    h, w = x.shape[-2], x.shape[-1]
    if h == 1 or w == 1:
        acts = FmvrActivations(x=x, window=window, passthrough=True)
        return x.copy(), acts
    _check_divisible(x, window)

    x_l_a, x_h_a = avg_decompose(x, window)
    pooled_max, max_index = block_max_pool_with_index(x, window)
    x_h_m = upsample_replicate(pooled_max, window)
    x_l_m = x - x_h_m
    acts = FmvrActivations(x, x_l_a, x_h_a, x_h_m, x_l_m, max_index, window)

    gain_a = params.w_a_high.reshape((-1, 1, 1))
    gain_m = params.w_m_low.reshape((-1, 1, 1))
    y = (gain_a * x_h_a + x_h_a * x) + (gain_m * x_l_m + x_l_m * x)
    if params.residual_skip:
        y = y + x
    return y, acts


def _scatter_to_max(values: np.ndarray, max_index: np.ndarray, window: int) -> np.ndarray:
    """Adjoint of replicate-after-max: block sums land on the argmax cells."""
    blocked = _blocked(values, window)
    sums = blocked.sum(axis=-1)
    out = np.zeros_like(blocked)
    np.put_along_axis(out, max_index[..., None], sums[..., None], axis=-1)
    return _unblocked(out, window)


def fmvr_backward(
    grad_y, acts: FmvrActivations, params: FmvrParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients of the block output w.r.t. input and both gains.

    ``grad_y`` must match the shape of the forward input.  Gain gradients are
    reduced over every axis except channels, so batched activations yield the
    batch-summed gradient.
    """
    grad_y = as_tensor(grad_y)
    if grad_y.shape != acts.x.shape:
        raise ShapeMismatch(
            f"grad shape {grad_y.shape} does not match input shape {acts.x.shape}"
        )
    channels = _channel_count(acts.x)
    if params.channels != channels:
        raise ShapeMismatch(
            f"params have {params.channels} channels, tensor has {channels}"
        )
    if acts.passthrough:
        return grad_y.copy(), np.zeros(channels), np.zeros(channels)

    sum_axes = tuple(i for i in range(grad_y.ndim) if i != grad_y.ndim - 3)
    grad_w_a = np.sum(grad_y * acts.x_h_a, axis=sum_axes)
    grad_w_m = np.sum(grad_y * acts.x_l_m, axis=sum_axes)

    k = acts.window
    gain_a = params.w_a_high.reshape((-1, 1, 1))
    gain_m = params.w_m_low.reshape((-1, 1, 1))

    # d/dx [ (w + x) * ((I - P) x) ] applied to grad g is
    # (I - P^T)((w + x) g) + ((I - P) x) * g for either projection P.
    g_a = (gain_a + acts.x) * grad_y
    grad_avg = g_a - upsample_replicate(block_avg_pool(g_a, k), k) + acts.x_h_a * grad_y
    g_m = (gain_m + acts.x) * grad_y
    grad_max = g_m - _scatter_to_max(g_m, acts.max_index, k) + acts.x_l_m * grad_y

    grad_x = grad_avg + grad_max
    if params.residual_skip:
        grad_x = grad_x + grad_y
    return grad_x, grad_w_a, grad_w_m
