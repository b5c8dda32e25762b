"""Analytic FLOPs model for decoder prefill as a function of visual tokens.

The decoder cost for a prefill of T = visual + text tokens counts the QKVO
projections (8*T*d^2), the attention score and value matmuls (4*T^2*d), a
three-matrix gated FFN (6*T*d*ffn), and the LM head (2*T*d*vocab), per
layer where applicable.  Defaults describe a 7B-class decoder (32 layers,
d=4096, ffn=11008, vocab=32000).

The text-token count is not observable from the reference table alone, so it
is calibrated by an integer least-squares fit of the formula against the
published (tokens, TB) pairs in ``PREFILL_CALIBRATION_TB``; the fitted value
ships as the default.  Vision-encoder and projection costs happen before
token reduction, so they are configuration constants, independent of the
retained token count.

Restoration cost counts multiply-add operations of the per-level forward
passes.  Both pooling stages produce full-size replicated grids, so each of
the H*W output cells costs k^2 adds plus one multiply; on top of that each
cell pays two residual subtractions, two gain multiplies, two attention
multiplies, and three sums.  Unit-sized levels pass through for free.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .matryoshka import level_window, pyramid_sides
from .tensor_core import InvalidConfig

__all__ = [
    "PREFILL_CALIBRATION_TB",
    "DEFAULT_TEXT_TOKENS",
    "CostModelConfig",
    "CostReport",
    "llm_prefill_flops",
    "fmvr_flop_count",
    "fmvr_flops",
    "calibrate_text_tokens",
    "report",
    "format_report_table",
]

# Reference prefill measurements (TB) for the 7B stack the defaults model,
# by retained visual-token count.  Used only to calibrate text_tokens and to
# sanity-check the formula.
PREFILL_CALIBRATION_TB = {576: 8.0, 144: 2.2, 36: 0.9, 9: 0.5, 1: 0.4}

# Result of calibrate_text_tokens() with the default architecture; pinned so
# configs are reproducible without re-running the fit.
DEFAULT_TEXT_TOKENS = 25

TERA = 1.0e12


@dataclass(frozen=True)
class CostModelConfig:
    """Architecture constants feeding the prefill cost model."""

    num_layers: int = 32
    hidden_dim: int = 4096
    ffn_dim: int = 11008
    vocab_size: int = 32000
    text_tokens: int = DEFAULT_TEXT_TOKENS
    vision_encoder_tb: float = 0.349
    projection_tb: float = 0.024
    fmvr_channels: int = 1024
    fmvr_base_side: int = 24

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "ffn_dim", "vocab_size"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be positive")
        if self.text_tokens < 0:
            raise InvalidConfig("text_tokens must be non-negative")
        if self.vision_encoder_tb < 0 or self.projection_tb < 0:
            raise InvalidConfig("component costs must be non-negative")
        if self.fmvr_channels < 1 or self.fmvr_base_side < 1:
            raise InvalidConfig("restoration geometry must be positive")


def llm_prefill_flops(cfg: CostModelConfig, visual_tokens: int) -> float:
    """Decoder prefill cost in TB for the given visual-token count."""
    if visual_tokens < 0:
        raise InvalidConfig(f"visual_tokens must be >= 0, got {visual_tokens}")
    t = visual_tokens + cfg.text_tokens
    d = cfg.hidden_dim
    per_layer = 8 * t * d * d + 4 * t * t * d + 6 * t * d * cfg.ffn_dim
    total = cfg.num_layers * per_layer + 2 * t * d * cfg.vocab_size
    return total / TERA


def fmvr_flop_count(channels: int, base_side: int) -> int:
    """Exact operation count of one full per-level restoration pass.

    Per level of side s >= 2 with window k: each of the s*s cells pays
    2*(k^2 + 1) pooling ops (both routes, replicated output) plus 9
    elementwise ops (2 subtractions, 2 gain multiplies, 2 attention
    multiplies, 3 sums).  Unit levels are identity.
    """
    if channels < 1 or base_side < 1:
        raise InvalidConfig("channels and base_side must be positive")
    total = 0
    for side in pyramid_sides(base_side):
        if side < 2:
            continue
        k = level_window(side)
        total += channels * side * side * (2 * (k * k + 1) + 9)
    return total


def fmvr_flops(cfg: CostModelConfig) -> float:
    """Restoration cost in TB for the configured feature geometry."""
    return fmvr_flop_count(cfg.fmvr_channels, cfg.fmvr_base_side) / TERA


def calibrate_text_tokens(
    cfg: CostModelConfig | None = None,
    targets: dict[int, float] = PREFILL_CALIBRATION_TB,
    bounds: tuple[int, int] = (1, 128),
) -> tuple[int, dict[int, float]]:
    """Integer least-squares fit of the text-token count.

    Minimizes the sum of squared TB residuals of :func:`llm_prefill_flops`
    against ``targets`` over text_tokens in ``bounds``.  Returns the best
    count and its per-token-count residuals (model minus target).
    """
    if cfg is None:
        cfg = CostModelConfig()
    lo, hi = bounds
    if not 0 <= lo <= hi:
        raise InvalidConfig(f"bad bounds {bounds}")
    best_n, best_ssq = lo, np.inf
    for n in range(lo, hi + 1):
        candidate = replace(cfg, text_tokens=n)
        ssq = sum(
            (llm_prefill_flops(candidate, m) - tb) ** 2 for m, tb in targets.items()
        )
        if ssq < best_ssq:
            best_n, best_ssq = n, ssq
    fitted = replace(cfg, text_tokens=best_n)
    residuals = {
        m: llm_prefill_flops(fitted, m) - tb for m, tb in sorted(targets.items())
    }
    return best_n, residuals


@dataclass(frozen=True)
class CostReport:
    """Per-component prefill cost for one visual-token count, in TB."""

    visual_tokens: int
    vision_encoder_tb: float
    projection_tb: float
    fmvr_tb: float
    llm_tb: float
    total_tb: float
    speedup_vs_reference: float

    def as_dict(self) -> dict:
        return {
            "visual_tokens": self.visual_tokens,
            "vision_encoder_tb": self.vision_encoder_tb,
            "projection_tb": self.projection_tb,
            "fmvr_tb": self.fmvr_tb,
            "llm_tb": self.llm_tb,
            "total_tb": self.total_tb,
            "speedup_vs_reference": self.speedup_vs_reference,
        }


def report(
    cfg: CostModelConfig,
    token_counts: list[int],
    reference_tokens: int | None = None,
) -> list[CostReport]:
    """Component breakdown per token count, with decoder speedups.

    Speedups are decoder-only ratios against ``reference_tokens`` (the
    largest requested count by default); encoder, projection, and
    restoration costs do not depend on the retained token count.
    """
    if not token_counts:
        raise InvalidConfig("need at least one token count")
    if reference_tokens is None:
        reference_tokens = max(token_counts)
    reference_llm = llm_prefill_flops(cfg, reference_tokens)
    restoration = fmvr_flops(cfg)
    out = []
    for m in token_counts:
        llm = llm_prefill_flops(cfg, m)
        total = cfg.vision_encoder_tb + cfg.projection_tb + restoration + llm
        out.append(
            CostReport(
                visual_tokens=m,
                vision_encoder_tb=cfg.vision_encoder_tb,
                projection_tb=cfg.projection_tb,
                fmvr_tb=restoration,
                llm_tb=llm,
                total_tb=total,
                speedup_vs_reference=reference_llm / llm if llm > 0 else float("inf"),
            )
        )
    return out


def format_report_table(reports: list[CostReport]) -> str:
    """Aligned human-readable table of component costs."""
    header = (
        f"{'tokens':>7} {'vision':>8} {'proj':>7} {'fmvr':>10} "
        f"{'llm':>9} {'total':>9} {'speedup':>8}"
    )
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(
            f"{r.visual_tokens:>7d} {r.vision_encoder_tb:>8.3f} "
            f"{r.projection_tb:>7.3f} {r.fmvr_tb:>10.3e} "
            f"{r.llm_tb:>9.3f} {r.total_tb:>9.3f} {r.speedup_vs_reference:>7.2f}x"
        )
    return "\n".join(lines)
