"""Finite-difference validation of the analytic backward passes.

Used by the command-line ``gradcheck`` subcommand.  Each check builds a
random scalar objective, computes its analytic gradient, re-derives the
gradient by central differences, and reports the worst relative error per
parameter group.
"""

from __future__ import annotations

import numpy as np

from .matryoshka import PyramidConfig
from .mrl_train import compute_gradients, generate_dataset, make_model
from .restoration import FmvrParams, fmvr_backward, fmvr_forward

__all__ = ["relative_error", "fmvr_gradient_check", "mrl_gradient_check"]


def relative_error(analytic, numeric) -> float:
    """Max elementwise |a - n| / max(1, |a|, |n|)."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    scale = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / scale)) if a.size else 0.0


def _central_difference(f, x, eps):
    grad = np.zeros_like(x)
    flat_g = grad.reshape(-1)
    flat_x = x.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + eps
        hi = f()
        flat_x[i] = orig - eps
        lo = f()
        flat_x[i] = orig
        flat_g[i] = (hi - lo) / (2.0 * eps)
    return grad


def fmvr_gradient_check(
    shape: tuple[int, int, int] = (3, 4, 4),
    seed: int = 0,
    eps: float = 1e-5,
    window: int = 2,
    residual_skip: bool = False,
) -> dict[str, float]:
    """Compare one restoration block's backward pass to central differences.

    The objective is sum(g * forward(x)) for a fixed random g.  Returns the
    max relative error per gradient output.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, *shape]))
    channels = shape[0]
    x = rng.normal(size=shape)
    g = rng.normal(size=shape)
    w_a = rng.normal(size=channels)
    w_m = rng.normal(size=channels)

    params = FmvrParams(w_a, w_m, residual_skip)
    y, acts = fmvr_forward(x, params, window)
    grad_x, grad_w_a, grad_w_m = fmvr_backward(g, acts, params)

    def objective():
        out, _ = fmvr_forward(x, FmvrParams(w_a, w_m, residual_skip), window)
        return float(np.sum(g * out))

    fd_x = _central_difference(objective, x, eps)
    fd_w_a = _central_difference(objective, w_a, eps)
    fd_w_m = _central_difference(objective, w_m, eps)
    return {
        "input": relative_error(grad_x, fd_x),
        "avg_gain": relative_error(grad_w_a, fd_w_a),
        "max_gain": relative_error(grad_w_m, fd_w_m),
    }


def mrl_gradient_check(
    seed: int = 0,
    eps: float = 1e-5,
    base_side: int = 4,
    channels: int = 2,
    num_classes: int = 3,
    batch_size: int = 2,
    sampling: str = "avg_pool",
    chain_restored: bool = False,
) -> dict[str, float]:
    """Compare the full multi-scale backward pass to central differences.

    Checks every head and every level's restoration gains on one small
    batch of the synthetic task.
    """
    cfg = PyramidConfig(
        base_side=base_side,
        channels=channels,
        sampling=sampling,
        fmvr_enabled=True,
        chain_restored=chain_restored,
    )
    model = make_model(cfg, num_classes)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    # Non-trivial operating point: random heads and perturbed gains.
    for head in model.heads:
        head.weight = rng.normal(size=head.weight.shape)
        head.bias = rng.normal(size=head.bias.shape)
    for e, params in enumerate(cfg.fmvr_params):
        cfg.fmvr_params[e] = FmvrParams(
            params.w_a_high + 0.3 * rng.normal(size=channels),
            params.w_m_low + 0.3 * rng.normal(size=channels),
            params.residual_skip,
        )

    dataset = generate_dataset(
        seed, batch_size, num_classes, channels, base_side, noise_sigma=0.1
    )
    batch = (dataset.features, dataset.labels)
    _, _, grads = compute_gradients(model, batch)

    def objective():
        total, _, _ = compute_gradients(model, batch)
        return total

    errors: dict[str, float] = {}

    def merge(group, err):
        errors[group] = max(errors.get(group, 0.0), err)

    for e in range(cfg.num_levels()):
        head = model.heads[e]
        merge(
            "head_weight",
            relative_error(
                grads[("head", e, "weight")],
                _central_difference(objective, head.weight, eps),
            ),
        )
        merge(
            "head_bias",
            relative_error(
                grads[("head", e, "bias")],
                _central_difference(objective, head.bias, eps),
            ),
        )

        def fd_gain(which):
            base = cfg.fmvr_params[e]
            vec = (base.w_a_high if which == "w_a" else base.w_m_low).copy()

            def rebuilt():
                if which == "w_a":
                    cfg.fmvr_params[e] = FmvrParams(vec, base.w_m_low, base.residual_skip)
                else:
                    cfg.fmvr_params[e] = FmvrParams(base.w_a_high, vec, base.residual_skip)
                value = objective()
                cfg.fmvr_params[e] = base
                return value

            return _central_difference(rebuilt, vec, eps)

        merge(
            "fmvr_avg_gain",
            relative_error(grads[("fmvr", e, "w_a")], fd_gain("w_a")),
        )
        merge(
            "fmvr_max_gain",
            relative_error(grads[("fmvr", e, "w_m")], fd_gain("w_m")),
        )
    return errors
