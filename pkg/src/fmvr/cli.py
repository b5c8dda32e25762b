"""Command-line entry point.

Subcommands: gradcheck, decompose, pyramid, train, eval, flops,
ablate-sampling.  Every run is reproducible from (config, seed); outputs are
FMT1 tensors plus JSON/CSV with a manifest naming each artifact.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import flops as cost_model
from .gradcheck import fmvr_gradient_check, mrl_gradient_check
from .matryoshka import SAMPLING_STRATEGIES, PyramidConfig, build_pyramid
from .mrl_train import (
    evaluate,
    generate_dataset,
    load_model,
    make_model,
    save_model,
    train,
)
from .restoration import avg_decompose, max_decompose
from .tensor_core import (
    DimensionError,
    Fmt1Error,
    InvalidConfig,
    ShapeMismatch,
    read_fmt1,
    write_fmt1,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class ConfigError(Exception):
    """Bad configuration file or option value (usage-class failure)."""


def _fmt(value: float) -> str:
    """17 significant digits, '.' decimal: round-trips float64 exactly."""
    return f"{value:.17g}"


def _load_config_file(path: str) -> dict:
    try:
        if path.endswith((".toml", ".tml")):
            import tomli

            with open(path, "rb") as fh:
                data = tomli.load(fh)
        else:
            with open(path) as fh:
                data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a table/object at top level")
    return data


def _merge_settings(cls, config: dict, overrides: dict):
    """Defaults <- config file <- explicit CLI flags, rejecting unknown keys."""
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(config) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged = dict(config)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _write_json(payload: dict, out_dir: str, name: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _emit(payload: dict, args, human: str) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True) if args.json else human)


# --- gradcheck ----------------------------------------------------------------


def _parse_shapes(text: str) -> list[tuple[int, int, int]]:
    shapes = []
    for token in text.split(","):
        parts = token.strip().lower().split("x")
        if len(parts) != 3:
            raise ConfigError(f"bad shape {token!r}, expected CxHxW")
        try:
            dims = tuple(int(p) for p in parts)
        except ValueError as exc:
            raise ConfigError(f"bad shape {token!r}: {exc}") from exc
        if any(d < 1 for d in dims):
            raise ConfigError(f"bad shape {token!r}: dims must be positive")
        shapes.append(dims)
    if not shapes:
        raise ConfigError("need at least one shape")
    return shapes


@dataclass
class GradcheckSettings:
    shapes: str = "1x2x2,3x4x4,8x6x6"
    seeds: int = 12
    tolerance: float = 1e-6
    e2e_cases: int = 8
    e2e_tolerance: float = 1e-5


def cmd_gradcheck(args) -> int:
    config = _load_config_file(args.config) if args.config else {}
    settings = _merge_settings(
        GradcheckSettings,
        config,
        {
            "shapes": args.shapes,
            "seeds": args.seeds,
            "tolerance": args.tolerance,
            "e2e_cases": args.e2e_cases,
            "e2e_tolerance": args.e2e_tolerance,
        },
    )
    shapes = _parse_shapes(settings.shapes)
    base_seed = args.seed or 0

    block_worst: dict[str, float] = {}
    for shape in shapes:
        for s in range(settings.seeds):
            errors = fmvr_gradient_check(shape, seed=base_seed + s)
            for group, err in errors.items():
                block_worst[group] = max(block_worst.get(group, 0.0), err)
    e2e_worst: dict[str, float] = {}
    for s in range(settings.e2e_cases):
        errors = mrl_gradient_check(seed=base_seed + s)
        for group, err in errors.items():
            e2e_worst[group] = max(e2e_worst.get(group, 0.0), err)

    block_pass = all(err < settings.tolerance for err in block_worst.values())
    e2e_pass = all(err < settings.e2e_tolerance for err in e2e_worst.values())
    passed = block_pass and e2e_pass
    payload = {
        "restoration": {
            "shapes": [list(s) for s in shapes],
            "cases": settings.seeds * len(shapes),
            "tolerance": settings.tolerance,
            "max_relative_error": block_worst,
            "passed": block_pass,
        },
        "end_to_end": {
            "cases": settings.e2e_cases,
            "tolerance": settings.e2e_tolerance,
            "max_relative_error": e2e_worst,
            "passed": e2e_pass,
        },
        "passed": passed,
    }
    if args.out:
        _write_json(payload, args.out, "gradcheck.json")
    lines = [
        f"restoration: worst {max(block_worst.values()):.3e} "
        f"over tolerance {settings.tolerance:g}: {'pass' if block_pass else 'FAIL'}",
        f"end-to-end:  worst {max(e2e_worst.values()):.3e} "
        f"over tolerance {settings.e2e_tolerance:g}: {'pass' if e2e_pass else 'FAIL'}",
    ]
    _emit(payload, args, "\n".join(lines))
    return EXIT_OK if passed else EXIT_RUNTIME


# --- decompose ------------------------------------------------------------


def _energy(x: np.ndarray) -> float:
    return float(np.sum(x * x))


def cmd_decompose(args) -> int:
    x = read_fmt1(args.input)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise DimensionError(f"decompose expects a (C, H, W) tensor, got {x.shape}")
    low_a, high_a = avg_decompose(x, args.window)
    high_m, low_m = max_decompose(x, args.window)

    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    parts = {
        "x_l_a": low_a,
        "x_h_a": high_a,
        "x_h_m": high_m,
        "x_l_m": low_m,
    }
    files = []
    for name, tensor in parts.items():
        fname = f"{name}.fmt1"
        write_fmt1(tensor, os.path.join(out_dir, fname))
        files.append({"file": fname, "role": name, "shape": list(tensor.shape)})
    stats = {
        "input": args.input,
        "shape": list(x.shape),
        "window": args.window,
        "files": files,
        "energy": {
            "input": _energy(x),
            **{name: _energy(tensor) for name, tensor in parts.items()},
        },
        "cross": {
            "avg_route": float(np.sum(low_a * high_a)),
            "max_route": float(np.sum(high_m * low_m)),
        },
    }
    path = _write_json(stats, out_dir, "stats.json")
    _emit(
        stats,
        args,
        f"wrote 4 components + {path}; energies "
        + ", ".join(f"{k}={v:.6g}" for k, v in stats["energy"].items()),
    )
    return EXIT_OK


# --- pyramid ----------------------------------------------------------------


def cmd_pyramid(args) -> int:
    x = read_fmt1(args.input)
    if x.ndim != 3:
        raise DimensionError(f"pyramid expects a (C, S, S) tensor, got {x.shape}")
    cfg = PyramidConfig(
        base_side=x.shape[-1],
        channels=x.shape[0],
        sampling=args.sampling,
        fmvr_enabled=args.fmvr,
        chain_restored=args.chain_restored,
    )
    pyramid = build_pyramid(x, cfg)

    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    files = []
    for i, level in enumerate(pyramid.levels):
        raw_name = f"level_{i}_raw.fmt1"
        write_fmt1(level.raw, os.path.join(out_dir, raw_name))
        files.append(
            {
                "file": raw_name,
                "role": "raw",
                "level": i,
                "side": level.side,
                "tokens": level.token_count,
                "shape": list(level.raw.shape),
            }
        )
        if cfg.fmvr_enabled:
            restored_name = f"level_{i}_restored.fmt1"
            write_fmt1(level.restored, os.path.join(out_dir, restored_name))
            files.append(
                {
                    "file": restored_name,
                    "role": "restored",
                    "level": i,
                    "side": level.side,
                    "tokens": level.token_count,
                    "shape": list(level.restored.shape),
                }
            )
    manifest = {
        "input": args.input,
        "sampling": cfg.sampling,
        "fmvr_enabled": cfg.fmvr_enabled,
        "chain_restored": cfg.chain_restored,
        "sides": cfg.sides(),
        "token_counts": cfg.token_counts(),
        "files": files,
    }
    path = _write_json(manifest, out_dir, "manifest.json")
    _emit(
        manifest,
        args,
        f"wrote {len(files)} tensors + {path}; token counts {cfg.token_counts()}",
    )
    return EXIT_OK


# --- train / eval -----------------------------------------------------------


@dataclass
class TrainSettings:
    seed: int = 0
    num_classes: int = 8
    channels: int = 16
    base_side: int = 24
    sampling: str = "avg_pool"
    fmvr_enabled: bool = True
    chain_restored: bool = False
    residual_skip: bool = False
    loss_weights: list | None = None
    lr: float = 1e-2
    momentum: float = 0.9
    steps: int = 600
    batch_size: int = 32
    train_samples: int = 2048
    eval_samples: int = 512
    noise_sigma: float = 0.1


def _train_once(settings: TrainSettings):
    train_ds = generate_dataset(
        settings.seed,
        settings.train_samples,
        settings.num_classes,
        settings.channels,
        settings.base_side,
        settings.noise_sigma,
        split="train",
    )
    eval_ds = generate_dataset(
        settings.seed,
        settings.eval_samples,
        settings.num_classes,
        settings.channels,
        settings.base_side,
        settings.noise_sigma,
        split="eval",
    )
    cfg = PyramidConfig(
        base_side=settings.base_side,
        channels=settings.channels,
        sampling=settings.sampling,
        fmvr_enabled=settings.fmvr_enabled,
        chain_restored=settings.chain_restored,
        residual_skip=settings.residual_skip,
    )
    model = make_model(cfg, settings.num_classes, settings.loss_weights)
    history = train(
        model,
        train_ds,
        settings.steps,
        lr=settings.lr,
        momentum=settings.momentum,
        batch_size=settings.batch_size,
        seed=settings.seed,
    )
    accuracies = evaluate(model, eval_ds)
    return model, history, accuracies


def _write_history_csv(path: str, history, token_counts) -> None:
    with open(path, "w", newline="") as fh:
        cols = ["step", "total_loss"] + [f"loss_tokens_{t}" for t in token_counts]
        fh.write(",".join(cols) + "\n")
        for row in history:
            cells = [str(row["step"]), _fmt(row["total_loss"])]
            cells += [_fmt(v) for v in row["per_scale"]]
            fh.write(",".join(cells) + "\n")


def cmd_train(args) -> int:
    config = _load_config_file(args.config) if args.config else {}
    settings = _merge_settings(
        TrainSettings,
        config,
        {
            "seed": args.seed,
            "sampling": args.sampling,
            "fmvr_enabled": args.fmvr,
            "steps": args.steps,
            "lr": args.lr,
            "num_classes": args.num_classes,
            "channels": args.channels,
            "base_side": args.base_side,
            "train_samples": args.train_samples,
            "eval_samples": args.eval_samples,
        },
    )
    model, history, accuracies = _train_once(settings)
    cfg = model.pyramid

    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "train_log.csv")
    _write_history_csv(csv_path, history, cfg.token_counts())
    summary = {
        "settings": dataclasses.asdict(settings),
        "token_counts": cfg.token_counts(),
        "accuracy": accuracies.tolist(),
        "final_loss": history[-1]["total_loss"] if history else None,
    }
    _write_json(summary, out_dir, "accuracies.json")
    save_model(
        model,
        os.path.join(out_dir, "model"),
        extra={"dataset": dataclasses.asdict(settings)},
    )
    human = "per-level accuracy: " + ", ".join(
        f"{t}tok={a:.3f}" for t, a in zip(cfg.token_counts(), accuracies)
    )
    _emit(summary, args, human)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, manifest = load_model(args.model)
    dataset_cfg = manifest.get("dataset")
    if dataset_cfg is None:
        raise ConfigError("model manifest carries no dataset settings")
    eval_ds = generate_dataset(
        dataset_cfg["seed"],
        args.eval_samples or dataset_cfg["eval_samples"],
        dataset_cfg["num_classes"],
        dataset_cfg["channels"],
        dataset_cfg["base_side"],
        dataset_cfg["noise_sigma"],
        split="eval",
    )
    accuracies = evaluate(model, eval_ds)
    payload = {
        "model": args.model,
        "token_counts": model.pyramid.token_counts(),
        "accuracy": accuracies.tolist(),
    }
    if args.out:
        _write_json(payload, args.out, "eval.json")
    human = "per-level accuracy: " + ", ".join(
        f"{t}tok={a:.3f}"
        for t, a in zip(model.pyramid.token_counts(), accuracies)
    )
    _emit(payload, args, human)
    return EXIT_OK


# --- flops -------------------------------------------------------------------


@dataclass
class FlopsSettings:
    num_layers: int = 32
    hidden_dim: int = 4096
    ffn_dim: int = 11008
    vocab_size: int = 32000
    text_tokens: int = cost_model.DEFAULT_TEXT_TOKENS
    vision_encoder_tb: float = 0.349
    projection_tb: float = 0.024
    fmvr_channels: int = 1024
    fmvr_base_side: int = 24


def _parse_tokens(text: str) -> list[int]:
    try:
        tokens = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad token list {text!r}: {exc}") from exc
    if not tokens or any(t < 0 for t in tokens):
        raise ConfigError(f"bad token list {text!r}")
    return tokens


def cmd_flops(args) -> int:
    config = _load_config_file(args.config) if args.config else {}
    settings = _merge_settings(
        FlopsSettings, config, {"text_tokens": args.text_tokens}
    )
    cfg = cost_model.CostModelConfig(**dataclasses.asdict(settings))
    tokens = _parse_tokens(args.tokens)
    if args.calibrate:
        fitted, residuals = cost_model.calibrate_text_tokens(cfg)
        cfg = dataclasses.replace(cfg, text_tokens=fitted)
    reports = cost_model.report(cfg, tokens)
    payload = {
        "config": dataclasses.asdict(settings) | {"text_tokens": cfg.text_tokens},
        "reports": [r.as_dict() for r in reports],
    }
    if args.calibrate:
        payload["calibration"] = {
            "fitted_text_tokens": fitted,
            "residuals_tb": {str(k): v for k, v in residuals.items()},
        }
    if args.out:
        _write_json(payload, args.out, "flops.json")
        csv_path = os.path.join(args.out, "flops.csv")
        with open(csv_path, "w", newline="") as fh:
            fh.write(
                "visual_tokens,vision_encoder_tb,projection_tb,fmvr_tb,"
                "llm_tb,total_tb,speedup_vs_reference\n"
            )
            for r in reports:
                fh.write(
                    ",".join(
                        [str(r.visual_tokens)]
                        + [
                            _fmt(v)
                            for v in (
                                r.vision_encoder_tb,
                                r.projection_tb,
                                r.fmvr_tb,
                                r.llm_tb,
                                r.total_tb,
                                r.speedup_vs_reference,
                            )
                        ]
                    )
                    + "\n"
                )
    _emit(payload, args, cost_model.format_report_table(reports))
    return EXIT_OK


# --- sampling ablation --------------------------------------------------------


def cmd_ablate_sampling(args) -> int:
    config = _load_config_file(args.config) if args.config else {}
    settings = _merge_settings(
        TrainSettings,
        config,
        {
            "seed": args.seed,
            "steps": args.steps,
            "num_classes": args.num_classes,
            "channels": args.channels,
            "base_side": args.base_side,
            "train_samples": args.train_samples,
            "eval_samples": args.eval_samples,
        },
    )
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad seed list {args.seeds!r}") from exc
    if not seeds:
        raise ConfigError("need at least one seed")

    token_counts = PyramidConfig(
        base_side=settings.base_side,
        channels=settings.channels,
        fmvr_enabled=False,
    ).token_counts()
    per_run: dict[str, list[list[float]]] = {s: [] for s in SAMPLING_STRATEGIES}
    for seed in seeds:
        for strategy in SAMPLING_STRATEGIES:
            run = dataclasses.replace(settings, seed=seed, sampling=strategy)
            _, _, accuracies = _train_once(run)
            per_run[strategy].append(accuracies.tolist())

    means = {
        strategy: np.mean(per_run[strategy], axis=0).tolist()
        for strategy in SAMPLING_STRATEGIES
    }
    overall = {
        strategy: float(np.mean(per_run[strategy]))
        for strategy in SAMPLING_STRATEGIES
    }
    payload = {
        "settings": dataclasses.asdict(settings),
        "seeds": seeds,
        "token_counts": token_counts,
        "per_seed_accuracy": per_run,
        "mean_accuracy_by_level": means,
        "mean_accuracy": overall,
    }
    out_dir = args.out or "."
    _write_json(payload, out_dir, "ablation.json")
    with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as fh:
        fh.write("tokens," + ",".join(SAMPLING_STRATEGIES) + "\n")
        for i, t in enumerate(token_counts):
            fh.write(
                f"{t},"
                + ",".join(_fmt(means[s][i]) for s in SAMPLING_STRATEGIES)
                + "\n"
            )

    width = max(len(s) for s in SAMPLING_STRATEGIES)
    lines = [
        f"{'tokens':>7} " + " ".join(f"{s:>{width}}" for s in SAMPLING_STRATEGIES)
    ]
    for i, t in enumerate(token_counts):
        lines.append(
            f"{t:>7d} "
            + " ".join(f"{means[s][i]:>{width}.3f}" for s in SAMPLING_STRATEGIES)
        )
    lines.append(
        f"{'mean':>7} "
        + " ".join(f"{overall[s]:>{width}.3f}" for s in SAMPLING_STRATEGIES)
    )
    _emit(payload, args, "\n".join(lines))
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def _defaults_epilog(cls) -> str:
    pairs = ", ".join(
        f"{f.name}={f.default}" for f in dataclasses.fields(cls)
    )
    return f"config defaults: {pairs}"


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON settings file")
    common.add_argument("--seed", type=int, help="base random seed")
    common.add_argument(
        "--out",
        help="output directory; tensor-producing commands default to '.', "
        "report commands write files only when this is set",
    )
    common.add_argument(
        "--json", action="store_true", help="print machine-readable JSON"
    )

    parser = argparse.ArgumentParser(
        prog="fmvr",
        description="Restoration of pooled visual-token pyramids: "
        "decomposition, training, and cost-model tools.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_command(name, help_text, settings_cls=None):
        return sub.add_parser(
            name,
            parents=[common],
            help=help_text,
            epilog=_defaults_epilog(settings_cls) if settings_cls else None,
            formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        )

    p = add_command(
        "gradcheck",
        "compare analytic gradients against finite differences",
        GradcheckSettings,
    )
    p.add_argument("--shapes", help="comma-separated CxHxW shapes")
    p.add_argument("--seeds", type=int, help="seeded cases per shape")
    p.add_argument("--tolerance", type=float, help="restoration tolerance")
    p.add_argument("--e2e-cases", type=int, dest="e2e_cases")
    p.add_argument("--e2e-tolerance", type=float, dest="e2e_tolerance")
    p.set_defaults(handler=cmd_gradcheck)

    p = add_command(
        "decompose", "split a tensor into its four frequency components"
    )
    p.add_argument("input", help="FMT1 tensor (C, H, W)")
    p.add_argument("--window", type=int, default=2)
    p.set_defaults(handler=cmd_decompose)

    p = add_command("pyramid", "build and dump every pyramid level")
    p.add_argument("input", help="FMT1 tensor (C, S, S)")
    p.add_argument("--sampling", choices=SAMPLING_STRATEGIES, default="avg_pool")
    p.add_argument("--fmvr", dest="fmvr", action="store_true", default=True)
    p.add_argument("--no-fmvr", dest="fmvr", action="store_false")
    p.add_argument("--chain-restored", action="store_true", default=False)
    p.set_defaults(handler=cmd_pyramid)

    p = add_command("train", "train the multi-scale classifier", TrainSettings)
    p.add_argument("--sampling", choices=SAMPLING_STRATEGIES)
    p.add_argument("--fmvr", dest="fmvr", action="store_true", default=None)
    p.add_argument("--no-fmvr", dest="fmvr", action="store_false")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--num-classes", type=int, dest="num_classes")
    p.add_argument("--channels", type=int)
    p.add_argument("--base-side", type=int, dest="base_side")
    p.add_argument("--train-samples", type=int, dest="train_samples")
    p.add_argument("--eval-samples", type=int, dest="eval_samples")
    p.set_defaults(handler=cmd_train)

    p = add_command("eval", "evaluate a saved model on a fresh eval split")
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--eval-samples", type=int, dest="eval_samples")
    p.set_defaults(handler=cmd_eval)

    p = add_command("flops", "prefill cost model and speedup table", FlopsSettings)
    p.add_argument("--tokens", default="576,144,36,9,1")
    p.add_argument("--text-tokens", type=int, dest="text_tokens")
    p.add_argument(
        "--calibrate",
        action="store_true",
        help="refit text_tokens to the reference table before reporting",
    )
    p.set_defaults(handler=cmd_flops)

    p = add_command(
        "ablate-sampling",
        "train one model per sampling strategy and tabulate accuracy",
        TrainSettings,
    )
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--steps", type=int)
    p.add_argument("--num-classes", type=int, dest="num_classes")
    p.add_argument("--channels", type=int)
    p.add_argument("--base-side", type=int, dest="base_side")
    p.add_argument("--train-samples", type=int, dest="train_samples")
    p.add_argument("--eval-samples", type=int, dest="eval_samples")
    p.set_defaults(handler=cmd_ablate_sampling)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (ConfigError, InvalidConfig) as exc:
        print(f"fmvr: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (Fmt1Error, FileNotFoundError, OSError, DimensionError, ShapeMismatch) as exc:
        print(f"fmvr: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
