#!/usr/bin/env python3
"""Command-line entry point: train, sample, eval, verify, plot, reproduce, preset-dump."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable

import numpy as np
from dotenv import load_dotenv

from parsers.experiment_config import (
    ExperimentConfig,
    build_distribution,
    build_schedule,
    load_config,
    neural_models,
    resolve_models,
    resolve_tree,
    save_config,
)
from parsers.presets import PRESETS, load_preset, preset_payload
from services.analytic import AnalyticModel
from services.batch import SampleBatch, config_hash
from services.checkpoint import load_checkpoint, save_checkpoint
from services.errors import CompDiffError, ConfigError, NumericAbort
from services.experiments import likelihood_oracle, reproduce, run_sampler
from services.metrics import evaluate_samples, mode_coverage
from services.networks import build_model, relative_score_mse, train
from services.reporting import (
    plot_panels,
    read_samples_csv,
    write_json,
    write_loss_csv,
    write_samples_csv,
    write_table_csv,
)
from services.schedule import build_linear
from services.verification import (
    EQUALITY_HOLDS,
    GAP_CONFIRMED,
    ground_truth_samples,
    run_default_suite,
)

ROOT = Path(__file__).parent.resolve()
load_dotenv(ROOT / ".env", override=False)

LOGGER = logging.getLogger("cli")

DEFAULT_LOG_LEVEL = "INFO"
DEFAULT_T = 100
QUICK_SAMPLES = 1000
QUICK_SEEDS = 2
QUICK_TRAIN_ITERATIONS = 500
QUICK_RESOLUTION = 256
QUICK_PROBES = 100
TRAIN_CHECK_LEVELS = (10, 50, 90)
TRAIN_CHECK_PROBES = 2000
EXPECTED_VERDICTS = {
    "mixture_identity": EQUALITY_HOLDS,
    "guidance_identity": EQUALITY_HOLDS,
    "product_gap": GAP_CONFIRMED,
    "tempering_gap": GAP_CONFIRMED,
    "annealed_guidance_gap": GAP_CONFIRMED,
    "negation_gap": GAP_CONFIRMED,
}


def configure_logging(level: str | None = None) -> None:
    name = (level or os.getenv("COMPDIFF_LOG_LEVEL") or DEFAULT_LOG_LEVEL).upper()
    if not isinstance(logging.getLevelName(name), int):
        raise ConfigError(f"Invalid log level '{name}'")
    logging.basicConfig(level=name, format="%(asctime)s %(levelname)s %(message)s", force=True)


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Path to an experiment config JSON")
    common.add_argument("--preset", choices=sorted(PRESETS), help="Use a built-in preset instead of --config")
    common.add_argument("--seed", type=int, help="Override the config seed(s)")
    common.add_argument("--out", help="Output directory (env COMPDIFF_OUT_DIR, then the config's output_dir)")
    common.add_argument("--threads", type=int, help="Worker threads for chain blocks; 0 = one per CPU")
    common.add_argument("--log-level", help="Logging level (env COMPDIFF_LOG_LEVEL, default INFO)")
    common.add_argument("--quick", action="store_true", help="Reduced sample counts and iterations for smoke runs")

    parser = argparse.ArgumentParser(description="Compositional sampling toolkit for 2D diffusion models")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", parents=[common], help="Train the config's neural models")
    p_train.add_argument("--model", help="Train only this model")
    p_train.add_argument("--resume", action="store_true", help="Continue from an existing matching checkpoint")

    p_sample = sub.add_parser("sample", parents=[common], help="Sample the composed target")
    p_sample.add_argument("--method", help="Named method from the config's methods (default: the config sampler)")

    p_eval = sub.add_parser("eval", parents=[common], help="Score a samples CSV against ground truth")
    p_eval.add_argument("--samples", help="Samples CSV (default: <out>/samples.csv)")

    p_verify = sub.add_parser("verify", parents=[common], help="Run the identity/gap verification suite")
    p_verify.add_argument("--include-negation", action="store_true", help="Also check the negation gap")

    p_plot = sub.add_parser("plot", parents=[common], help="Scatter up to 4 sample CSVs into one SVG")
    p_plot.add_argument("inputs", nargs="+", help="Sample CSV files")
    p_plot.add_argument("--titles", nargs="*", help="Panel titles (default: file stems)")

    sub.add_parser("reproduce", parents=[common], help="Run every method across seeds and check orderings")
    sub.add_parser("preset-dump", parents=[common], help="Print or write a preset as config JSON")
    return parser.parse_args(argv)


def _config(args: argparse.Namespace, required: bool = True) -> ExperimentConfig | None:
    if args.config and args.preset:
        raise ConfigError("Pass either --config or --preset, not both")
    if args.config:
        return load_config(args.config)
    if args.preset:
        return load_preset(args.preset)
    if required:
        raise ConfigError("This command needs --config or --preset")
    return None


def _out_dir(args: argparse.Namespace, config: ExperimentConfig | None) -> Path:
    out = args.out or os.getenv("COMPDIFF_OUT_DIR") or (config.output_dir if config else "out")
    return Path(out)


def _seeds(args: argparse.Namespace, config: ExperimentConfig | None) -> list[int]:
    if args.seed is not None:
        return [args.seed]
    seeds = list(config.seeds) if config else [0]
    return seeds[:QUICK_SEEDS] if args.quick else seeds


def _n_samples(args: argparse.Namespace, config: ExperimentConfig) -> int:
    return min(config.metrics.n_samples, QUICK_SAMPLES) if args.quick else config.metrics.n_samples


def _resolution(args: argparse.Namespace, config: ExperimentConfig | None) -> int:
    resolution = config.metrics.grid_resolution if config else 512
    return min(resolution, QUICK_RESOLUTION) if args.quick else resolution


def cmd_train(args: argparse.Namespace) -> int:
    config = _config(args)
    schedule = build_schedule(config)
    out_dir = _out_dir(args, config)
    specs = neural_models(config)
    if args.model:
        specs = [spec for spec in specs if spec.name == args.model]
        if not specs:
            raise ConfigError(f"No neural model named '{args.model}' in config '{config.name}'")
    if not specs:
        raise ConfigError(f"Config '{config.name}' has no neural models to train")

    for spec in specs:
        model_dir = out_dir / spec.name
        ckpt_path = Path(spec.checkpoint)
        train_cfg = spec.train
        if args.seed is not None:
            train_cfg = replace(train_cfg, seed=args.seed)
        if args.quick:
            train_cfg = replace(train_cfg, iterations=min(train_cfg.iterations, QUICK_TRAIN_ITERATIONS))

        if args.resume and ckpt_path.exists():
            model = load_checkpoint(ckpt_path, expected_arch=spec.architecture)
            if model.parameterization is not spec.parameterization or model.T != schedule.T:
                raise ConfigError(f"Checkpoint {ckpt_path} does not match model '{spec.name}'")
            model.name = spec.name
            LOGGER.info("Resuming model=%s from %s", spec.name, ckpt_path)
        else:
            model = build_model(spec.architecture, spec.parameterization, schedule, seed=train_cfg.seed, name=spec.name)

        reference = AnalyticModel(
            base=build_distribution(config.distributions[spec.distribution]),
            schedule=schedule,
            label=spec.label,
            name=spec.distribution,
        )
        result = train(model, reference.sample, train_cfg)
        save_checkpoint(result.model, ckpt_path, extra={"train": train_cfg.to_dict()})
        write_loss_csv(result.losses, model_dir / "loss.csv")

        probe_rng = np.random.default_rng(train_cfg.seed)
        quality = {}
        for t in TRAIN_CHECK_LEVELS:
            if t <= schedule.T:
                probes = reference.sample(TRAIN_CHECK_PROBES, probe_rng, t=t)
                quality[f"relative_score_mse_t{t}"] = relative_score_mse(result.model, reference, t, probes)
        smoothed = result.smoothed()
        summary = {
            "model": spec.name,
            "checkpoint": str(ckpt_path),
            "iterations": train_cfg.iterations,
            "initial_loss": float(smoothed[0]) if smoothed.size else None,
            "final_loss": float(smoothed[-1]) if smoothed.size else None,
            **quality,
        }
        write_json(summary, model_dir / "train.json")
        LOGGER.info("Trained model=%s checkpoint=%s %s", spec.name, ckpt_path, quality)
    return 0


def cmd_sample(args: argparse.Namespace) -> int:
    config = _config(args)
    schedule = build_schedule(config)
    tree = resolve_tree(config, resolve_models(config, schedule))
    if args.method:
        if args.method not in config.methods:
            raise ConfigError(f"Unknown method '{args.method}'; config defines {', '.join(config.methods) or 'none'}")
        cfg = config.methods[args.method]
    else:
        cfg = config.sampler
    seed = _seeds(args, config)[0]
    out_dir = _out_dir(args, config)

    batch, stats = run_sampler(tree, schedule, cfg, _n_samples(args, config), seed, args.threads, config.metrics.pilot_chains)
    write_samples_csv(batch, out_dir / "samples.csv")
    write_json(
        {
            "provenance": batch.provenance,
            "config_hash": config_hash(config.to_dict()),
            "sampler": replace(cfg, seed=seed).to_dict(),
            "stats": stats.to_dict(),
        },
        out_dir / "stats.json",
    )
    LOGGER.info("Wrote samples path=%s n=%s", out_dir / "samples.csv", batch.n)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _config(args)
    schedule = build_schedule(config)
    tree = resolve_tree(config, resolve_models(config, schedule))
    out_dir = _out_dir(args, config)
    seed = _seeds(args, config)[0]
    bounds = config.metrics.bounds
    resolution = _resolution(args, config)

    samples_path = Path(args.samples) if args.samples else out_dir / "samples.csv"
    batch = SampleBatch(points=read_samples_csv(samples_path), provenance={"path": str(samples_path)})
    reference = ground_truth_samples(tree, max(batch.n, 2), seed, bounds, resolution)
    oracle = likelihood_oracle(tree, bounds, resolution)
    metadata = {"tree": tree.describe(), "samples": str(samples_path), "seed": seed}
    if config.metrics.mode_centers is not None:
        metadata["mode_coverage"] = mode_coverage(batch, np.asarray(config.metrics.mode_centers))
    report = evaluate_samples(batch, reference, tree, oracle, config.metrics.gmm_components, seed, metadata)
    write_json(report.to_dict(), out_dir / "metrics.json")
    LOGGER.info("Evaluated samples=%s mmd=%.5f ll=%s", samples_path, report.mmd, report.ll)
    if not report.ll_reliable:
        LOGGER.warning("LL flagged unreliable: %.1f%% of samples out of bounds", 100.0 * report.ll_out_of_bounds)
        return 4
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    config = _config(args, required=False)
    schedule = build_schedule(config) if config else build_linear(DEFAULT_T)
    seed = _seeds(args, config)[0]
    probes = config.metrics.verify_probes if config else 400
    if args.quick:
        probes = min(probes, QUICK_PROBES)
    out_dir = _out_dir(args, config)

    report = run_default_suite(schedule, seed, probes, _resolution(args, config), args.include_negation)
    write_json(report.to_dict(), out_dir / "verification.json")
    write_table_csv(report.relative_gap_table(), out_dir / "gap_table.csv")
    unexpected = [
        f"{claim}={verdict}"
        for claim, verdict in report.verdicts().items()
        if EXPECTED_VERDICTS.get(claim) not in (None, verdict)
    ]
    for claim, verdict in report.verdicts().items():
        LOGGER.info("Claim %s: %s", claim, verdict)
    if unexpected:
        LOGGER.error("Unexpected verdicts: %s", ", ".join(unexpected))
        return 1
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    config = _config(args, required=False)
    if len(args.inputs) > 4:
        raise ConfigError(f"plot takes at most 4 sample files, got {len(args.inputs)}")
    titles = args.titles or [Path(p).stem for p in args.inputs]
    if len(titles) != len(args.inputs):
        raise ConfigError("--titles needs one title per input file")
    panels = [(title, read_samples_csv(path)) for title, path in zip(titles, args.inputs)]
    target = Path(args.out) if args.out and Path(args.out).suffix == ".svg" else _out_dir(args, config) / "plot.svg"
    bounds = config.metrics.bounds if config else ((-1.6, -1.6), (1.6, 1.6))
    plot_panels(panels, target, bounds)
    return 0


def cmd_reproduce(args: argparse.Namespace) -> int:
    config = _config(args)
    schedule = build_schedule(config)
    tree = resolve_tree(config, resolve_models(config, schedule))
    out_dir = _out_dir(args, config)
    save_config(config, out_dir / "config.json")

    result = reproduce(
        name=config.name,
        tree=tree,
        s=schedule,
        methods=dict(config.methods),
        rebuild_tree=lambda s: resolve_tree(config, resolve_models(config, s)),
        out_dir=out_dir,
        seeds=_seeds(args, config),
        n_samples=_n_samples(args, config),
        bounds=config.metrics.bounds,
        resolution=_resolution(args, config),
        gmm_components=config.metrics.gmm_components,
        mode_centers=[list(c) for c in config.metrics.mode_centers] if config.metrics.mode_centers else None,
        threads=args.threads,
        pilot_chains=config.metrics.pilot_chains,
    )
    failed = result.failed()
    if failed:
        LOGGER.error("Failed orderings for %s: %s", config.name, "; ".join(failed))
        return 1
    LOGGER.info("All orderings hold for %s (out=%s)", config.name, out_dir)
    return 0


def cmd_preset_dump(args: argparse.Namespace) -> int:
    if not args.preset:
        raise ConfigError("preset-dump needs --preset")
    payload = ExperimentConfig.from_dict(preset_payload(args.preset)).to_dict()
    if args.out:
        target = Path(args.out)
        if target.suffix != ".json":
            target = target / f"{args.preset}.json"
        write_json(payload, target)
        LOGGER.info("Wrote preset %s to %s", args.preset, target)
    else:
        sys.stdout.write(json.dumps(payload, indent=2, ensure_ascii=False) + "\n")
    return 0


COMMANDS: dict[str, Callable[[argparse.Namespace], int]] = {
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "plot": cmd_plot,
    "reproduce": cmd_reproduce,
    "preset-dump": cmd_preset_dump,
}


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    try:
        configure_logging(args.log_level)
        return COMMANDS[args.command](args)
    except NumericAbort as exc:
        LOGGER.error("Numeric abort: %s diagnostics=%s", exc, exc.diagnostics)
        LOGGER.debug("Traceback", exc_info=True)
        return exc.exit_code
    except CompDiffError as exc:
        LOGGER.error("%s", exc)
        LOGGER.debug("Traceback", exc_info=True)
        return exc.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
