#!/usr/bin/env python3
"""Slow check: the reproduction driver writes its artifacts deterministically and the sampler orderings hold."""

from __future__ import annotations

import argparse
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from parsers.experiment_config import build_schedule, resolve_models, resolve_tree
from parsers.presets import load_preset
from services.experiments import FULL_ORDERINGS, METHOD_ORDER, REVERSE_EQUAL_STEPS, equal_steps_T, reproduce
from services.reporting import read_json

HMC_ORDERINGS = ("HMC < MALA", "HMC < reverse-equal-steps")


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Verify the reproduction driver.")
    parser.add_argument("--quick", action="store_true", help="Fewer seeds and samples; enforce only the HMC orderings; skip mixture2d")
    return parser.parse_args()


def _run(preset: str, out_dir: Path, seeds: list[int], n: int, resolution: int, methods: list[str] | None = None):
    config = load_preset(preset)
    schedule = build_schedule(config)
    tree = resolve_tree(config, resolve_models(config, schedule))
    chosen = {k: v for k, v in config.methods.items() if methods is None or k in methods}
    return reproduce(
        name=config.name,
        tree=tree,
        s=schedule,
        methods=chosen,
        rebuild_tree=lambda s: resolve_tree(config, resolve_models(config, s)),
        out_dir=out_dir,
        seeds=seeds,
        n_samples=n,
        bounds=config.metrics.bounds,
        resolution=resolution,
        gmm_components=config.metrics.gmm_components,
        mode_centers=[list(c) for c in config.metrics.mode_centers] if config.metrics.mode_centers else None,
        threads=1,
        pilot_chains=config.metrics.pilot_chains,
    ), config


def check_product(workdir: Path, seeds: list[int], n: int, resolution: int, all_orderings: bool) -> list[str]:
    errors: list[str] = []
    out = workdir / "product2d"
    result, config = _run("product2d", out, seeds, n, resolution)
    table = result.table()
    if len(table) != len(seeds) * len(METHOD_ORDER):
        errors.append(f"metrics table has {len(table)} rows for {len(seeds)} seeds")
    if set(table["method"]) != set(METHOD_ORDER):
        errors.append(f"methods in the table: {sorted(set(table['method']))}")
    for path in ("metrics.csv", "summary.json", "samples.svg", f"samples/hmc_seed{seeds[0]}.csv"):
        if not (out / path).exists():
            errors.append(f"missing output {path}")

    budget = equal_steps_T(build_schedule(config), config.methods["hmc"]) * n
    equal_rows = table[table["method"] == REVERSE_EQUAL_STEPS]
    if not (equal_rows["score_evals"] == budget).all():
        errors.append(f"equal-steps baseline used {equal_rows['score_evals'].tolist()} evals, budget {budget}")
    if not (table[table["method"] == "ground_truth"]["score_evals"] == 0).all():
        errors.append("ground truth rows should carry no score evaluations")

    medians = result.medians()
    if not medians["hmc"] < medians["reverse"]:
        errors.append(f"median MMD: hmc {medians['hmc']:.5f} not below reverse {medians['reverse']:.5f}")
    summary = read_json(out / "summary.json")
    if summary["preset"] != "product2d" or summary["failed"] != result.failed():
        errors.append("summary.json disagrees with the in-memory result")
    checks = {check["name"]: check["passed"] for check in result.checks}
    for ordering in FULL_ORDERINGS:
        if checks.get(ordering.name) is None:
            errors.append(f"ordering '{ordering.name}' was not evaluated")
    required = result.failed() if all_orderings else [name for name in HMC_ORDERINGS if checks.get(name) is False]
    if required:
        errors.append(f"failed orderings {required}; medians {medians}")
    return errors


def check_determinism(workdir: Path, resolution: int) -> list[str]:
    first, _ = _run("product2d", workdir / "det_a", [5], 300, resolution, ["reverse", "hmc"])
    second, _ = _run("product2d", workdir / "det_b", [5], 300, resolution, ["reverse", "hmc"])
    errors: list[str] = []
    for name in ("metrics.csv", "samples/hmc_seed5.csv", "samples.svg"):
        if (workdir / "det_a" / name).read_bytes() != (workdir / "det_b" / name).read_bytes():
            errors.append(f"{name} differs between identical runs")
    if first.medians() != second.medians():
        errors.append("medians differ between identical runs")
    return errors


def check_mixture(workdir: Path, n: int, resolution: int) -> list[str]:
    errors: list[str] = []
    result, _ = _run("mixture2d", workdir / "mixture2d", [0], n, resolution, ["reverse", "hmc"])
    identity = [c for c in result.checks if c["name"] == "mixture score identity"]
    if not identity or identity[0]["passed"] is not True:
        errors.append(f"mixture identity check: {identity}")
    if "min_mode_share" not in result.table().columns:
        errors.append("mixture2d rows should report min_mode_share")
    coverage = [c for c in result.checks if c["name"].startswith("HMC covers every mode")]
    if not coverage or coverage[0]["passed"] is not True:
        errors.append(f"mode coverage check: {coverage}")
    ordering = [c for c in result.checks if c["name"] == "HMC < reverse"]
    if not ordering or ordering[0]["passed"] is not True:
        errors.append(f"mixture2d ordering: {ordering}; medians {result.medians()}")
    return errors


def main() -> int:
    args = parse_args()
    seeds = [0, 1] if args.quick else [0, 1, 2]
    n = 1000 if args.quick else 3000
    resolution = 256 if args.quick else 512
    failures: list[str] = []
    with tempfile.TemporaryDirectory() as tmp:
        workdir = Path(tmp)
        checks = {
            "product2d": lambda: check_product(workdir, seeds, n, resolution, all_orderings=not args.quick),
            "determinism": lambda: check_determinism(workdir, resolution),
        }
        if not args.quick:
            checks["mixture2d"] = lambda: check_mixture(workdir, n, resolution)
        for name, check in checks.items():
            try:
                failures.extend(f"{name}: {err}" for err in check())
            except Exception as exc:  # pylint: disable=broad-except
                failures.append(f"{name}: raised {type(exc).__name__}: {exc}")

    if failures:
        print("Reproduce check FAILED")
        for err in failures:
            print(f"- {err}")
        return 1
    print("Reproduce check PASSED")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
