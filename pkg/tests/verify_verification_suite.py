#!/usr/bin/env python3
"""Verify identity and gap verdicts of the default suite and ground-truth provenance."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from services.analytic import AnalyticModel, make_mixture_pair, make_product_box, make_ring_gmm, make_tempering_gmm
from services.compose import mixture, product
from services.schedule import build_linear
from services.verification import (
    EQUALITY_HOLDS,
    GAP_CONFIRMED,
    GAP_FLOOR,
    GAP_NOT_FOUND,
    ground_truth_samples,
    relative_gap,
    run_default_suite,
    verify_tempering_gap,
)

EXPECTED = {
    "mixture_identity": EQUALITY_HOLDS,
    "guidance_identity": EQUALITY_HOLDS,
    "product_gap": GAP_CONFIRMED,
    "tempering_gap": GAP_CONFIRMED,
    "annealed_guidance_gap": GAP_CONFIRMED,
}


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Verify the identity/gap verification suite.")
    parser.add_argument("--quick", action="store_true", help="One seed, fewer probes, coarser grid")
    return parser.parse_args()


def check_suite(seeds: list[int], probes: int, resolution: int) -> list[str]:
    errors: list[str] = []
    s = build_linear(100)
    for seed in seeds:
        report = run_default_suite(s, seed, probes, resolution)
        verdicts = report.verdicts()
        if verdicts != EXPECTED:
            errors.append(f"seed {seed}: verdicts {verdicts}")
        payload = report.to_dict()
        if payload["seed"] != seed or [c["claim"] for c in payload["claims"]] != list(EXPECTED):
            errors.append(f"seed {seed}: report payload lists {[c['claim'] for c in payload['claims']]}")
        table = report.relative_gap_table()
        if list(table.columns) != ["claim", "t", "probe", "x0", "x1", "relative_gap", "gap_floor"]:
            errors.append(f"gap table columns are {list(table.columns)}")
        expected_rows = 2 * 4 * probes + 3 * 2 * probes
        if len(table) != expected_rows:
            errors.append(f"gap table has {len(table)} rows, expected {expected_rows}")
        if (table["relative_gap"] < 0).any():
            errors.append("relative gaps must be non-negative")
        if not (table["gap_floor"] == GAP_FLOOR).all():
            errors.append("gap table should record the denominator floor on every row")
    again = run_default_suite(s, seeds[0], probes, resolution)
    if again.to_dict() != run_default_suite(s, seeds[0], probes, resolution).to_dict():
        errors.append("suite is not deterministic for a fixed seed")
    return errors


def check_tempering_identity(probes: int) -> list[str]:
    errors: list[str] = []
    s = build_linear(100)
    pair = AnalyticModel(base=make_tempering_gmm(), schedule=s, name="pair")
    record = verify_tempering_gap(pair, 1.0, s, probes, seed=0)
    if record.verdict != GAP_NOT_FOUND:
        errors.append(f"lambda=1 should find no gap, got {record.verdict}")
    for key in ("median_relative_gap_mid", "median_relative_gap_low", "fraction_above_threshold_mid"):
        if record.discrepancy[key] != 0.0:
            errors.append(f"lambda=1 {key}={record.discrepancy[key]}")
    return errors


def check_relative_gap() -> list[str]:
    errors: list[str] = []
    truth = np.array([[0.0, 0.0], [3.0, 4.0]])
    candidate = np.array([[0.3, 0.4], [3.0, 4.5]])
    gaps = relative_gap(candidate, truth)
    if not np.allclose(gaps, [0.5, 0.1]):
        errors.append(f"relative_gap gave {gaps.tolist()}, expected [0.5, 0.1]")
    # Short true scores fall back to an absolute gap; a smaller floor makes the same pair relative again.
    short = np.array([[0.02, 0.0]])
    if not np.allclose(relative_gap(short + [0.01, 0.0], short), [0.01]):
        errors.append("gap below the floor should be absolute")
    if not np.allclose(relative_gap(short + [0.01, 0.0], short, floor=1e-6), [0.5]):
        errors.append("a small floor should give the relative gap")
    return errors


def check_ground_truth(resolution: int) -> list[str]:
    errors: list[str] = []
    s = build_linear(100)
    left, right = make_mixture_pair()
    mix = mixture([AnalyticModel(left, s, name="left"), AnalyticModel(right, s, name="right")], [0.5, 0.5])
    exact = ground_truth_samples(mix, 500, seed=3)
    if exact.provenance["source"] != "exact" or exact.n != 500:
        errors.append(f"mixture ground truth provenance {exact.provenance}")
    if not np.array_equal(exact.points, ground_truth_samples(mix, 500, seed=3).points):
        errors.append("exact ground truth is not deterministic")
    right_share = float(np.mean(exact.points[:, 0] > 0.0))
    if abs(right_share - 0.5) > 0.1:
        errors.append(f"mixture ground truth puts {right_share:.2f} on the right")

    tree = product(AnalyticModel(make_ring_gmm(), s, name="ring"), AnalyticModel(make_product_box(), s, name="box"))
    gridded = ground_truth_samples(tree, 500, seed=3, resolution=resolution)
    if gridded.provenance["source"] != "grid" or "boundary_mass" not in gridded.provenance:
        errors.append(f"product ground truth provenance {gridded.provenance}")
    if np.any(np.abs(gridded.points[:, 0]) > 0.1 + 1e-12) or np.any(np.abs(gridded.points[:, 1]) > 1.0 + 1e-12):
        errors.append("grid ground truth left the box support")
    return errors


def main() -> int:
    args = parse_args()
    seeds = [0] if args.quick else [0, 1, 2]
    probes = 100 if args.quick else 400
    resolution = 256 if args.quick else 512
    checks = {
        "suite": lambda: check_suite(seeds, probes, resolution),
        "tempering identity": lambda: check_tempering_identity(probes),
        "relative gap": check_relative_gap,
        "ground truth": lambda: check_ground_truth(resolution),
    }
    failures: list[str] = []
    for name, check in checks.items():
        try:
            failures.extend(f"{name}: {err}" for err in check())
        except Exception as exc:  # pylint: disable=broad-except
            failures.append(f"{name}: raised {type(exc).__name__}: {exc}")

    if failures:
        print("Verification suite check FAILED")
        for err in failures:
            print(f"- {err}")
        return 1
    print("Verification suite check PASSED")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
