"""Multi-method, multi-seed experiment runs behind `cli.py eval` and `cli.py reproduce`."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pandas as pd

from services.analytic import AnalyticModel
from services.batch import SampleBatch
from services.compose import CompositionTree, NodeKind, composed_energy
from services.errors import ConfigError, MetricUnreliable
from services.grid import GridOracle, build_grid_oracle
from services.metrics import MetricsReport, evaluate_samples, mode_coverage
from services.reporting import plot_panels, write_json, write_samples_csv, write_table_csv
from services.samplers import ChainStats, SamplerConfig, SamplerKind, annealed_mcmc
from services.schedule import NoiseSchedule
from services.tuning import tune_config
from services.verification import ground_truth_samples, verify_mixture_identity

LOGGER = logging.getLogger("experiments")

GROUND_TRUTH = "ground_truth"
REVERSE_EQUAL_STEPS = "reverse_equal_steps"
METHOD_ORDER = ("ground_truth", "reverse", "reverse_equal_steps", "ula", "mala", "uhmc", "hmc")
PLOT_METHODS = ("ground_truth", "reverse", "mala", "hmc")
CALIBRATION_SEED_OFFSET = 10_000
MIN_MODE_SHARE = 0.05


def likelihood_oracle(tree: CompositionTree, bounds, resolution: int) -> GridOracle:
    """Grid of the composed level-1 energy, normaliser for the LL metric."""
    return build_grid_oracle(lambda x: composed_energy(tree, x, 1), bounds, resolution)


def equal_steps_T(s: NoiseSchedule, cfg: SamplerConfig) -> int:
    """Reverse-diffusion length matching the score-evaluation budget of an MCMC config."""
    return int(round(s.T * (1 + cfg.steps_per_t * cfg.leapfrog_count)))


def run_sampler(
    tree: CompositionTree,
    s: NoiseSchedule,
    cfg: SamplerConfig,
    n: int,
    seed: int,
    threads: int | None = 1,
    pilot_chains: int = 256,
) -> tuple[SampleBatch, ChainStats]:
    tuned, result = tune_config(tree, s, replace(cfg, seed=seed), pilot_chains)
    batch, stats = annealed_mcmc(tree, s, tuned, n, seed=seed, threads=threads)
    if result is not None:
        stats.tuned_scale = result.scale
        if not result.converged:
            stats.tuner_warning = f"acceptance {result.rate:.3f} did not reach the target"
    return batch, stats


def safe_evaluate(
    batch: SampleBatch,
    reference: SampleBatch,
    tree: CompositionTree,
    oracle: GridOracle | None,
    k: int | None,
    seed: int,
    metadata: dict[str, Any],
) -> MetricsReport:
    """evaluate_samples, downgrading a collapsed Var fit to a missing value."""
    try:
        return evaluate_samples(batch, reference, tree, oracle, k, seed, metadata)
    except MetricUnreliable as exc:
        LOGGER.warning("Var metric unavailable method=%s: %s", metadata.get("method"), exc)
        report = evaluate_samples(batch, reference, tree, oracle, None, seed, metadata)
        report.metadata["var_error"] = str(exc)
        return report


@dataclass(frozen=True)
class Ordering:
    name: str
    lhs: str
    rhs: str
    strict: bool = True

    def holds(self, medians: dict[str, float]) -> bool | None:
        if self.lhs not in medians or self.rhs not in medians:
            return None
        a, b = medians[self.lhs], medians[self.rhs]
        return bool(a < b) if self.strict else bool(a <= b)


FULL_ORDERINGS = (
    Ordering("HMC < MALA", "hmc", "mala"),
    Ordering("MALA <= U-HMC", "mala", "uhmc", strict=False),
    Ordering("MALA <= ULA", "mala", "ula", strict=False),
    Ordering("U-HMC < reverse", "uhmc", "reverse"),
    Ordering("ULA < reverse", "ula", "reverse"),
    Ordering("HMC < reverse-equal-steps", "hmc", "reverse_equal_steps"),
)

PRESET_ORDERINGS: dict[str, tuple[Ordering, ...]] = {
    "product2d": FULL_ORDERINGS,
    "mixture2d": FULL_ORDERINGS + (Ordering("HMC < reverse", "hmc", "reverse"),),
    "equal-steps-baseline": (
        Ordering("HMC < reverse-equal-steps", "hmc", "reverse_equal_steps"),
        Ordering("HMC < reverse", "hmc", "reverse"),
    ),
    "guidance2d": (Ordering("HMC < reverse", "hmc", "reverse"),),
    "negation2d": (Ordering("HMC < reverse", "hmc", "reverse"),),
}


@dataclass
class ReproduceResult:
    name: str
    rows: list[dict[str, Any]] = field(default_factory=list)
    checks: list[dict[str, Any]] = field(default_factory=list)
    extras: dict[str, Any] = field(default_factory=dict)

    def table(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)

    def medians(self) -> dict[str, float]:
        frame = self.table()
        if frame.empty:
            return {}
        return {str(k): float(v) for k, v in frame.groupby("method", sort=False)["mmd"].median().items()}

    def failed(self) -> list[str]:
        return [c["name"] for c in self.checks if c["passed"] is False]

    def summary(self) -> dict[str, Any]:
        return {
            "preset": self.name,
            "median_mmd": self.medians(),
            "checks": self.checks,
            "failed": self.failed(),
            **self.extras,
        }


def _row(method: str, seed: int, report: MetricsReport, stats: ChainStats | None) -> dict[str, Any]:
    return {
        "method": method,
        "seed": seed,
        "mmd": report.mmd,
        "ll": report.ll,
        "ll_out_of_bounds": report.ll_out_of_bounds,
        "var_l2": report.var_l2,
        "score_evals": stats.score_evals if stats else 0,
        "total_evals": stats.total_evals if stats else 0,
        "mean_acceptance": stats.mean_acceptance() if stats else float("nan"),
    }


def _all_analytic(tree: CompositionTree) -> bool:
    return all(isinstance(node.model, AnalyticModel) for node in tree.leaves())


def reproduce(
    name: str,
    tree: CompositionTree,
    s: NoiseSchedule,
    methods: dict[str, SamplerConfig],
    rebuild_tree: Callable[[NoiseSchedule], CompositionTree],
    out_dir: Path,
    seeds: list[int],
    n_samples: int,
    bounds,
    resolution: int,
    gmm_components: int | None,
    mode_centers: list[list[float]] | None = None,
    threads: int | None = 1,
    pilot_chains: int = 256,
) -> ReproduceResult:
    """Ground truth plus every configured method across seeds; writes tables, samples and plots."""
    if "hmc" not in methods:
        raise ConfigError("reproduce needs an 'hmc' method to size the equal-steps baseline")
    result = ReproduceResult(name=name)
    oracle = likelihood_oracle(tree, bounds, resolution)
    if not oracle.boundary_ok:
        LOGGER.warning("LL oracle for %s has boundary mass %.3g", name, oracle.boundary_mass)

    equal_tree: CompositionTree | None = None
    equal_s: NoiseSchedule | None = None
    if _all_analytic(tree):
        equal_s = s.rescaled(equal_steps_T(s, methods["hmc"]))
        equal_tree = rebuild_tree(equal_s)
    else:
        LOGGER.warning("Skipping %s: neural leaves are tied to their trained T", REVERSE_EQUAL_STEPS)

    plot_sets: dict[str, np.ndarray] = {}
    for seed in seeds:
        reference = ground_truth_samples(tree, n_samples, seed, bounds, resolution)
        batches: dict[str, tuple[SampleBatch, ChainStats | None]] = {
            GROUND_TRUTH: (ground_truth_samples(tree, n_samples, seed + CALIBRATION_SEED_OFFSET, bounds, resolution), None)
        }
        for method, cfg in methods.items():
            batches[method] = run_sampler(tree, s, cfg, n_samples, seed, threads, pilot_chains)
        if equal_tree is not None:
            reverse_cfg = SamplerConfig(kind=SamplerKind.REVERSE, steps_per_t=0)
            batches[REVERSE_EQUAL_STEPS] = annealed_mcmc(equal_tree, equal_s, reverse_cfg, n_samples, seed=seed, threads=threads)

        for method in sorted(batches, key=lambda m: METHOD_ORDER.index(m) if m in METHOD_ORDER else len(METHOD_ORDER)):
            batch, stats = batches[method]
            metadata = {"method": method, "seed": seed, "tree": tree.describe(), "preset": name}
            report = safe_evaluate(batch, reference, tree, oracle, gmm_components, seed, metadata)
            row = _row(method, seed, report, stats)
            if mode_centers is not None:
                shares = mode_coverage(batch, np.asarray(mode_centers))
                row["min_mode_share"] = float(min(shares))
            result.rows.append(row)
            write_samples_csv(batch, out_dir / "samples" / f"{method}_seed{seed}.csv")
            if seed == seeds[0] and method in PLOT_METHODS:
                plot_sets[method] = batch.points
            LOGGER.info("Evaluated preset=%s method=%s seed=%s mmd=%.5f", name, method, seed, report.mmd)

    panels = [(method.replace("_", " "), plot_sets[method]) for method in PLOT_METHODS if method in plot_sets]
    if panels:
        plot_panels(panels, out_dir / "samples.svg", bounds)

    medians = result.medians()
    for ordering in PRESET_ORDERINGS.get(name, FULL_ORDERINGS):
        passed = ordering.holds(medians)
        result.checks.append({"name": ordering.name, "passed": passed})
    if mode_centers is not None:
        hmc_rows = [r for r in result.rows if r["method"] == "hmc"]
        covered = bool(hmc_rows) and min(r["min_mode_share"] for r in hmc_rows) >= MIN_MODE_SHARE
        result.checks.append({"name": f"HMC covers every mode with >= {MIN_MODE_SHARE:.0%}", "passed": covered})
    if tree.kind is NodeKind.MIXTURE and _all_analytic(tree):
        models = [c.model for c in tree.children if c.kind is NodeKind.LEAF]
        if len(models) == len(tree.children):
            record = verify_mixture_identity(models, list(tree.weights), s, seed=seeds[0])
            result.extras["mixture_identity"] = record.to_dict()
            result.checks.append({"name": "mixture score identity", "passed": record.verdict == "EQUALITY_HOLDS"})

    write_table_csv(result.table(), out_dir / "metrics.csv")
    write_json(result.summary(), out_dir / "summary.json")
    for name_failed in result.failed():
        LOGGER.warning("Ordering failed preset=%s check=%s", name, name_failed)
    return result
