from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Any

from services.errors import ConfigError
from services.samplers import SamplerConfig, SamplerKind, annealed_mcmc
from services.schedule import NoiseSchedule

LOGGER = logging.getLogger("tuning")

TARGET_RATES = {SamplerKind.MALA: 0.6, SamplerKind.HMC_PMR: 0.7, SamplerKind.HMC: 0.7}
# Unadjusted kinds borrow the step of their adjusted counterpart.
ADJUSTED_FOR = {SamplerKind.ULA: SamplerKind.MALA, SamplerKind.UHMC: SamplerKind.HMC}
ACCEPT_TOLERANCE = 0.10
SEARCH_TOLERANCE = 0.03
MAX_ITERATIONS = 20
PILOT_SEED_OFFSET = 7919


@dataclass(frozen=True)
class TuneResult:
    scale: float
    rate: float
    converged: bool
    iterations: int


def _pilot_rate(tree: Any, s: NoiseSchedule, cfg: SamplerConfig, scale: float, chains: int, seed: int) -> float:
    pilot = replace(cfg, step_scale=scale, record_energy=False)
    _, stats = annealed_mcmc(tree, s, pilot, chains, seed=seed)
    return stats.mean_acceptance()


def tune_step_sizes(
    tree: Any,
    s: NoiseSchedule,
    kind: SamplerKind | str,
    target_rate: float | None = None,
    pilot_chains: int = 256,
    seed: int = 0,
    base: SamplerConfig | None = None,
    bracket: tuple[float, float] = (1e-4, 1e2),
) -> TuneResult:
    """Bisect log(step_scale) on pilot runs until the mean acceptance over levels hits the target.

    Acceptance falls as the step grows, so a rate above target moves the lower edge up.
    """
    kind = SamplerKind.parse(kind) if isinstance(kind, str) else kind
    if kind not in TARGET_RATES:
        raise ConfigError(f"step tuning needs an adjusted kind (MALA, HMC, HMC_PMR), got {kind.value}")
    target = TARGET_RATES[kind] if target_rate is None else float(target_rate)
    lo, hi = (float(bracket[0]), float(bracket[1]))
    if not 0.0 < lo < hi:
        raise ConfigError(f"Invalid tuning bracket {bracket}: need 0 < lo < hi")
    cfg = replace(base or SamplerConfig(kind=kind), kind=kind)
    pilot_seed = seed + PILOT_SEED_OFFSET

    best_scale, best_rate = lo, _pilot_rate(tree, s, cfg, lo, pilot_chains, pilot_seed)
    if best_rate < target:
        # Even the smallest step is rejected too often.
        LOGGER.warning("Tuner: rate %.3f at the lower bracket edge %.3g is below target %.2f", best_rate, lo, target)
        return TuneResult(scale=lo, rate=best_rate, converged=abs(best_rate - target) <= ACCEPT_TOLERANCE, iterations=1)

    iterations = 1
    for iterations in range(2, MAX_ITERATIONS + 2):
        mid = math.sqrt(lo * hi)
        rate = _pilot_rate(tree, s, cfg, mid, pilot_chains, pilot_seed)
        LOGGER.debug("Tuner kind=%s scale=%.4g rate=%.3f", kind.value, mid, rate)
        if abs(rate - target) < abs(best_rate - target):
            best_scale, best_rate = mid, rate
        if abs(rate - target) <= SEARCH_TOLERANCE:
            break
        if rate > target:
            lo = mid
        else:
            hi = mid

    converged = abs(best_rate - target) <= ACCEPT_TOLERANCE
    if not converged:
        LOGGER.warning(
            "Tuner did not reach target kind=%s target=%.2f best_rate=%.3f scale=%.4g",
            kind.value,
            target,
            best_rate,
            best_scale,
        )
    else:
        LOGGER.info("Tuned kind=%s scale=%.4g rate=%.3f", kind.value, best_scale, best_rate)
    return TuneResult(scale=best_scale, rate=best_rate, converged=converged, iterations=iterations)


def tune_config(tree: Any, s: NoiseSchedule, cfg: SamplerConfig, pilot_chains: int = 256) -> tuple[SamplerConfig, TuneResult | None]:
    """Return cfg with a tuned step_scale, or cfg unchanged when steps are pinned (autotune off)."""
    if not cfg.autotune or cfg.kind is SamplerKind.REVERSE:
        return cfg, None
    adjusted = ADJUSTED_FOR.get(cfg.kind, cfg.kind)
    result = tune_step_sizes(
        tree,
        s,
        adjusted,
        pilot_chains=pilot_chains,
        seed=cfg.seed,
        base=replace(cfg, kind=adjusted, autotune=False),
    )
    return replace(cfg, step_scale=result.scale), result
