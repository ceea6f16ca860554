"""Ancestral sampling and annealed MCMC over composition trees.

The annealed driver walks the levels T..1. At each level it optionally takes one
reverse-diffusion step into the level, then runs N transitions of the chosen kernel
against the composed target at that level. With N=0 and the reverse step enabled the
driver performs exactly the ancestral sampler's arithmetic and random draws.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Any, Callable

import numpy as np

from services.batch import SampleBatch, config_hash
from services.compose import CompositionTree, as_tree, require_energy
from services.errors import ConfigError, NumericAbort, to_float, to_int
from services.rng import check_seed, run_blocks, stream
from services.schedule import NoiseSchedule

LOGGER = logging.getLogger("samplers")

ENERGY_FLOOR = -1e12

ScoreFn = Callable[[np.ndarray], np.ndarray]
EnergyFn = Callable[[np.ndarray], np.ndarray]
EvalFn = Callable[[np.ndarray], tuple[np.ndarray | None, np.ndarray]]


class SamplerKind(str, Enum):
    REVERSE = "REVERSE"
    ULA = "ULA"
    MALA = "MALA"
    UHMC = "UHMC"
    HMC = "HMC"
    HMC_PMR = "HMC_PMR"

    @classmethod
    def parse(cls, value: Any) -> "SamplerKind":
        try:
            return cls(str(value).strip().upper().replace("-", "_"))
        except ValueError as exc:
            raise ConfigError(f"Unknown sampler kind '{value}'") from exc

    @property
    def adjusted(self) -> bool:
        return self in (SamplerKind.MALA, SamplerKind.HMC, SamplerKind.HMC_PMR)

    @property
    def hamiltonian(self) -> bool:
        return self in (SamplerKind.UHMC, SamplerKind.HMC, SamplerKind.HMC_PMR)


STEP_CONVENTIONS = ("sigma", "drift")


@dataclass(frozen=True)
class SamplerConfig:
    """Kernel choice and per-level step sizes.

    Level t uses step = step_scale * beta_t ** step_exponent and mass
    mass_scale * beta_t ** mass_exponent. For Langevin kinds, step_convention "sigma"
    reads the step as the noise scale (drift step^2/2) and "drift" reads it as the drift
    coefficient (noise sqrt(2 step)). Hamiltonian kinds use the step as the leapfrog size.
    Only HMC_PMR reads damping; UHMC and HMC draw fresh momentum every step.
    """

    kind: SamplerKind = SamplerKind.HMC_PMR
    steps_per_t: int = 3
    leapfrog_steps: int = 3
    step_scale: float = 1.0
    step_exponent: float = 1.0
    mass_scale: float = 1.0
    mass_exponent: float = 0.0
    damping: float = 0.9
    init_with_reverse_step: bool = True
    clip_intermediate: bool = False
    clip_value: float = 2.0
    step_convention: str = "sigma"
    autotune: bool = False
    record_energy: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if not isinstance(self.kind, SamplerKind):
            object.__setattr__(self, "kind", SamplerKind.parse(self.kind))
        steps = to_int(self.steps_per_t, "steps_per_t")
        if steps < 0:
            raise ConfigError(f"Invalid steps_per_t={steps}: must be >= 0")
        if self.kind.hamiltonian and to_int(self.leapfrog_steps, "leapfrog_steps") < 1:
            raise ConfigError(f"Invalid leapfrog_steps={self.leapfrog_steps}: HMC kinds need at least 1")
        if to_float(self.step_scale, "step_scale") <= 0.0:
            raise ConfigError(f"Invalid step_scale={self.step_scale}: must be positive")
        if to_float(self.mass_scale, "mass_scale") <= 0.0:
            raise ConfigError(f"Invalid mass_scale={self.mass_scale}: must be positive")
        to_float(self.step_exponent, "step_exponent")
        to_float(self.mass_exponent, "mass_exponent")
        damping = to_float(self.damping, "damping")
        if not 0.0 <= damping <= 1.0:
            raise ConfigError(f"Invalid damping={damping}: must lie in [0, 1]")
        if self.step_convention not in STEP_CONVENTIONS:
            raise ConfigError(f"Invalid step_convention '{self.step_convention}': expected one of {STEP_CONVENTIONS}")
        if to_float(self.clip_value, "clip_value") <= 0.0:
            raise ConfigError(f"Invalid clip_value={self.clip_value}: must be positive")
        check_seed(self.seed)

    @property
    def leapfrog_count(self) -> int:
        return self.leapfrog_steps if self.kind.hamiltonian else 1

    def step_sizes(self, s: NoiseSchedule) -> np.ndarray:
        return self.step_scale * s.betas**self.step_exponent

    def masses(self, s: NoiseSchedule) -> np.ndarray:
        return self.mass_scale * s.betas**self.mass_exponent

    def to_dict(self) -> dict[str, Any]:
        payload = asdict(self)
        payload["kind"] = self.kind.value
        return payload

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "SamplerConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ConfigError(f"Unknown sampler fields: {', '.join(unknown)}")
        return cls(**payload)


@dataclass
class ChainStats:
    T: int
    acceptance: list[float]
    step_sizes: list[float]
    masses: list[float]
    score_evals: int
    entry_evals: int
    energy_trace: list[float] | None = None
    tuned_scale: float | None = None
    tuner_warning: str | None = None

    @property
    def total_evals(self) -> int:
        return self.score_evals + self.entry_evals

    def mean_acceptance(self) -> float:
        return float(np.mean(self.acceptance)) if self.acceptance else 1.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "T": self.T,
            "acceptance": self.acceptance,
            "mean_acceptance": self.mean_acceptance(),
            "step_sizes": self.step_sizes,
            "masses": self.masses,
            "score_evals": self.score_evals,
            "entry_evals": self.entry_evals,
            "total_evals": self.total_evals,
            "energy_trace": self.energy_trace,
            "tuned_scale": self.tuned_scale,
            "tuner_warning": self.tuner_warning,
        }


def expected_score_evals(cfg: SamplerConfig, T: int, chains: int) -> int:
    mcmc = 0 if cfg.kind is SamplerKind.REVERSE else cfg.steps_per_t * cfg.leapfrog_count * T * chains
    reverse = T * chains if (cfg.init_with_reverse_step or cfg.kind is SamplerKind.REVERSE) else 0
    return mcmc + reverse


# ---------------------------------------------------------------------------
# Kernels. All are vectorised over chains: x has shape (n, 2).
# ---------------------------------------------------------------------------

def langevin_coeffs(step: float, convention: str = "sigma") -> tuple[float, float]:
    """(drift coefficient, noise scale) of one Langevin move."""
    if convention == "drift":
        return step, math.sqrt(2.0 * step)
    return 0.5 * step * step, step


def _floor_energy(e: np.ndarray) -> np.ndarray:
    e = np.nan_to_num(np.asarray(e, dtype=np.float64), nan=ENERGY_FLOOR, neginf=ENERGY_FLOOR)
    return np.maximum(e, ENERGY_FLOOR)


def _accept(log_ratio: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(log_ratio.shape[0])
    with np.errstate(over="ignore"):
        return np.log(u) < np.nan_to_num(log_ratio, nan=-np.inf)


def ula_step(score_fn: ScoreFn, x: np.ndarray, step: float, rng: np.random.Generator, convention: str = "sigma") -> np.ndarray:
    drift, noise = langevin_coeffs(step, convention)
    return x + drift * score_fn(x) + noise * rng.standard_normal(x.shape)


def _mala_move(eval_fn: EvalFn, x, e_x, s_x, drift, noise, rng):
    mean_fwd = x + drift * s_x
    proposal = mean_fwd + noise * rng.standard_normal(x.shape)
    e_p, s_p = eval_fn(proposal)
    e_p = _floor_energy(e_p)
    mean_rev = proposal + drift * s_p
    log_fwd = -np.sum((proposal - mean_fwd) ** 2, axis=1) / (2.0 * noise * noise)
    log_rev = -np.sum((x - mean_rev) ** 2, axis=1) / (2.0 * noise * noise)
    accepted = _accept(e_p - e_x + log_rev - log_fwd, rng)
    keep = accepted[:, None]
    return (
        np.where(keep, proposal, x),
        np.where(accepted, e_p, e_x),
        np.where(keep, s_p, s_x),
        accepted,
    )


def mala_step(
    energy_fn: EnergyFn,
    score_fn: ScoreFn,
    x: np.ndarray,
    step: float,
    rng: np.random.Generator,
    convention: str = "sigma",
) -> tuple[np.ndarray, np.ndarray]:
    """Langevin proposal with the Metropolis-Hastings correction; returns (x', accepted)."""
    drift, noise = langevin_coeffs(step, convention)
    eval_fn = lambda y: (energy_fn(y), score_fn(y))  # noqa: E731
    x_new, _, _, accepted = _mala_move(eval_fn, x, _floor_energy(energy_fn(x)), score_fn(x), drift, noise, rng)
    return x_new, accepted


def _leapfrog(eval_fn: EvalFn, x, v, step, n_steps, mass, s_x):
    e = None
    s = s_x
    for _ in range(n_steps):
        v = v + 0.5 * step * s
        x = x + step * v / mass
        e, s = eval_fn(x)
        v = v + 0.5 * step * s
    return x, v, e, s


def leapfrog(
    score_fn: ScoreFn, x: np.ndarray, v: np.ndarray, step: float, n_steps: int, mass: float = 1.0
) -> tuple[np.ndarray, np.ndarray]:
    """Half kick, drift, half kick; score = -grad of the potential."""
    eval_fn = lambda y: (None, score_fn(y))  # noqa: E731
    x_new, v_new, _, _ = _leapfrog(eval_fn, x, v, step, n_steps, mass, score_fn(x))
    return x_new, v_new


def _kinetic(v: np.ndarray, mass: float) -> np.ndarray:
    return 0.5 * np.sum(v * v, axis=1) / mass


def _hmc_move(eval_fn: EvalFn, x, e_x, s_x, v, step, n_steps, mass, rng, flip: bool):
    """Leapfrog proposal plus joint-density accept; `flip` applies the persistent-momentum negations."""
    x_p, v_p, e_p, s_p = _leapfrog(eval_fn, x, v, step, n_steps, mass, s_x)
    e_p = _floor_energy(e_p)
    if flip:
        v_p = -v_p
    log_ratio = (e_p - _kinetic(v_p, mass)) - (e_x - _kinetic(v, mass))
    accepted = _accept(log_ratio, rng)
    keep = accepted[:, None]
    x_new = np.where(keep, x_p, x)
    v_new = np.where(keep, v_p, v)
    if flip:
        v_new = -v_new
    return x_new, np.where(accepted, e_p, e_x), np.where(keep, s_p, s_x), v_new, accepted


def hmc_step(
    energy_fn: EnergyFn,
    score_fn: ScoreFn,
    x: np.ndarray,
    step: float,
    n_steps: int,
    mass: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Full momentum refresh, leapfrog, Metropolis accept on the joint density."""
    eval_fn = lambda y: (energy_fn(y), score_fn(y))  # noqa: E731
    v = math.sqrt(mass) * rng.standard_normal(x.shape)
    x_new, _, _, _, accepted = _hmc_move(
        eval_fn, x, _floor_energy(energy_fn(x)), score_fn(x), v, step, n_steps, mass, rng, flip=False
    )
    return x_new, accepted


def refresh_momentum(v: np.ndarray, damping: float, mass: float, rng: np.random.Generator) -> np.ndarray:
    return damping * v + math.sqrt(1.0 - damping * damping) * math.sqrt(mass) * rng.standard_normal(v.shape)


def hmc_pmr_step(
    energy_fn: EnergyFn,
    score_fn: ScoreFn,
    x: np.ndarray,
    v: np.ndarray,
    step: float,
    n_steps: int,
    mass: float,
    damping: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Partial refresh v <- g v + sqrt(1-g^2) xi, leapfrog, negate, accept, negate again."""
    eval_fn = lambda y: (energy_fn(y), score_fn(y))  # noqa: E731
    v = refresh_momentum(v, damping, mass, rng)
    x_new, _, _, v_new, accepted = _hmc_move(
        eval_fn, x, _floor_energy(energy_fn(x)), score_fn(x), v, step, n_steps, mass, rng, flip=True
    )
    return x_new, v_new, accepted


def u_hmc_step(
    score_fn: ScoreFn,
    x: np.ndarray,
    step: float,
    n_steps: int,
    mass: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """hmc_step with every proposal kept: fresh momentum, leapfrog, no accept test."""
    v = math.sqrt(mass) * rng.standard_normal(x.shape)
    x_new, _ = leapfrog(score_fn, x, v, step, n_steps, mass)
    return x_new


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------

def reverse_step(score_fn: ScoreFn, s: NoiseSchedule, x: np.ndarray, t: int, rng: np.random.Generator) -> np.ndarray:
    """x_{t-1} = (x_t + beta_t * score) / sqrt(alpha_t) + reverse noise; noiseless at t=1."""
    beta = s.beta(t)
    mean = (x + beta * score_fn(x)) / math.sqrt(1.0 - beta)
    var = s.reverse_variance(t)
    if t == 1 or var <= 0.0:
        return mean
    return mean + math.sqrt(var) * rng.standard_normal(x.shape)


@dataclass
class _BlockResult:
    points: np.ndarray
    accepted: np.ndarray
    proposals: np.ndarray
    energy_sum: np.ndarray
    score_evals: int = 0
    entry_evals: int = 0


class _CountingTarget:
    def __init__(self, tree: CompositionTree, t: int, with_energy: bool) -> None:
        self.tree = tree
        self.t = t
        self.with_energy = with_energy
        self.calls = 0

    def __call__(self, x: np.ndarray) -> tuple[np.ndarray | None, np.ndarray]:
        self.calls += x.shape[0]
        if self.with_energy:
            return self.tree.energy_and_score(x, self.t)
        return None, self.tree.score(x, self.t)


def _check_finite(x: np.ndarray, t: int, offset: int) -> None:
    bad = ~np.all(np.isfinite(x), axis=1)
    if np.any(bad):
        chain = offset + int(np.argmax(bad))
        raise NumericAbort(
            f"non-finite sampler state at t={t} chain={chain}",
            {"t": t, "chain": chain, "n_bad": int(bad.sum())},
        )


def _run_block(
    tree: CompositionTree,
    s: NoiseSchedule,
    cfg: SamplerConfig,
    n: int,
    rng: np.random.Generator,
    offset: int,
) -> _BlockResult:
    T = s.T
    kind = cfg.kind
    n_steps = 0 if kind is SamplerKind.REVERSE else cfg.steps_per_t
    reverse_init = cfg.init_with_reverse_step or kind is SamplerKind.REVERSE
    needs_energy = kind.adjusted
    record_energy = cfg.record_energy and tree.has_energy
    steps = cfg.step_sizes(s)
    masses = cfg.masses(s)
    result = _BlockResult(
        points=np.zeros((0, 2)),
        accepted=np.zeros(T),
        proposals=np.zeros(T),
        energy_sum=np.zeros(T),
    )

    x = rng.standard_normal((n, 2))
    for t in range(T, 0, -1):
        if reverse_init and t < T:
            x = reverse_step(lambda y, lvl=t + 1: tree.score(y, lvl), s, x, t + 1, rng)
            result.score_evals += n
            _check_finite(x, t + 1, offset)
        if n_steps > 0:
            x = _run_level(tree, cfg, x, t, float(steps[t - 1]), float(masses[t - 1]), n_steps, needs_energy, rng, result)
            _check_finite(x, t, offset)
        if cfg.clip_intermediate:
            x = np.clip(x, -cfg.clip_value, cfg.clip_value)
        if record_energy:
            result.energy_sum[t - 1] = float(np.sum(_floor_energy(tree.energy(x, t))))
    if reverse_init:
        x = reverse_step(lambda y: tree.score(y, 1), s, x, 1, rng)
        result.score_evals += n
        _check_finite(x, 0, offset)
    result.points = x
    return result


def _run_level(
    tree: CompositionTree,
    cfg: SamplerConfig,
    x: np.ndarray,
    t: int,
    step: float,
    mass: float,
    n_steps: int,
    needs_energy: bool,
    rng: np.random.Generator,
    result: _BlockResult,
) -> np.ndarray:
    kind = cfg.kind
    target = _CountingTarget(tree, t, with_energy=needs_energy)
    e_x, s_x = target(x)
    result.entry_evals += target.calls
    target.calls = 0
    if e_x is not None:
        e_x = _floor_energy(e_x)
    n = x.shape[0]
    # HMC_PMR momentum is drawn at level entry and persists across the level's steps.
    v = math.sqrt(mass) * rng.standard_normal(x.shape) if kind is SamplerKind.HMC_PMR else None

    for _ in range(n_steps):
        if kind is SamplerKind.ULA:
            drift, noise = langevin_coeffs(step, cfg.step_convention)
            x = x + drift * s_x + noise * rng.standard_normal(x.shape)
            _, s_x = target(x)
            accepted = np.ones(n, dtype=bool)
        elif kind is SamplerKind.MALA:
            drift, noise = langevin_coeffs(step, cfg.step_convention)
            x, e_x, s_x, accepted = _mala_move(target, x, e_x, s_x, drift, noise, rng)
        elif kind is SamplerKind.UHMC:
            v_full = math.sqrt(mass) * rng.standard_normal(x.shape)
            x, _, _, s_x = _leapfrog(target, x, v_full, step, cfg.leapfrog_steps, mass, s_x)
            accepted = np.ones(n, dtype=bool)
        elif kind is SamplerKind.HMC:
            v_full = math.sqrt(mass) * rng.standard_normal(x.shape)
            x, e_x, s_x, _, accepted = _hmc_move(
                target, x, e_x, s_x, v_full, step, cfg.leapfrog_steps, mass, rng, flip=False
            )
        else:
            v = refresh_momentum(v, cfg.damping, mass, rng)
            x, e_x, s_x, v, accepted = _hmc_move(
                target, x, e_x, s_x, v, step, cfg.leapfrog_steps, mass, rng, flip=True
            )
        result.accepted[t - 1] += float(np.sum(accepted))
        result.proposals[t - 1] += n
    result.score_evals += target.calls
    return x


def annealed_mcmc(
    tree: Any,
    s: NoiseSchedule,
    cfg: SamplerConfig,
    n: int,
    seed: int | None = None,
    threads: int | None = 1,
) -> tuple[SampleBatch, ChainStats]:
    """Annealed MCMC over levels T..1; capability checks run before any compute."""
    tree = as_tree(tree)
    seed = cfg.seed if seed is None else check_seed(seed)
    n = to_int(n, "n")
    if n < 0:
        raise ConfigError(f"Invalid n={n}: must be >= 0")
    if cfg.kind.adjusted:
        require_energy(tree, f"{cfg.kind.value} sampling")
    if tree.schedule.T != s.T or not np.array_equal(tree.schedule.betas, s.betas):
        raise ConfigError(f"sampler schedule (T={s.T}) differs from the schedule of '{tree.describe()}'")

    LOGGER.info(
        "Starting sample kind=%s tree=%s chains=%s T=%s steps_per_t=%s seed=%s",
        cfg.kind.value,
        tree.describe(),
        n,
        s.T,
        cfg.steps_per_t,
        seed,
    )

    def worker(block: int, start: int, stop: int) -> _BlockResult:
        return _run_block(tree, s, cfg, stop - start, stream(seed, block), start)

    blocks = run_blocks(n, worker, threads)
    T = s.T
    accepted = np.zeros(T)
    proposals = np.zeros(T)
    energy_sum = np.zeros(T)
    score_evals = entry_evals = 0
    for block in blocks:
        accepted += block.accepted
        proposals += block.proposals
        energy_sum += block.energy_sum
        score_evals += block.score_evals
        entry_evals += block.entry_evals
    points = np.concatenate([b.points for b in blocks]) if blocks else np.zeros((0, 2))

    with np.errstate(invalid="ignore", divide="ignore"):
        acceptance = np.where(proposals > 0, accepted / np.maximum(proposals, 1), 1.0)
    stats = ChainStats(
        T=T,
        acceptance=acceptance.tolist(),
        step_sizes=cfg.step_sizes(s).tolist(),
        masses=cfg.masses(s).tolist(),
        score_evals=int(score_evals),
        entry_evals=int(entry_evals),
        energy_trace=(energy_sum / max(n, 1)).tolist() if (cfg.record_energy and tree.has_energy) else None,
    )
    batch = SampleBatch(
        points=points,
        provenance={
            "tree": tree.describe(),
            "sampler": cfg.kind.value,
            "sampler_hash": config_hash(cfg.to_dict()),
            "seed": int(seed),
        },
    )
    LOGGER.info(
        "Finished sample kind=%s mean_acceptance=%.3f score_evals=%s",
        cfg.kind.value,
        stats.mean_acceptance(),
        stats.score_evals,
    )
    return batch, stats


def reverse_diffusion(
    tree_or_model: Any,
    s: NoiseSchedule,
    n: int,
    seed: int = 0,
    threads: int | None = 1,
) -> tuple[SampleBatch, ChainStats]:
    """Ancestral sampling with eps = -sigma_t * score and no clipping."""
    cfg = SamplerConfig(kind=SamplerKind.REVERSE, steps_per_t=0, init_with_reverse_step=True, seed=seed)
    return annealed_mcmc(tree_or_model, s, cfg, n, seed=seed, threads=threads)
