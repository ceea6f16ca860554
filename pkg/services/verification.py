"""Identity and gap checks between composed scores and diffused compositions.

Equality claims compare two exact analytic quantities. Gap claims compare the
level-wise composed score against the score of the composition diffused by quadrature
from a t=0 grid table; a gap must be visible at mid noise and vanish at minimal noise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
import pandas as pd

from services.analytic import (
    AnalyticModel,
    Gmm,
    LabeledGmm,
    UniformBox,
    diffuse_gmm,
    gmm_log_density,
    gmm_score,
    make_labeled_quad,
    make_mixture_pair,
    make_negation_pair,
    make_product_box,
    make_ring_gmm,
    make_tempering_gmm,
    pool_gmms,
    product_of_gmms,
    temper_gaussian,
)
from services.batch import SampleBatch
from services.compose import (
    CompositionTree,
    NodeKind,
    as_tree,
    composed_energy,
    composed_score,
    guidance,
    guidance_term_explicit,
    mixture,
    negation,
    product,
    support_bounds,
    temper,
)
from services.grid import DEFAULT_BOUNDS, DEFAULT_RESOLUTION, GridOracle, build_grid_oracle, grid_sample
from services.rng import stream
from services.schedule import NoiseSchedule

LOGGER = logging.getLogger("verification")

EQUALITY_HOLDS = "EQUALITY_HOLDS"
EQUALITY_FAILS = "EQUALITY_FAILS"
GAP_CONFIRMED = "GAP_CONFIRMED"
GAP_NOT_FOUND = "GAP_NOT_FOUND"
INCONCLUSIVE = "INCONCLUSIVE"

EQUALITY_TOL = 1e-9
GAP_THRESHOLD = 0.05
GAP_MIN_FRACTION = 0.10
LOW_NOISE_MIN_FRACTION = 0.90
LOW_MASS_DROP = 0.01
# Score norms below this are compared in absolute terms.
GAP_FLOOR = 1.0
DEFAULT_PROBES = 400


@dataclass
class ClaimRecord:
    claim: str
    verdict: str
    t_values: list[int]
    n_probes: int
    discrepancy: dict[str, float]
    tolerances: dict[str, float]
    diagnostics: dict[str, Any] = field(default_factory=dict)
    probe_rows: list[dict[str, Any]] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "claim": self.claim,
            "verdict": self.verdict,
            "t_values": self.t_values,
            "n_probes": self.n_probes,
            "discrepancy": self.discrepancy,
            "tolerances": self.tolerances,
            "diagnostics": self.diagnostics,
        }


@dataclass
class VerificationReport:
    seed: int
    records: list[ClaimRecord] = field(default_factory=list)

    def verdicts(self) -> dict[str, str]:
        return {r.claim: r.verdict for r in self.records}

    def to_dict(self) -> dict[str, Any]:
        return {"seed": self.seed, "claims": [r.to_dict() for r in self.records]}

    def relative_gap_table(self) -> pd.DataFrame:
        rows = [row for r in self.records for row in r.probe_rows]
        return pd.DataFrame(rows, columns=["claim", "t", "probe", "x0", "x1", "relative_gap", "gap_floor"])


def relative_gap(candidate: np.ndarray, truth: np.ndarray, floor: float = GAP_FLOOR) -> np.ndarray:
    """||candidate - truth|| / max(||truth||, floor) per probe.

    Where the true score is shorter than `floor` the gap is absolute.
    """
    return np.linalg.norm(candidate - truth, axis=1) / np.maximum(np.linalg.norm(truth, axis=1), floor)


def _probe_rows(claim: str, t: int, probes: np.ndarray, gaps: np.ndarray) -> list[dict[str, Any]]:
    return [
        {
            "claim": claim,
            "t": t,
            "probe": i,
            "x0": float(p[0]),
            "x1": float(p[1]),
            "relative_gap": float(g),
            "gap_floor": GAP_FLOOR,
        }
        for i, (p, g) in enumerate(zip(probes, gaps))
    ]


def _uniform_probes(n: int, rng: np.random.Generator, half_width: float = 2.0) -> np.ndarray:
    return rng.uniform(-half_width, half_width, size=(n, 2))


def _equality_levels(s: NoiseSchedule) -> list[int]:
    return sorted({1, max(1, s.T // 4), max(1, s.T // 2), s.T})


def _equality_record(
    claim: str,
    s: NoiseSchedule,
    n_probes: int,
    seed: int,
    candidate: Callable[[np.ndarray, int], np.ndarray],
    truth: Callable[[np.ndarray, int], np.ndarray],
) -> ClaimRecord:
    rng = stream(seed, purpose=21)
    levels = _equality_levels(s)
    worst = 0.0
    rows: list[dict[str, Any]] = []
    per_level: dict[str, float] = {}
    for t in levels:
        probes = _uniform_probes(n_probes, rng)
        gaps = relative_gap(candidate(probes, t), truth(probes, t))
        per_level[f"max_relative_error_t{t}"] = float(gaps.max())
        worst = max(worst, float(gaps.max()))
        rows.extend(_probe_rows(claim, t, probes, gaps))
    verdict = EQUALITY_HOLDS if worst <= EQUALITY_TOL else EQUALITY_FAILS
    LOGGER.info("Claim %s verdict=%s max_relative_error=%.3g", claim, verdict, worst)
    return ClaimRecord(
        claim=claim,
        verdict=verdict,
        t_values=levels,
        n_probes=n_probes,
        discrepancy={"max_relative_error": worst, **per_level},
        tolerances={"relative": EQUALITY_TOL, "gap_floor": GAP_FLOOR},
        probe_rows=rows,
    )


def verify_mixture_identity(
    models: list[AnalyticModel],
    weights: list[float],
    s: NoiseSchedule,
    n_probes: int = DEFAULT_PROBES,
    seed: int = 0,
) -> ClaimRecord:
    """Mixture of diffused leaves versus the diffused pooled mixture."""
    tree = mixture(models, weights)
    pooled = pool_gmms([m.diffused_gmm(0) for m in models], weights)
    return _equality_record(
        "mixture_identity",
        s,
        n_probes,
        seed,
        lambda x, t: composed_score(tree, x, t),
        lambda x, t: gmm_score(diffuse_gmm(pooled, s, t), x),
    )


def verify_guidance_identity(
    labeled: LabeledGmm,
    y: int,
    s: NoiseSchedule,
    n_probes: int = DEFAULT_PROBES,
    seed: int = 0,
) -> ClaimRecord:
    """Prior score plus exact classifier gradient equals the class-conditional score."""
    prior = AnalyticModel(base=labeled, schedule=s, name="labeled")
    tree = guidance(prior, guidance_term_explicit(prior, y), 1.0)
    conditional = labeled.conditional(y)
    return _equality_record(
        "guidance_identity",
        s,
        n_probes,
        seed,
        lambda x, t: composed_score(tree, x, t),
        lambda x, t: gmm_score(diffuse_gmm(conditional, s, t), x),
    )


@dataclass(frozen=True)
class DiffusedTruth:
    """Score of a t=0 density pushed through the forward chain, plus probe sampling."""

    score: Callable[[np.ndarray, int], np.ndarray]
    log_density: Callable[[np.ndarray, int], np.ndarray]
    sample0: Callable[[int, np.random.Generator], np.ndarray]
    oracle: GridOracle | None = None


def _grid_truth(
    log_density0: Callable[[np.ndarray], np.ndarray],
    s: NoiseSchedule,
    support: tuple[np.ndarray, np.ndarray] | None,
    bounds=DEFAULT_BOUNDS,
    resolution: int = DEFAULT_RESOLUTION,
) -> DiffusedTruth:
    oracle = build_grid_oracle(log_density0, bounds, resolution, support=support)
    return DiffusedTruth(
        score=lambda x, t: oracle.diffused_score(s, t, x),
        log_density=lambda x, t: oracle.diffused_log_density(s, t, x),
        sample0=oracle.sample,
        oracle=oracle,
    )


def _gmm_truth(g: Gmm, s: NoiseSchedule) -> DiffusedTruth:
    return DiffusedTruth(
        score=lambda x, t: gmm_score(diffuse_gmm(g, s, t), x),
        log_density=lambda x, t: gmm_log_density(diffuse_gmm(g, s, t), x),
        sample0=g.sample,
    )


def high_mass_probes(truth: DiffusedTruth, s: NoiseSchedule, t: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Diffused draws from the true composition minus the lowest-density 1%."""
    n_draw = int(np.ceil(n / (1.0 - LOW_MASS_DROP)))
    x0 = truth.sample0(n_draw, rng)
    scale, sigma = s.marginal_coeffs(t)
    xt = scale * x0 + sigma * rng.standard_normal(x0.shape)
    order = np.argsort(truth.log_density(xt, t))[::-1]
    return xt[np.sort(order[:n])]


def _gap_record(
    claim: str,
    tree: CompositionTree,
    truth: DiffusedTruth,
    s: NoiseSchedule,
    n_probes: int,
    seed: int,
) -> ClaimRecord:
    rng = stream(seed, purpose=22)
    t_mid = max(1, s.T // 2)
    t_low = 1
    rows: list[dict[str, Any]] = []
    fractions: dict[str, float] = {}
    for label, t in (("mid", t_mid), ("low", t_low)):
        probes = high_mass_probes(truth, s, t, n_probes, rng)
        gaps = relative_gap(composed_score(tree, probes, t), truth.score(probes, t))
        fractions[f"fraction_above_threshold_{label}"] = float(np.mean(gaps > GAP_THRESHOLD))
        fractions[f"median_relative_gap_{label}"] = float(np.median(gaps))
        rows.extend(_probe_rows(claim, t, probes, gaps))

    diagnostics: dict[str, Any] = {}
    if truth.oracle is not None:
        diagnostics["boundary_mass"] = truth.oracle.boundary_mass
        diagnostics["grid_bounds"] = [truth.oracle.lo.tolist(), truth.oracle.hi.tolist()]
    mid_gap = fractions["fraction_above_threshold_mid"] >= GAP_MIN_FRACTION
    low_equal = (1.0 - fractions["fraction_above_threshold_low"]) >= LOW_NOISE_MIN_FRACTION
    if truth.oracle is not None and not truth.oracle.boundary_ok:
        verdict = INCONCLUSIVE
    elif mid_gap and low_equal:
        verdict = GAP_CONFIRMED
    else:
        verdict = GAP_NOT_FOUND
    LOGGER.info(
        "Claim %s verdict=%s mid_fraction=%.3f low_fraction=%.3f",
        claim,
        verdict,
        fractions["fraction_above_threshold_mid"],
        fractions["fraction_above_threshold_low"],
    )
    return ClaimRecord(
        claim=claim,
        verdict=verdict,
        t_values=[t_mid, t_low],
        n_probes=n_probes,
        discrepancy=fractions,
        tolerances={
            "gap_threshold": GAP_THRESHOLD,
            "mid_min_fraction": GAP_MIN_FRACTION,
            "low_min_fraction_below": LOW_NOISE_MIN_FRACTION,
            "gap_floor": GAP_FLOOR,
        },
        diagnostics=diagnostics,
        probe_rows=rows,
    )


def verify_product_gap(
    model_a: AnalyticModel,
    model_b: AnalyticModel,
    s: NoiseSchedule,
    n_probes: int = DEFAULT_PROBES,
    seed: int = 0,
    resolution: int = DEFAULT_RESOLUTION,
) -> ClaimRecord:
    """Sum of diffused scores versus the score of the diffused product."""
    tree = product(model_a, model_b)
    a_gmm = _closed_form_gmm(as_tree(model_a))
    b_gmm = _closed_form_gmm(as_tree(model_b))
    if a_gmm is not None and b_gmm is not None:
        truth = _gmm_truth(product_of_gmms(a_gmm, b_gmm), s)
    else:
        truth = _grid_truth(lambda x: composed_energy(tree, x, 0), s, support_bounds(tree), resolution=resolution)
    return _gap_record("product_gap", tree, truth, s, n_probes, seed)


def verify_tempering_gap(
    model: AnalyticModel,
    lam: float,
    s: NoiseSchedule,
    n_probes: int = DEFAULT_PROBES,
    seed: int = 0,
    resolution: int = DEFAULT_RESOLUTION,
) -> ClaimRecord:
    """lam * diffused score versus the score of the diffused q^lam."""
    tree = temper(model, lam)
    base = _closed_form_gmm(as_tree(model))
    if lam == 1.0 and base is not None:
        truth = _gmm_truth(base, s)
    elif base is not None and base.n_components == 1:
        truth = _gmm_truth(temper_gaussian(base, lam), s)
    else:
        truth = _grid_truth(lambda x: composed_energy(tree, x, 0), s, support_bounds(tree), resolution=resolution)
    return _gap_record("tempering_gap", tree, truth, s, n_probes, seed)


def verify_annealed_guidance_gap(
    labeled: LabeledGmm,
    y: int,
    lam: float,
    s: NoiseSchedule,
    n_probes: int = DEFAULT_PROBES,
    seed: int = 0,
    resolution: int = DEFAULT_RESOLUTION,
) -> ClaimRecord:
    """Prior score plus lam * classifier gradient versus the diffused p(x) p(y|x)^lam."""
    prior = AnalyticModel(base=labeled, schedule=s, name="labeled")
    tree = guidance(prior, guidance_term_explicit(prior, y), lam)
    truth = _grid_truth(lambda x: composed_energy(tree, x, 0), s, None, resolution=resolution)
    return _gap_record("annealed_guidance_gap", tree, truth, s, n_probes, seed)


def verify_negation_gap(
    positive: AnalyticModel,
    negative: AnalyticModel,
    alpha: float,
    s: NoiseSchedule,
    n_probes: int = DEFAULT_PROBES,
    seed: int = 0,
    resolution: int = DEFAULT_RESOLUTION,
) -> ClaimRecord:
    tree = negation(positive, negative, alpha)
    truth = _grid_truth(lambda x: composed_energy(tree, x, 0), s, support_bounds(tree), resolution=resolution)
    return _gap_record("negation_gap", tree, truth, s, n_probes, seed)


def run_default_suite(
    s: NoiseSchedule,
    seed: int = 0,
    n_probes: int = DEFAULT_PROBES,
    resolution: int = DEFAULT_RESOLUTION,
    include_negation: bool = False,
) -> VerificationReport:
    """Mixture and guidance identities plus product, tempering and annealed-guidance gaps."""
    left, right = make_mixture_pair()
    labeled = make_labeled_quad()
    ring = AnalyticModel(base=make_ring_gmm(), schedule=s, name="ring")
    box = AnalyticModel(base=make_product_box(), schedule=s, name="box")
    pair = AnalyticModel(base=make_tempering_gmm(), schedule=s, name="pair")

    report = VerificationReport(seed=seed)
    report.records.append(
        verify_mixture_identity(
            [AnalyticModel(base=left, schedule=s, name="left"), AnalyticModel(base=right, schedule=s, name="right")],
            [0.3, 0.7],
            s,
            n_probes,
            seed,
        )
    )
    report.records.append(verify_guidance_identity(labeled, 0, s, n_probes, seed))
    report.records.append(verify_product_gap(ring, box, s, n_probes, seed, resolution))
    report.records.append(verify_tempering_gap(pair, 2.0, s, n_probes, seed, resolution))
    report.records.append(verify_annealed_guidance_gap(labeled, 0, 3.0, s, n_probes, seed, resolution))
    if include_negation:
        keep, remove = make_negation_pair()
        report.records.append(
            verify_negation_gap(
                AnalyticModel(base=keep, schedule=s, name="keep"),
                AnalyticModel(base=remove, schedule=s, name="remove"),
                0.5,
                s,
                n_probes,
                seed,
                resolution,
            )
        )
    return report


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------

def _closed_form_gmm(tree: CompositionTree) -> Gmm | None:
    """t=0 GMM of a subtree when one exists in closed form."""
    if tree.kind is NodeKind.LEAF:
        model = tree.model
        if isinstance(model, AnalyticModel) and not isinstance(model.base, UniformBox):
            return model.diffused_gmm(0)
        return None
    if tree.kind is NodeKind.MIXTURE:
        parts = [_closed_form_gmm(c) for c in tree.children]
        if any(p is None for p in parts):
            return None
        return pool_gmms(parts, list(tree.weights))
    if tree.kind is NodeKind.PRODUCT:
        parts = [_closed_form_gmm(c) for c in tree.children]
        if any(p is None for p in parts):
            return None
        result = parts[0]
        for part in parts[1:]:
            result = product_of_gmms(result, part)
        return result
    if tree.kind is NodeKind.TEMPER:
        child = _closed_form_gmm(tree.children[0])
        if child is not None and (tree.lam == 1.0 or child.n_components == 1):
            return child if tree.lam == 1.0 else temper_gaussian(child, tree.lam)
        return None
    return None


def _exact_sampler(tree: CompositionTree) -> Callable[[int, np.random.Generator], np.ndarray] | None:
    if tree.kind is NodeKind.LEAF and isinstance(tree.model, AnalyticModel):
        return lambda n, rng: tree.model.sample(n, rng)
    if tree.kind is NodeKind.MIXTURE:
        samplers = [_exact_sampler(c) for c in tree.children]
        if all(sampler is not None for sampler in samplers):
            weights = np.asarray(tree.weights)

            def sample_mixture(n: int, rng: np.random.Generator) -> np.ndarray:
                counts = rng.multinomial(n, weights / weights.sum())
                parts = [sampler(int(c), rng) for sampler, c in zip(samplers, counts)]
                pts = np.concatenate(parts) if parts else np.zeros((0, 2))
                return pts[rng.permutation(pts.shape[0])]

            return sample_mixture
    gmm = _closed_form_gmm(tree)
    if gmm is not None:
        return gmm.sample
    return None


def ground_truth_samples(
    tree: Any,
    n: int,
    seed: int,
    bounds=DEFAULT_BOUNDS,
    resolution: int = DEFAULT_RESOLUTION,
) -> SampleBatch:
    """Exact t=0 samples where a closed form exists, grid inverse-CDF samples otherwise."""
    tree = as_tree(tree)
    sampler = _exact_sampler(tree)
    if sampler is not None:
        points = sampler(int(n), stream(seed, purpose=5))
        return SampleBatch(points=points, provenance={"tree": tree.describe(), "source": "exact", "seed": int(seed)})
    oracle = build_grid_oracle(lambda x: composed_energy(tree, x, 0), bounds, resolution, support=support_bounds(tree))
    if not oracle.boundary_ok:
        LOGGER.warning("Ground truth for %s uses a grid with boundary mass %.3g", tree.describe(), oracle.boundary_mass)
    batch = grid_sample(oracle, int(n), seed)
    return SampleBatch(
        points=batch.points,
        provenance={"tree": tree.describe(), "source": "grid", "seed": int(seed), "boundary_mass": oracle.boundary_mass},
    )
