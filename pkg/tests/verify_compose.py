#!/usr/bin/env python3
"""Verify composed scores and energies of every node kind against direct leaf arithmetic."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from services.analytic import (
    AnalyticModel,
    UniformBox,
    classifier_log_likelihood,
    classifier_score,
    diffuse_gmm,
    gmm_score,
    make_labeled_quad,
    make_mixture_pair,
    make_product_box,
    make_ring_gmm,
    pool_gmms,
)
from services.compose import (
    NodeKind,
    composed_energy,
    composed_energy_and_score,
    composed_score,
    conditional_product,
    guidance,
    guidance_term_explicit,
    guidance_term_implicit,
    leaf,
    mixture,
    negation,
    product,
    support_bounds,
    temper,
)
from services.errors import CapabilityError, ConfigError
from services.networks import MlpArchitecture, build_model
from services.schedule import build_linear

LEVELS = (1, 25, 100)


def probes(n: int = 48) -> np.ndarray:
    return np.random.default_rng(21).uniform(-1.0, 1.0, size=(n, 2))


def _close(a: np.ndarray, b: np.ndarray, tol: float = 1e-10) -> bool:
    return bool(np.max(np.abs(a - b)) <= tol)


def check_linear_nodes() -> list[str]:
    errors: list[str] = []
    s = build_linear(100)
    x = probes()
    ring = AnalyticModel(make_ring_gmm(), s, name="ring")
    box = AnalyticModel(make_product_box(), s, name="box")
    left, right = (AnalyticModel(g, s, name=n) for g, n in zip(make_mixture_pair(), ("left", "right")))
    for t in LEVELS:
        tree = product(ring, box)
        if not _close(composed_score(tree, x, t), ring.score(x, t) + box.score(x, t)):
            errors.append(f"product t={t}: score is not the sum of leaf scores")
        if not _close(composed_energy(tree, x, t), ring.energy(x, t) + box.energy(x, t)):
            errors.append(f"product t={t}: energy is not the sum of leaf energies")

        neg = negation(ring, left, alpha=0.3)
        if not _close(composed_score(neg, x, t), ring.score(x, t) - 0.3 * left.score(x, t)):
            errors.append(f"negation t={t}: score mismatch")

        tempered = temper(right, 2.5)
        energy, score = composed_energy_and_score(tempered, x, t)
        if not _close(score, 2.5 * right.score(x, t)) or not _close(energy, 2.5 * right.energy(x, t)):
            errors.append(f"temper t={t}: energy or score mismatch")

        diff = guidance_term_implicit(left, right)
        if not _close(composed_score(diff, x, t), left.score(x, t) - right.score(x, t)):
            errors.append(f"difference t={t}: score mismatch")
    return errors


def check_mixture() -> list[str]:
    errors: list[str] = []
    s = build_linear(100)
    x = probes()
    gl, gr = make_mixture_pair()
    tree = mixture([AnalyticModel(gl, s, name="left"), AnalyticModel(gr, s, name="right")], [0.3, 0.7])
    pooled = pool_gmms([gl, gr], [0.3, 0.7])
    for t in LEVELS:
        expected = gmm_score(diffuse_gmm(pooled, s, t), x)
        err = np.max(np.abs(composed_score(tree, x, t) - expected) / (1.0 + np.abs(expected)))
        if err > 1e-9:
            errors.append(f"mixture t={t}: score differs from the pooled mixture by {err:.3g}")
        _, score = composed_energy_and_score(tree, x, t)
        if not _close(score, composed_score(tree, x, t)):
            errors.append(f"mixture t={t}: energy_and_score score path disagrees")
    default = mixture([AnalyticModel(gl, s), AnalyticModel(gr, s)])
    if default.weights != (0.5, 0.5):
        errors.append(f"mixture default weights {default.weights}")
    return errors


def check_guidance() -> list[str]:
    errors: list[str] = []
    s = build_linear(100)
    x = probes()
    quad = AnalyticModel(make_labeled_quad(), s, name="quad")
    term = guidance_term_explicit(quad, 1)
    tree = guidance(quad, term, 3.0)
    for t in LEVELS:
        expected = quad.score(x, t) + 3.0 * classifier_score(quad.base, s, t, x, 1)
        if not _close(composed_score(tree, x, t), expected):
            errors.append(f"guidance t={t}: score mismatch")
        expected_energy = quad.energy(x, t) + 3.0 * classifier_log_likelihood(quad.base, s, t, x, 1)
        if not _close(composed_energy(tree, x, t), expected_energy):
            errors.append(f"guidance t={t}: energy mismatch")

    cond = [AnalyticModel(make_labeled_quad(), s, label=y, name=f"quad{y}") for y in (0, 1)]
    cp = conditional_product(quad, cond)
    for t in LEVELS:
        expected = cond[0].score(x, t) + cond[1].score(x, t) - quad.score(x, t)
        if not _close(composed_score(cp, x, t), expected):
            errors.append(f"conditional_product t={t}: score mismatch")
    return errors


def check_capabilities() -> list[str]:
    errors: list[str] = []
    s = build_linear(100)
    x = probes(8)
    arch = MlpArchitecture(hidden_dim=8, n_blocks=1)
    eps_model = build_model(arch, "EPSILON", s, name="eps_only")
    energy_model = build_model(arch, "ENERGY_L2", s, name="with_energy")
    ring = AnalyticModel(make_ring_gmm(), s, name="ring")

    tree = product(ring, eps_model)
    if tree.has_energy:
        errors.append("product with an EPSILON leaf should report has_energy=False")
    composed_score(tree, x, 10)
    try:
        composed_energy(tree, x, 10)
    except CapabilityError as exc:
        if "eps_only" not in str(exc):
            errors.append(f"CapabilityError should name the leaf: {exc}")
    else:
        errors.append("composed_energy over an EPSILON leaf should raise CapabilityError")
    try:
        mixture([ring, eps_model])
    except CapabilityError:
        pass
    else:
        errors.append("mixture with an EPSILON leaf should raise CapabilityError")
    if not product(ring, energy_model).has_energy:
        errors.append("product of energy leaves should report has_energy=True")

    other = AnalyticModel(make_ring_gmm(), build_linear(50), name="ring50")
    cases = [
        ("schedule mismatch", lambda: product(ring, other)),
        ("weights off simplex", lambda: mixture([ring, ring], [0.6, 0.6])),
        ("weight count", lambda: mixture([ring, ring], [1.0])),
        ("alpha out of range", lambda: negation(ring, ring, alpha=1.5)),
        ("lambda <= 0", lambda: temper(ring, 0.0)),
        ("negative guidance", lambda: guidance(ring, ring, -1.0)),
        ("explicit term on a plain gmm", lambda: guidance_term_explicit(ring, 0)),
        ("missing label", lambda: guidance_term_explicit(AnalyticModel(make_labeled_quad(), s), 5)),
        ("empty conditionals", lambda: conditional_product(ring, [])),
    ]
    for label, fn in cases:
        try:
            fn()
        except ConfigError:
            continue
        errors.append(f"{label}: expected ConfigError")
    return errors


def check_structure() -> list[str]:
    errors: list[str] = []
    s = build_linear(100)
    ring = AnalyticModel(make_ring_gmm(), s, name="ring")
    box = AnalyticModel(make_product_box(), s, name="box")
    tree = product(ring, box)
    if tree.describe() != "product(ring, box)":
        errors.append(f"describe() gave {tree.describe()!r}")
    if [node.describe() for node in tree.leaves()] != ["ring", "box"]:
        errors.append("leaves() did not yield ring then box")
    if leaf(ring, "renamed").describe() != "renamed" or leaf(ring).kind is not NodeKind.LEAF:
        errors.append("leaf() naming broken")

    lo, hi = support_bounds(tree)
    if not np.allclose(lo, [-0.1, -1.0]) or not np.allclose(hi, [0.1, 1.0]):
        errors.append(f"support_bounds(ring x box) = {lo}, {hi}")
    if support_bounds(product(ring, ring)) is not None:
        errors.append("unbounded product should have no support box")
    if support_bounds(mixture([ring, box])) is not None:
        errors.append("mixture with an unbounded child should have no support box")
    shifted = AnalyticModel(
        UniformBox(lo=np.array([0.5, -1.0]), hi=np.array([0.9, 1.0])), s, name="shifted"
    )
    try:
        support_bounds(product(box, shifted))
    except ConfigError:
        pass
    else:
        errors.append("disjoint box product should raise ConfigError")
    return errors


def main() -> int:
    checks = {
        "linear nodes": check_linear_nodes,
        "mixture": check_mixture,
        "guidance": check_guidance,
        "capabilities": check_capabilities,
        "structure": check_structure,
    }
    failures: list[str] = []
    for name, check in checks.items():
        try:
            failures.extend(f"{name}: {err}" for err in check())
        except Exception as exc:  # pylint: disable=broad-except
            failures.append(f"{name}: raised {type(exc).__name__}: {exc}")

    if failures:
        print("Compose check FAILED")
        for err in failures:
            print(f"- {err}")
        return 1
    print("Compose check PASSED")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
