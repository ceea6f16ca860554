"""Expression trees over diffusion models.

A tree evaluates the composed score, and the composed unnormalised log-density when
every leaf has one. Scores of products are sums of leaf scores at the same noise level,
which is what annealed MCMC targets level by level.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterator, Protocol

import numpy as np
from scipy.special import logsumexp

from services.analytic import (
    AnalyticModel,
    LabeledGmm,
    as_points,
    classifier_log_likelihood,
    classifier_score,
)
from services.errors import CapabilityError, ConfigError, to_float
from services.schedule import NoiseSchedule

LOGGER = logging.getLogger("compose")


class Model(Protocol):
    name: str
    schedule: NoiseSchedule

    @property
    def has_energy(self) -> bool: ...

    def score(self, x: np.ndarray, t: int) -> np.ndarray: ...

    def energy(self, x: np.ndarray, t: int) -> np.ndarray: ...

    def energy_and_score(self, x: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray]: ...


class NodeKind(str, Enum):
    LEAF = "leaf"
    PRODUCT = "product"
    MIXTURE = "mixture"
    NEGATION = "negation"
    TEMPER = "temper"
    GUIDANCE = "guidance"
    CONDITIONAL_PRODUCT = "conditional_product"
    CLASSIFIER = "classifier"
    DIFFERENCE = "difference"


@dataclass(frozen=True, eq=False)
class CompositionTree:
    kind: NodeKind
    children: tuple["CompositionTree", ...] = ()
    model: Any = None
    name: str = ""
    weights: tuple[float, ...] = ()
    alpha: float = 0.5
    lam: float = 1.0
    label: int | None = None
    has_energy: bool = field(init=False)
    schedule: NoiseSchedule = field(init=False)

    def __post_init__(self) -> None:
        if self.kind in (NodeKind.LEAF, NodeKind.CLASSIFIER):
            if self.model is None:
                raise ConfigError(f"{self.kind.value} node needs a model")
            has_energy = bool(self.model.has_energy) if self.kind is NodeKind.LEAF else True
            schedule = self.model.schedule
        else:
            if not self.children:
                raise ConfigError(f"{self.kind.value} node needs at least one child")
            has_energy = all(child.has_energy for child in self.children)
            schedule = self.children[0].schedule
            for child in self.children[1:]:
                if not _same_schedule(schedule, child.schedule):
                    raise ConfigError(
                        f"{self.kind.value} node mixes schedules: '{self.children[0].describe()}' "
                        f"and '{child.describe()}' do not share a noise schedule"
                    )
        object.__setattr__(self, "has_energy", has_energy)
        object.__setattr__(self, "schedule", schedule)

    def describe(self) -> str:
        if self.kind is NodeKind.LEAF:
            return self.name or getattr(self.model, "name", "leaf")
        if self.kind is NodeKind.CLASSIFIER:
            return f"classifier[{self.label}]({self.name or getattr(self.model, 'name', 'labeled')})"
        inner = ", ".join(child.describe() for child in self.children)
        if self.kind is NodeKind.MIXTURE:
            return f"mixture[{','.join(f'{w:g}' for w in self.weights)}]({inner})"
        if self.kind is NodeKind.NEGATION:
            return f"negation[{self.alpha:g}]({inner})"
        if self.kind in (NodeKind.TEMPER, NodeKind.GUIDANCE):
            return f"{self.kind.value}[{self.lam:g}]({inner})"
        return f"{self.kind.value}({inner})"

    def leaves(self) -> Iterator["CompositionTree"]:
        if self.kind in (NodeKind.LEAF, NodeKind.CLASSIFIER):
            yield self
            return
        for child in self.children:
            yield from child.leaves()

    def score(self, x: np.ndarray, t: int) -> np.ndarray:
        return composed_score(self, x, t)

    def energy(self, x: np.ndarray, t: int) -> np.ndarray:
        return composed_energy(self, x, t)

    def energy_and_score(self, x: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray]:
        return composed_energy_and_score(self, x, t)


def _same_schedule(a: NoiseSchedule, b: NoiseSchedule) -> bool:
    return a is b or (a.T == b.T and np.array_equal(a.betas, b.betas))


def as_tree(item: Any, name: str | None = None) -> CompositionTree:
    if isinstance(item, CompositionTree):
        return item
    return CompositionTree(kind=NodeKind.LEAF, model=item, name=name or getattr(item, "name", "leaf"))


def leaf(model: Any, name: str | None = None) -> CompositionTree:
    return as_tree(model, name)


def product(*children: Any) -> CompositionTree:
    return CompositionTree(kind=NodeKind.PRODUCT, children=tuple(as_tree(c) for c in children))


def mixture(children: list[Any], weights: list[float] | None = None) -> CompositionTree:
    nodes = tuple(as_tree(c) for c in children)
    if weights is None:
        weights = [1.0 / len(nodes)] * len(nodes)
    weights = tuple(to_float(w, "mixture weight") for w in weights)
    if len(weights) != len(nodes):
        raise ConfigError(f"mixture has {len(nodes)} children but {len(weights)} weights")
    if any(w < 0.0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
        raise ConfigError(f"mixture weights must lie on the simplex, got {list(weights)}")
    for node in nodes:
        missing = first_energyless_leaf(node)
        if missing is not None:
            raise CapabilityError(f"mixture needs energies but leaf '{missing}' only provides a score")
    return CompositionTree(kind=NodeKind.MIXTURE, children=nodes, weights=weights)


def negation(positive: Any, negative: Any, alpha: float = 0.5) -> CompositionTree:
    alpha = to_float(alpha, "alpha")
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"Invalid alpha={alpha}: negation needs 0 < alpha <= 1")
    return CompositionTree(kind=NodeKind.NEGATION, children=(as_tree(positive), as_tree(negative)), alpha=alpha)


def temper(child: Any, lam: float) -> CompositionTree:
    lam = to_float(lam, "lambda")
    if lam <= 0.0:
        raise ConfigError(f"Invalid lambda={lam}: tempering exponent must be positive")
    return CompositionTree(kind=NodeKind.TEMPER, children=(as_tree(child),), lam=lam)


def guidance(prior: Any, term: Any, lam: float) -> CompositionTree:
    lam = to_float(lam, "lambda")
    if lam < 0.0:
        raise ConfigError(f"Invalid lambda={lam}: guidance scale must be >= 0")
    return CompositionTree(kind=NodeKind.GUIDANCE, children=(as_tree(prior), as_tree(term)), lam=lam)


def conditional_product(unconditional: Any, conditionals: list[Any]) -> CompositionTree:
    if not conditionals:
        raise ConfigError("conditional_product needs at least one conditional model")
    nodes = (as_tree(unconditional),) + tuple(as_tree(c) for c in conditionals)
    return CompositionTree(kind=NodeKind.CONDITIONAL_PRODUCT, children=nodes)


def guidance_term_explicit(labeled: AnalyticModel, y: int, name: str | None = None) -> CompositionTree:
    """log p_t(y | x) from the exact posterior of a labelled mixture."""
    if not isinstance(labeled, AnalyticModel) or not isinstance(labeled.base, LabeledGmm):
        raise ConfigError("explicit guidance needs an analytic model over a LabeledGmm")
    if int(y) not in labeled.base.label_values:
        raise ConfigError(f"label {y} not present in '{labeled.name}'")
    return CompositionTree(kind=NodeKind.CLASSIFIER, model=labeled, label=int(y), name=name or labeled.name)


def guidance_term_implicit(conditional: Any, unconditional: Any) -> CompositionTree:
    """score(cond) - score(uncond), the classifier-free likelihood term."""
    return CompositionTree(kind=NodeKind.DIFFERENCE, children=(as_tree(conditional), as_tree(unconditional)))


def first_energyless_leaf(tree: CompositionTree) -> str | None:
    for node in tree.leaves():
        if not node.has_energy:
            return node.describe()
    return None


def require_energy(tree: CompositionTree, purpose: str) -> None:
    missing = first_energyless_leaf(tree)
    if missing is not None:
        raise CapabilityError(f"{purpose} needs energies but leaf '{missing}' only provides a score")


def composed_score(tree: CompositionTree, x: np.ndarray, t: int) -> np.ndarray:
    return _evaluate(tree, as_points(x), int(t), need_energy=False)[1]


def composed_energy(tree: CompositionTree, x: np.ndarray, t: int) -> np.ndarray:
    require_energy(tree, "composed_energy")
    return _evaluate(tree, as_points(x), int(t), need_energy=True)[0]


def composed_energy_and_score(tree: CompositionTree, x: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray]:
    require_energy(tree, "composed_energy")
    return _evaluate(tree, as_points(x), int(t), need_energy=True)


def _evaluate(
    tree: CompositionTree, x: np.ndarray, t: int, need_energy: bool
) -> tuple[np.ndarray | None, np.ndarray]:
    kind = tree.kind
    if kind is NodeKind.LEAF:
        if need_energy:
            return tree.model.energy_and_score(x, t)
        return None, tree.model.score(x, t)
    if kind is NodeKind.CLASSIFIER:
        labeled, s = tree.model.base, tree.model.schedule
        energy = classifier_log_likelihood(labeled, s, t, x, tree.label) if need_energy else None
        return energy, classifier_score(labeled, s, t, x, tree.label)
    if kind is NodeKind.MIXTURE:
        energies, scores = zip(*(_evaluate(c, x, t, need_energy=True) for c in tree.children))
        with np.errstate(divide="ignore"):
            log_w = np.log(np.asarray(tree.weights))[None, :] + np.stack(energies, axis=1)
        total = logsumexp(log_w, axis=1)
        resp = np.exp(log_w - total[:, None])
        return total, np.einsum("nk,kni->ni", resp, np.stack(scores, axis=0))

    parts = [_evaluate(c, x, t, need_energy) for c in tree.children]
    coeffs = _linear_coefficients(tree)
    score = sum(c * p[1] for c, p in zip(coeffs, parts))
    energy = sum(c * p[0] for c, p in zip(coeffs, parts)) if need_energy else None
    return energy, score


def _linear_coefficients(tree: CompositionTree) -> list[float]:
    """Every non-mixture interior node is a fixed linear combination of its children."""
    kind = tree.kind
    n = len(tree.children)
    if kind is NodeKind.PRODUCT:
        return [1.0] * n
    if kind is NodeKind.NEGATION:
        return [1.0, -tree.alpha]
    if kind is NodeKind.TEMPER:
        return [tree.lam]
    if kind is NodeKind.GUIDANCE:
        return [1.0, tree.lam]
    if kind is NodeKind.CONDITIONAL_PRODUCT:
        # p(x) + sum_i [p(x|y_i) - p(x)]
        return [1.0 - (n - 1)] + [1.0] * (n - 1)
    if kind is NodeKind.DIFFERENCE:
        return [1.0, -1.0]
    raise ConfigError(f"unsupported node kind {kind}")


def support_bounds(tree: CompositionTree) -> tuple[np.ndarray, np.ndarray] | None:
    """Bounding box of the t=0 support when some leaf is compactly supported."""
    kind = tree.kind
    if kind is NodeKind.LEAF:
        support = getattr(tree.model, "support", None)
        return support() if callable(support) else None
    if kind is NodeKind.CLASSIFIER:
        return None
    if kind is NodeKind.MIXTURE:
        boxes = [support_bounds(c) for c in tree.children]
        if any(box is None for box in boxes):
            return None
        return np.min([b[0] for b in boxes], axis=0), np.max([b[1] for b in boxes], axis=0)
    if kind in (NodeKind.NEGATION, NodeKind.DIFFERENCE, NodeKind.TEMPER):
        return support_bounds(tree.children[0])
    boxes = [box for box in (support_bounds(c) for c in tree.children) if box is not None]
    if not boxes:
        return None
    lo = np.max([b[0] for b in boxes], axis=0)
    hi = np.min([b[1] for b in boxes], axis=0)
    if np.any(lo >= hi):
        raise ConfigError(f"'{tree.describe()}' has an empty support")
    return lo, hi
