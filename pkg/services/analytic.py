"""Closed-form base distributions and their diffused marginals.

Every quantity here is exact at every noise level, which makes these models the
ground truth for sampler, metric and verification checks.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.special import log_ndtr, logsumexp

from services.errors import ConfigError
from services.schedule import NoiseSchedule

LOGGER = logging.getLogger("analytic")

LOG_2PI = math.log(2.0 * math.pi)


def as_points(x: np.ndarray) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected points of shape (n, 2), got {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class Gmm:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self) -> None:
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        means = np.asarray(self.means, dtype=np.float64).reshape(-1, 2)
        covs = np.asarray(self.covs, dtype=np.float64).reshape(-1, 2, 2)
        if not (weights.shape[0] == means.shape[0] == covs.shape[0]):
            raise ConfigError("Gmm weights, means and covs must have the same component count")
        if np.any(weights < 0.0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ConfigError(f"Gmm weights must lie on the simplex (sum={weights.sum()!r})")
        if not np.allclose(covs, np.transpose(covs, (0, 2, 1))):
            raise ConfigError("Gmm covariances must be symmetric")
        if np.any(np.linalg.eigvalsh(covs) <= 0.0):
            raise ConfigError("Gmm covariances must be positive definite")
        for name, value in (("weights", weights), ("means", means), ("covs", covs)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @classmethod
    def isotropic(cls, weights, means, stds) -> "Gmm":
        means = np.asarray(means, dtype=np.float64).reshape(-1, 2)
        k = means.shape[0]
        stds = np.broadcast_to(np.asarray(stds, dtype=np.float64), (k,))
        weights = np.asarray(weights, dtype=np.float64) if weights is not None else np.full(k, 1.0 / k)
        weights = weights / weights.sum()
        covs = (stds**2)[:, None, None] * np.eye(2)[None, :, :]
        return cls(weights=weights, means=means, covs=covs)

    @property
    def n_components(self) -> int:
        return int(self.weights.shape[0])

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n == 0:
            return np.zeros((0, 2))
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        chol = np.linalg.cholesky(self.covs)
        z = rng.standard_normal((n, 2))
        return self.means[comp] + np.einsum("nij,nj->ni", chol[comp], z)


@dataclass(frozen=True, eq=False)
class UniformBox:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self) -> None:
        lo = np.asarray(self.lo, dtype=np.float64).reshape(2)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(2)
        if np.any(lo >= hi):
            raise ConfigError(f"UniformBox requires lo < hi componentwise (lo={lo}, hi={hi})")
        for name, value in (("lo", lo), ("hi", hi)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def area(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * rng.random((n, 2))


@dataclass(frozen=True, eq=False)
class LabeledGmm:
    gmm: Gmm
    labels: np.ndarray

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != self.gmm.n_components:
            raise ConfigError("LabeledGmm needs exactly one label per component")
        for y in np.unique(labels):
            if self.gmm.weights[labels == y].sum() <= 0.0:
                raise ConfigError(f"LabeledGmm label {int(y)} has zero total weight")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def label_values(self) -> list[int]:
        return [int(y) for y in np.unique(self.labels)]

    def conditional(self, y: int) -> Gmm:
        mask = self.labels == int(y)
        if not np.any(mask):
            raise ConfigError(f"LabeledGmm has no component with label {y}")
        weights = self.gmm.weights[mask]
        return Gmm(weights=weights / weights.sum(), means=self.gmm.means[mask], covs=self.gmm.covs[mask])


Distribution = Union[Gmm, UniformBox, LabeledGmm]


# ---------------------------------------------------------------------------
# Gaussian mixtures
# ---------------------------------------------------------------------------

def _component_terms(g: Gmm, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-component log N(x; mu_i, S_i) and S_i^{-1}(x - mu_i), shapes (n,K) and (n,K,2)."""
    prec = np.linalg.inv(g.covs)
    _, logdet = np.linalg.slogdet(g.covs)
    diff = x[:, None, :] - g.means[None, :, :]
    pdiff = np.einsum("kij,nkj->nki", prec, diff)
    maha = np.einsum("nki,nki->nk", diff, pdiff)
    log_norm = -LOG_2PI - 0.5 * logdet[None, :] - 0.5 * maha
    return log_norm, pdiff


def _log_weights(g: Gmm) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(g.weights)


def gmm_log_density(g: Gmm, x: np.ndarray) -> np.ndarray:
    x = as_points(x)
    log_norm, _ = _component_terms(g, x)
    return logsumexp(_log_weights(g)[None, :] + log_norm, axis=1)


def gmm_score(g: Gmm, x: np.ndarray) -> np.ndarray:
    """Responsibility-weighted sum of component scores."""
    x = as_points(x)
    log_norm, pdiff = _component_terms(g, x)
    joint = _log_weights(g)[None, :] + log_norm
    resp = np.exp(joint - logsumexp(joint, axis=1, keepdims=True))
    return -np.einsum("nk,nki->ni", resp, pdiff)


def diffuse_gmm(g: Gmm, s: NoiseSchedule, t: int) -> Gmm:
    abar = s.alpha_bar(t)
    sigma2 = 1.0 - abar
    return Gmm(
        weights=g.weights,
        means=math.sqrt(abar) * g.means,
        covs=abar * g.covs + sigma2 * np.eye(2)[None, :, :],
    )


def pool_gmms(gmms: list[Gmm], weights: list[float] | np.ndarray) -> Gmm:
    """Single GMM equal to sum_i weights[i] * gmms[i]."""
    weights = np.asarray(weights, dtype=np.float64)
    return Gmm(
        weights=np.concatenate([w * g.weights for w, g in zip(weights, gmms)]),
        means=np.concatenate([g.means for g in gmms]),
        covs=np.concatenate([g.covs for g in gmms]),
    )


def product_of_gmms(a: Gmm, b: Gmm) -> Gmm:
    """Normalised product a(x) b(x), itself a GMM with K_a * K_b components."""
    prec_a = np.linalg.inv(a.covs)
    prec_b = np.linalg.inv(b.covs)
    covs, means, log_w = [], [], []
    for i in range(a.n_components):
        for j in range(b.n_components):
            cov = np.linalg.inv(prec_a[i] + prec_b[j])
            mean = cov @ (prec_a[i] @ a.means[i] + prec_b[j] @ b.means[j])
            overlap = Gmm(weights=[1.0], means=a.means[i][None], covs=(a.covs[i] + b.covs[j])[None])
            with np.errstate(divide="ignore"):
                log_w.append(
                    math.log(a.weights[i]) + math.log(b.weights[j]) + float(gmm_log_density(overlap, b.means[j])[0])
                    if a.weights[i] > 0 and b.weights[j] > 0
                    else -np.inf
                )
            covs.append(cov)
            means.append(mean)
    log_w = np.asarray(log_w)
    weights = np.exp(log_w - logsumexp(log_w))
    return Gmm(weights=weights / weights.sum(), means=np.asarray(means), covs=np.asarray(covs))


def temper_gaussian(g: Gmm, lam: float) -> Gmm:
    """q(x)^lam for a single Gaussian, which stays Gaussian with covariance S / lam."""
    if g.n_components != 1:
        raise ConfigError("closed-form tempering needs a single-component Gmm")
    return Gmm(weights=[1.0], means=g.means, covs=g.covs / float(lam))


# ---------------------------------------------------------------------------
# Uniform box
# ---------------------------------------------------------------------------

def _log_ndtr_diff(upper: np.ndarray, lower: np.ndarray) -> np.ndarray:
    """log(Phi(upper) - Phi(lower)) for upper >= lower, stable in both tails."""
    reflect = lower > 0.0
    a = np.where(reflect, -lower, upper)
    b = np.where(reflect, -upper, lower)
    log_a = log_ndtr(a)
    log_b = log_ndtr(b)
    with np.errstate(divide="ignore"):
        return log_a + np.log1p(-np.exp(log_b - log_a))


def _box_axis_terms(b: UniformBox, s: NoiseSchedule, t: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    scale, sigma = s.marginal_coeffs(t)
    lo = scale * b.lo
    hi = scale * b.hi
    width = hi - lo
    if np.all(width < 1e-12 * sigma):
        # Box collapsed to a point relative to the noise: Gaussian limit.
        centre = 0.5 * (lo + hi)
        z = (x - centre) / sigma
        return -0.5 * z * z - 0.5 * LOG_2PI - math.log(sigma), -z / sigma
    upper = (hi - x) / sigma
    lower = (lo - x) / sigma
    log_mass = _log_ndtr_diff(upper, lower)
    log_phi_u = -0.5 * upper * upper - 0.5 * LOG_2PI
    log_phi_l = -0.5 * lower * lower - 0.5 * LOG_2PI
    logdens = log_mass - np.log(width)
    score = (np.exp(log_phi_l - log_mass) - np.exp(log_phi_u - log_mass)) / sigma
    return logdens, score


def box_diffused_logdensity(b: UniformBox, s: NoiseSchedule, t: int, x: np.ndarray) -> np.ndarray:
    """Density of sqrt(abar_t) U[lo, hi] + sigma_t eps, product over the two axes.

    Level 0 returns the indicator log-density (-inf outside the box).
    """
    x = as_points(x)
    if t == 0:
        inside = np.all((x >= b.lo) & (x <= b.hi), axis=1)
        return np.where(inside, -math.log(b.area), -np.inf)
    logdens, _ = _box_axis_terms(b, s, t, x)
    return logdens.sum(axis=1)


def box_diffused_score(b: UniformBox, s: NoiseSchedule, t: int, x: np.ndarray) -> np.ndarray:
    x = as_points(x)
    if t == 0:
        return np.zeros_like(x)
    _, score = _box_axis_terms(b, s, t, x)
    return score


# ---------------------------------------------------------------------------
# Labelled mixtures
# ---------------------------------------------------------------------------

def classifier_log_posterior(g: LabeledGmm, s: NoiseSchedule, t: int, x: np.ndarray) -> np.ndarray:
    """log p_t(y | x_t) for every label, shape (n, n_labels) ordered as g.label_values."""
    x = as_points(x)
    diffused = diffuse_gmm(g.gmm, s, t)
    log_norm, _ = _component_terms(diffused, x)
    joint = _log_weights(diffused)[None, :] + log_norm
    total = logsumexp(joint, axis=1)
    columns = []
    for y in g.label_values:
        mask = g.labels == y
        columns.append(logsumexp(joint[:, mask], axis=1) - total)
    return np.stack(columns, axis=1)


def classifier_posterior(g: LabeledGmm, s: NoiseSchedule, t: int, x: np.ndarray) -> np.ndarray:
    return np.exp(classifier_log_posterior(g, s, t, x))


def classifier_log_likelihood(g: LabeledGmm, s: NoiseSchedule, t: int, x: np.ndarray, y: int) -> np.ndarray:
    column = g.label_values.index(int(y))
    return classifier_log_posterior(g, s, t, x)[:, column]


def classifier_score(g: LabeledGmm, s: NoiseSchedule, t: int, x: np.ndarray, y: int) -> np.ndarray:
    """grad_x log p_t(y | x) = score of p_t(x | y) minus score of p_t(x)."""
    x = as_points(x)
    conditional = diffuse_gmm(g.conditional(y), s, t)
    marginal = diffuse_gmm(g.gmm, s, t)
    return gmm_score(conditional, x) - gmm_score(marginal, x)


# ---------------------------------------------------------------------------
# Model wrapper
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AnalyticModel:
    """Exact diffused model q_t(x) of a base distribution.

    energy(x, t) is the normalised log-density, so mixtures over analytic leaves are exact.
    A LabeledGmm base bound to `label` exposes the class-conditional p_t(x | y).
    """

    base: Distribution
    schedule: NoiseSchedule
    label: int | None = None
    name: str = "analytic"
    has_energy: bool = field(default=True, init=False)

    def __post_init__(self) -> None:
        if self.label is not None and not isinstance(self.base, LabeledGmm):
            raise ConfigError(f"model '{self.name}': only a LabeledGmm base accepts a label")
        if isinstance(self.base, LabeledGmm) and self.label is not None:
            self.base.conditional(self.label)

    def _gmm(self) -> Gmm | None:
        if isinstance(self.base, Gmm):
            return self.base
        if isinstance(self.base, LabeledGmm):
            return self.base.conditional(self.label) if self.label is not None else self.base.gmm
        return None

    def diffused_gmm(self, t: int) -> Gmm:
        gmm = self._gmm()
        if gmm is None:
            raise ConfigError(f"model '{self.name}' is not Gaussian-mixture based")
        return diffuse_gmm(gmm, self.schedule, t)

    def log_density(self, x: np.ndarray, t: int) -> np.ndarray:
        if isinstance(self.base, UniformBox):
            return box_diffused_logdensity(self.base, self.schedule, t, x)
        return gmm_log_density(self.diffused_gmm(t), x)

    def score(self, x: np.ndarray, t: int) -> np.ndarray:
        if isinstance(self.base, UniformBox):
            return box_diffused_score(self.base, self.schedule, t, x)
        return gmm_score(self.diffused_gmm(t), x)

    def energy(self, x: np.ndarray, t: int) -> np.ndarray:
        return self.log_density(x, t)

    def energy_and_score(self, x: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray]:
        return self.energy(x, t), self.score(x, t)

    def sample(self, n: int, rng: np.random.Generator, t: int = 0) -> np.ndarray:
        if isinstance(self.base, UniformBox):
            x0 = self.base.sample(n, rng)
        else:
            x0 = self._gmm().sample(n, rng)
        if t == 0:
            return x0
        scale, sigma = self.schedule.marginal_coeffs(t)
        return scale * x0 + sigma * rng.standard_normal(x0.shape)

    def support(self) -> tuple[np.ndarray, np.ndarray] | None:
        if isinstance(self.base, UniformBox):
            return self.base.lo.copy(), self.base.hi.copy()
        return None


# ---------------------------------------------------------------------------
# Named configurations
# ---------------------------------------------------------------------------

def make_ring_gmm(n: int = 8, radius: float = 0.5, std: float = 0.3) -> Gmm:
    angles = 2.0 * np.pi * np.arange(n) / n
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return Gmm.isotropic(None, means, std)


def make_product_box() -> UniformBox:
    return UniformBox(lo=np.array([-0.1, -1.0]), hi=np.array([0.1, 1.0]))


def make_mixture_pair(std: float = 0.03) -> tuple[Gmm, Gmm]:
    left = Gmm.isotropic(None, [(-0.25, 0.5), (-0.25, 0.0), (-0.25, -0.5)], std)
    right = Gmm.isotropic(None, [(0.25, 0.5), (0.25, 0.0), (0.25, -0.5)], std)
    return left, right


def make_negation_pair() -> tuple[Gmm, Gmm]:
    """Narrow ring to keep and two of its modes to carve out of it."""
    keep = make_ring_gmm(n=8, radius=0.5, std=0.1)
    remove = Gmm.isotropic(None, [(0.5, 0.0), (0.0, 0.5)], 0.15)
    return keep, remove


def make_labeled_quad(std: float = 0.15) -> LabeledGmm:
    gmm = Gmm.isotropic(None, [(-0.6, 0.0), (0.0, 0.6), (0.6, 0.0), (0.0, -0.6)], std)
    return LabeledGmm(gmm=gmm, labels=np.array([0, 0, 1, 1]))


def make_tempering_gmm() -> Gmm:
    return Gmm.isotropic(None, [(-0.5, 0.0), (0.5, 0.0)], 0.2)


NAMED_DISTRIBUTIONS = {
    "ring": make_ring_gmm,
    "product_box": make_product_box,
    "mixture_left": lambda: make_mixture_pair()[0],
    "mixture_right": lambda: make_mixture_pair()[1],
    "negation_keep": lambda: make_negation_pair()[0],
    "negation_remove": lambda: make_negation_pair()[1],
    "labeled_quad": make_labeled_quad,
    "tempering_pair": make_tempering_gmm,
}


def gmm_moments(g: Gmm) -> tuple[np.ndarray, np.ndarray]:
    mean = np.einsum("k,ki->i", g.weights, g.means)
    diff = g.means - mean
    cov = np.einsum("k,kij->ij", g.weights, g.covs + np.einsum("ki,kj->kij", diff, diff))
    return mean, cov
