"""Sample-quality metrics for composed targets: MMD, LL and Var."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from services.batch import SampleBatch
from services.errors import ConfigError, MetricUnreliable
from services.grid import GridOracle
from services.rng import stream

LOGGER = logging.getLogger("metrics")

BANDWIDTH_SUBSAMPLE = 2000
KERNEL_CHUNK = 1024
OUT_OF_BOUNDS_LIMIT = 0.05
EM_RESTARTS = 10
EM_ITERATIONS = 200
EM_COV_FLOOR = 1e-6
EM_TOL = 1e-10
EM_MIN_COMPONENT = 2.0


def _points(batch: SampleBatch | np.ndarray) -> np.ndarray:
    return batch.points if isinstance(batch, SampleBatch) else np.asarray(batch, dtype=np.float64).reshape(-1, 2)


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    """Median pairwise distance over an evenly strided subsample of the pooled points."""
    pooled = np.concatenate([x, y])
    stride = max(1, int(math.ceil(pooled.shape[0] / BANDWIDTH_SUBSAMPLE)))
    sub = pooled[::stride]
    d = cdist(sub, sub)
    upper = d[np.triu_indices(sub.shape[0], k=1)]
    bw = float(np.median(upper)) if upper.size else 1.0
    return bw if bw > 0.0 else 1.0


def _kernel_sum(a: np.ndarray, b: np.ndarray, bw: float) -> float:
    total = 0.0
    for start in range(0, a.shape[0], KERNEL_CHUNK):
        block = cdist(a[start : start + KERNEL_CHUNK], b, "sqeuclidean")
        total += float(np.exp(-0.5 * block / (bw * bw)).sum())
    return total


def mmd(x: SampleBatch | np.ndarray, y: SampleBatch | np.ndarray, bandwidth: float | None = None) -> float:
    """Unbiased squared MMD with a Gaussian kernel; may dip slightly below zero."""
    x = _points(x)
    y = _points(y)
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise ConfigError(f"mmd needs at least 2 points per batch, got {m} and {n}")
    bw = median_bandwidth(x, y) if bandwidth is None else float(bandwidth)
    # Diagonal terms are exp(0) = 1 each.
    kxx = (_kernel_sum(x, x, bw) - m) / (m * (m - 1))
    kyy = (_kernel_sum(y, y, bw) - n) / (n * (n - 1))
    kxy = _kernel_sum(x, y, bw) / (m * n)
    return float(kxx + kyy - 2.0 * kxy)


@dataclass(frozen=True)
class LikelihoodResult:
    ll: float
    out_of_bounds: float
    reliable: bool


def ll_under_target(x: SampleBatch | np.ndarray, tree: Any, oracle: GridOracle, t: int = 1) -> LikelihoodResult:
    """Mean normalised log-density of the samples under the composed target at level t.

    Inside the oracle bounds the composed energy minus the grid log-normaliser is used;
    samples outside contribute the table floor and are counted.
    """
    pts = _points(x)
    if pts.shape[0] == 0:
        raise ConfigError("ll_under_target needs at least one sample")
    inside = oracle.inside(pts)
    values = np.full(pts.shape[0], oracle.floor)
    if np.any(inside):
        if tree is not None and tree.has_energy:
            values[inside] = np.maximum(tree.energy(pts[inside], t) - oracle.log_Z, oracle.floor)
        else:
            values[inside] = oracle.log_density(pts[inside])
    oob = float(1.0 - inside.mean())
    reliable = oob <= OUT_OF_BOUNDS_LIMIT
    if not reliable:
        LOGGER.warning("LL metric unreliable: %.1f%% of samples fall outside the grid bounds", 100.0 * oob)
    return LikelihoodResult(ll=float(values.mean()), out_of_bounds=oob, reliable=reliable)


@dataclass(frozen=True)
class FittedGmm:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    log_likelihood: float

    def sorted_variances(self) -> np.ndarray:
        """Per-component diagonal variances ordered by lexicographic component mean."""
        order = np.lexsort((self.means[:, 1], self.means[:, 0]))
        return np.stack([np.diag(self.covs[k]) for k in order]).reshape(-1)


def _estep(data: np.ndarray, log_w: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    n, d = data.shape
    logprobs = np.full((n, means.shape[0]), -0.5 * d * math.log(2.0 * math.pi))
    for k in range(means.shape[0]):
        chol = scipy.linalg.cholesky(covs[k], lower=True)
        soln = scipy.linalg.solve_triangular(chol, (data - means[k]).T, lower=True)
        logprobs[:, k] -= np.sum(np.log(np.diag(chol))) + 0.5 * np.sum(soln**2, axis=0)
    return logprobs + log_w[None, :]


def _em_once(data: np.ndarray, k: int, rng: np.random.Generator) -> FittedGmm | None:
    n = data.shape[0]
    means = data[rng.choice(n, size=k, replace=False)].copy()
    base_cov = np.cov(data, rowvar=False) + EM_COV_FLOOR * np.eye(2)
    covs = np.repeat(base_cov[None, :, :], k, axis=0)
    log_w = np.full(k, -math.log(k))
    prev = -np.inf
    ll = -np.inf
    for _ in range(EM_ITERATIONS):
        logprobs = _estep(data, log_w, means, covs)
        norm = logsumexp(logprobs, axis=1)
        ll = float(norm.sum())
        resp = np.exp(logprobs - norm[:, None])
        counts = resp.sum(axis=0)
        if np.any(counts < EM_MIN_COMPONENT):
            return None
        log_w = np.log(counts / n)
        means = (resp.T @ data) / counts[:, None]
        for j in range(k):
            diff = data - means[j]
            cov = (resp[:, j, None] * diff).T @ diff / counts[j]
            covs[j] = 0.5 * (cov + cov.T) + EM_COV_FLOOR * np.eye(2)
        if abs(ll - prev) <= EM_TOL * abs(ll):
            break
        prev = ll
    logprobs = _estep(data, log_w, means, covs)
    ll = float(logsumexp(logprobs, axis=1).sum())
    return FittedGmm(weights=np.exp(log_w), means=means, covs=covs, log_likelihood=ll)


def fit_gmm_em(data: np.ndarray, k: int, seed: int = 0) -> FittedGmm:
    """Best of EM_RESTARTS runs by log-likelihood; degenerate runs are discarded."""
    data = _points(data)
    if data.shape[0] < 2 * k:
        raise ConfigError(f"EM needs at least {2 * k} points for {k} components, got {data.shape[0]}")
    best: FittedGmm | None = None
    for restart in range(EM_RESTARTS):
        fit = _em_once(data, k, stream(seed, restart, purpose=11))
        if fit is None:
            LOGGER.debug("EM restart %s collapsed a component", restart)
            continue
        if best is None or fit.log_likelihood > best.log_likelihood:
            best = fit
    if best is None:
        raise MetricUnreliable(f"EM collapsed a component in all {EM_RESTARTS} restarts (k={k})")
    return best


def var_metric(x: SampleBatch | np.ndarray, ground_truth: SampleBatch | np.ndarray, k: int, seed: int = 0) -> float:
    """L2 distance between sorted per-component variances of k-GMMs fitted to both batches."""
    fit_x = fit_gmm_em(_points(x), k, seed)
    fit_gt = fit_gmm_em(_points(ground_truth), k, seed)
    return float(np.linalg.norm(fit_x.sorted_variances() - fit_gt.sorted_variances()))


def mode_coverage(x: SampleBatch | np.ndarray, centers: np.ndarray, radius: float | None = None) -> list[float]:
    """Fraction of samples whose nearest true mode is each center (within radius if given)."""
    pts = _points(x)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        return [0.0] * centers.shape[0]
    d = cdist(pts, centers)
    nearest = np.argmin(d, axis=1)
    hit = np.ones(pts.shape[0], dtype=bool) if radius is None else d[np.arange(pts.shape[0]), nearest] <= radius
    return [float(np.mean((nearest == j) & hit)) for j in range(centers.shape[0])]


@dataclass
class MetricsReport:
    mmd: float
    ll: float | None
    ll_out_of_bounds: float | None
    ll_reliable: bool
    var_l2: float | None
    moments: dict[str, Any]
    metadata: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "mmd": self.mmd,
            "ll": self.ll,
            "ll_out_of_bounds": self.ll_out_of_bounds,
            "ll_reliable": self.ll_reliable,
            "var_l2": self.var_l2,
            "moments": self.moments,
            "metadata": self.metadata,
        }


def evaluate_samples(
    x: SampleBatch,
    ground_truth: SampleBatch,
    tree: Any = None,
    oracle: GridOracle | None = None,
    k: int | None = None,
    seed: int = 0,
    metadata: dict[str, Any] | None = None,
) -> MetricsReport:
    ll = None
    if oracle is not None:
        ll = ll_under_target(x, tree, oracle)
    var_l2 = var_metric(x, ground_truth, k, seed) if k else None
    return MetricsReport(
        mmd=mmd(x, ground_truth),
        ll=ll.ll if ll else None,
        ll_out_of_bounds=ll.out_of_bounds if ll else None,
        ll_reliable=ll.reliable if ll else True,
        var_l2=var_l2,
        moments=x.moments(),
        metadata=dict(metadata or {}),
    )
