"""Brute-force 2D density tables.

A GridOracle tabulates a log-density on a regular node grid, normalises it with the
trapezoid rule and then answers density, score and sampling queries from the table.
It is the reference for every composed target without a closed form.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.special import logsumexp

from services.analytic import LOG_2PI, as_points
from services.batch import SampleBatch
from services.errors import ConfigError
from services.rng import stream
from services.schedule import NoiseSchedule

LOGGER = logging.getLogger("grid_oracle")

DEFAULT_BOUNDS = ((-1.6, -1.6), (1.6, 1.6))
DEFAULT_RESOLUTION = 512
BOUNDARY_MASS_LIMIT = 1e-3
# Cells below this fraction of the peak are dropped from quadrature.
NEGLIGIBLE_MASS = 1e-14
PROBE_CHUNK = 64


def _trapezoid_weights(n: int) -> np.ndarray:
    w = np.ones(n)
    w[0] = w[-1] = 0.5
    return w


@dataclass(frozen=True, eq=False)
class GridOracle:
    lo: np.ndarray
    hi: np.ndarray
    resolution: int
    xs: np.ndarray
    ys: np.ndarray
    log_values: np.ndarray
    log_Z: float
    boundary_mass: float
    free_sides: tuple[str, ...] = ()
    node_mass: np.ndarray = field(init=False)
    floor: float = field(init=False)
    _interp_log: RegularGridInterpolator = field(init=False, repr=False)
    _interp_grad: tuple[RegularGridInterpolator, RegularGridInterpolator] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        dx = self.xs[1] - self.xs[0]
        dy = self.ys[1] - self.ys[0]
        weights = np.outer(_trapezoid_weights(self.resolution), _trapezoid_weights(self.resolution)) * dx * dy
        with np.errstate(under="ignore"):
            node_mass = weights * np.exp(self.log_values)
        node_mass.setflags(write=False)
        object.__setattr__(self, "node_mass", node_mass)

        finite = np.isfinite(self.log_values)
        floor = float(self.log_values[finite].min()) - 50.0 if np.any(finite) else -1e3
        clamped = np.where(finite, self.log_values, floor)
        gx, gy = np.gradient(clamped, self.xs, self.ys, edge_order=2)
        kwargs = {"method": "linear", "bounds_error": False, "fill_value": None}
        object.__setattr__(self, "_interp_log", RegularGridInterpolator((self.xs, self.ys), clamped, **kwargs))
        object.__setattr__(
            self,
            "_interp_grad",
            (
                RegularGridInterpolator((self.xs, self.ys), gx, **kwargs),
                RegularGridInterpolator((self.xs, self.ys), gy, **kwargs),
            ),
        )
        object.__setattr__(self, "floor", floor)

    @property
    def cell(self) -> tuple[float, float]:
        return float(self.xs[1] - self.xs[0]), float(self.ys[1] - self.ys[0])

    @property
    def boundary_ok(self) -> bool:
        return self.boundary_mass <= BOUNDARY_MASS_LIMIT

    def total_mass(self) -> float:
        return float(self.node_mass.sum())

    def inside(self, x: np.ndarray) -> np.ndarray:
        x = as_points(x)
        return np.all((x >= self.lo) & (x <= self.hi), axis=1)

    def log_density(self, x: np.ndarray) -> np.ndarray:
        """Bilinear interpolation of the normalised log table; the table floor outside bounds."""
        x = as_points(x)
        out = self._interp_log(x)
        return np.where(self.inside(x), out, self.floor)

    def score(self, x: np.ndarray) -> np.ndarray:
        return grid_score(self, x)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return _sample_points(self, n, rng)

    def diffused_log_density(self, s: NoiseSchedule, t: int, x: np.ndarray) -> np.ndarray:
        if t == 0:
            return self.log_density(x)
        log_p, _ = _diffused_terms(self, s, t, as_points(x), want_score=False)
        return log_p

    def diffused_score(self, s: NoiseSchedule, t: int, x: np.ndarray) -> np.ndarray:
        """Score of the t=0 table pushed through q(x_t | x_0) by quadrature."""
        if t == 0:
            return self.score(x)
        _, score = _diffused_terms(self, s, t, as_points(x), want_score=True)
        return score

    def expected_log_density(self) -> float:
        """sum p log p over the table, what a perfect sampler scores on average."""
        mass = self.node_mass / self.node_mass.sum()
        finite = np.isfinite(self.log_values) & (mass > 0)
        return float(np.sum(mass[finite] * self.log_values[finite]))

    def high_mass_threshold(self, mass_fraction: float = 0.99) -> float:
        """Log-density level whose super-level set holds `mass_fraction` of the mass."""
        mass = self.node_mass.reshape(-1)
        order = np.argsort(self.log_values.reshape(-1))[::-1]
        cumulative = np.cumsum(mass[order]) / mass.sum()
        idx = int(np.searchsorted(cumulative, mass_fraction))
        idx = min(idx, order.shape[0] - 1)
        return float(self.log_values.reshape(-1)[order[idx]])


def build_grid_oracle(
    logdensity_fn: Callable[[np.ndarray], np.ndarray],
    bounds=DEFAULT_BOUNDS,
    resolution: int = DEFAULT_RESOLUTION,
    support: tuple[np.ndarray, np.ndarray] | None = None,
) -> GridOracle:
    """Tabulate `logdensity_fn` (unnormalised, vectorised over (n,2) points).

    When `support` is given the bounds are clipped to it so the table edges sit on the
    support edges; those sides are then excluded from the boundary-mass diagnostic.
    """
    lo = np.asarray(bounds[0], dtype=np.float64).reshape(2)
    hi = np.asarray(bounds[1], dtype=np.float64).reshape(2)
    free = [True, True, True, True]  # x-lo, x-hi, y-lo, y-hi
    if support is not None:
        s_lo = np.asarray(support[0], dtype=np.float64)
        s_hi = np.asarray(support[1], dtype=np.float64)
        for axis in range(2):
            if s_lo[axis] >= lo[axis]:
                lo[axis] = s_lo[axis]
                free[2 * axis] = False
            if s_hi[axis] <= hi[axis]:
                hi[axis] = s_hi[axis]
                free[2 * axis + 1] = False
    if np.any(lo >= hi):
        raise ConfigError(f"grid bounds are empty (lo={lo.tolist()}, hi={hi.tolist()})")
    if int(resolution) < 8:
        raise ConfigError(f"Invalid grid resolution={resolution}: must be at least 8")
    resolution = int(resolution)

    xs = np.linspace(lo[0], hi[0], resolution)
    ys = np.linspace(lo[1], hi[1], resolution)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    raw = np.asarray(logdensity_fn(np.stack([gx.ravel(), gy.ravel()], axis=1)), dtype=np.float64)
    raw = raw.reshape(resolution, resolution)
    if np.any(np.isnan(raw)) or np.any(raw == np.inf):
        raise ConfigError("grid log-density returned NaN or +inf")
    if not np.any(np.isfinite(raw)):
        raise ConfigError("grid log-density is -inf everywhere inside the bounds")

    dx = xs[1] - xs[0]
    dy = ys[1] - ys[0]
    log_w = np.log(np.outer(_trapezoid_weights(resolution), _trapezoid_weights(resolution)) * dx * dy)
    log_Z = float(logsumexp(raw + log_w))
    log_values = raw - log_Z

    with np.errstate(under="ignore"):
        mass = np.exp(log_values + log_w)
    band = max(1, resolution // 50)
    edges = np.zeros_like(mass, dtype=bool)
    names = ("x_lo", "x_hi", "y_lo", "y_hi")
    if free[0]:
        edges[:band, :] = True
    if free[1]:
        edges[-band:, :] = True
    if free[2]:
        edges[:, :band] = True
    if free[3]:
        edges[:, -band:] = True
    boundary_mass = float(mass[edges].sum() / mass.sum())
    oracle = GridOracle(
        lo=lo,
        hi=hi,
        resolution=resolution,
        xs=xs,
        ys=ys,
        log_values=log_values,
        log_Z=log_Z,
        boundary_mass=boundary_mass,
        free_sides=tuple(name for name, flag in zip(names, free) if flag),
    )
    if not oracle.boundary_ok:
        LOGGER.warning(
            "Grid boundary mass %.3g exceeds %.0e (bounds lo=%s hi=%s)",
            boundary_mass,
            BOUNDARY_MASS_LIMIT,
            lo.tolist(),
            hi.tolist(),
        )
    return oracle


def grid_log_Z(o: GridOracle) -> float:
    return o.log_Z


def grid_score(o: GridOracle, x: np.ndarray) -> np.ndarray:
    """Central-difference gradient of the log table, bilinearly interpolated."""
    x = as_points(x)
    gx, gy = o._interp_grad
    return np.stack([gx(x), gy(x)], axis=1)


def _sample_points(o: GridOracle, n: int, rng: np.random.Generator) -> np.ndarray:
    if n == 0:
        return np.zeros((0, 2))
    # Trapezoid cell mass is the mean of its four corner densities.
    dens = np.exp(o.log_values)
    cell = 0.25 * (dens[:-1, :-1] + dens[1:, :-1] + dens[:-1, 1:] + dens[1:, 1:])
    marginal = cell.sum(axis=1)
    cdf_x = np.cumsum(marginal)
    cdf_x /= cdf_x[-1]
    u = rng.random((n, 4))
    i = np.minimum(np.searchsorted(cdf_x, u[:, 0], side="right"), cell.shape[0] - 1)
    conditional = np.cumsum(cell[i], axis=1)
    conditional /= conditional[:, -1:]
    j = np.minimum((conditional < u[:, 1:2]).sum(axis=1), cell.shape[1] - 1)
    dx, dy = o.cell
    px = o.xs[i] + u[:, 2] * dx
    py = o.ys[j] + u[:, 3] * dy
    return np.stack([px, py], axis=1)


def grid_sample(o: GridOracle, n: int, seed: int) -> SampleBatch:
    """Marginal-then-conditional inverse CDF over trapezoid cells with uniform jitter."""
    points = _sample_points(o, n, stream(seed, purpose=7))
    return SampleBatch(points=points, provenance={"source": "grid_oracle", "seed": int(seed)})


def _diffused_terms(
    o: GridOracle, s: NoiseSchedule, t: int, x: np.ndarray, want_score: bool
) -> tuple[np.ndarray, np.ndarray | None]:
    scale, sigma = s.marginal_coeffs(t)
    mass = o.node_mass / o.node_mass.sum()
    keep_x = mass.max(axis=1) > NEGLIGIBLE_MASS * mass.max()
    keep_y = mass.max(axis=0) > NEGLIGIBLE_MASS * mass.max()
    table = mass[np.ix_(keep_x, keep_y)]
    cx = scale * o.xs[keep_x]
    cy = scale * o.ys[keep_y]

    log_p = np.empty(x.shape[0])
    score = np.empty_like(x) if want_score else None
    # Separable kernel: p_t(x) = Kx^T P Ky with per-axis Gaussian factors.
    for start in range(0, x.shape[0], PROBE_CHUNK):
        chunk = x[start : start + PROBE_CHUNK]
        dx_ = (chunk[:, 0:1] - cx[None, :]) / sigma
        dy_ = (chunk[:, 1:2] - cy[None, :]) / sigma
        lx = -0.5 * dx_ * dx_
        ly = -0.5 * dy_ * dy_
        mx = lx.max(axis=1, keepdims=True)
        my = ly.max(axis=1, keepdims=True)
        kx = np.exp(lx - mx)
        ky = np.exp(ly - my)
        kx_p = kx @ table
        total = np.einsum("nj,nj->n", kx_p, ky)
        with np.errstate(divide="ignore"):
            log_p[start : start + PROBE_CHUNK] = (
                np.log(total) + mx[:, 0] + my[:, 0] - LOG_2PI - 2.0 * math.log(sigma)
            )
        if want_score:
            gx = np.einsum("nj,nj->n", (kx * (-dx_ / sigma)) @ table, ky)
            gy = np.einsum("nj,nj->n", kx_p, ky * (-dy_ / sigma))
            score[start : start + PROBE_CHUNK, 0] = gx / total
            score[start : start + PROBE_CHUNK, 1] = gy / total
    return log_p, score
