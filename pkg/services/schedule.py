"""Discrete diffusion noise schedules and derived coefficients."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from services.errors import ConfigError, to_float, to_int

LOGGER = logging.getLogger("schedule")

COSINE_OFFSET = 0.008
COSINE_BETA_CLAMP = 0.999

# DDPM endpoints at 1000 steps; rescaled by 1000/T for shorter chains.
REFERENCE_STEPS = 1000
REFERENCE_BETA_MIN = 1e-4
REFERENCE_BETA_MAX = 0.02


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Coefficients of a T-step forward chain.

    Arrays indexed 0..T-1 hold levels 1..T. Level 0 (no noise) is answered by the
    accessors but has no stored entry.
    """

    T: int
    betas: np.ndarray
    kind: str = "custom"
    params: dict[str, Any] = field(default_factory=dict)
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    sigma2s: np.ndarray = field(init=False)
    reverse_vars: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        betas = np.asarray(self.betas, dtype=np.float64).copy()
        if betas.ndim != 1 or betas.shape[0] != self.T:
            raise ConfigError(f"Invalid betas: expected {self.T} values, got shape {betas.shape}")
        if np.any(betas <= 0.0) or np.any(betas > 1.0) or not np.all(np.isfinite(betas)):
            bad = int(np.argmax((betas <= 0.0) | (betas > 1.0) | ~np.isfinite(betas))) + 1
            raise ConfigError(f"Invalid beta_{bad}={betas[bad - 1]!r}: must satisfy 0 < beta <= 1")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        sigma2s = 1.0 - alpha_bars
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        with np.errstate(divide="ignore", invalid="ignore"):
            reverse_vars = np.where(sigma2s > 0.0, betas * (1.0 - prev) / sigma2s, 0.0)
        # Level 1 reverse step is the deterministic mean.
        reverse_vars[0] = 0.0
        for name, value in (
            ("betas", betas),
            ("alphas", alphas),
            ("alpha_bars", alpha_bars),
            ("sigma2s", sigma2s),
            ("reverse_vars", reverse_vars),
        ):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    def _check_level(self, t: int, allow_zero: bool = True) -> int:
        t = int(t)
        low = 0 if allow_zero else 1
        if t < low or t > self.T:
            raise IndexError(f"level t={t} out of range [{low}, {self.T}]")
        return t

    def beta(self, t: int) -> float:
        return float(self.betas[self._check_level(t, allow_zero=False) - 1])

    def alpha_bar(self, t: int) -> float:
        t = self._check_level(t)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def sigma(self, t: int) -> float:
        t = self._check_level(t)
        return 0.0 if t == 0 else math.sqrt(float(self.sigma2s[t - 1]))

    def marginal_coeffs(self, t: int) -> tuple[float, float]:
        return marginal_coeffs(self, t)

    def reverse_variance(self, t: int) -> float:
        return reverse_variance(self, t)

    def to_dict(self) -> dict[str, Any]:
        payload: dict[str, Any] = {"kind": self.kind, "T": self.T}
        if self.kind == "custom":
            payload["betas"] = [float(b) for b in self.betas]
        else:
            payload.update(self.params)
        return payload

    def rescaled(self, new_T: int) -> "NoiseSchedule":
        """Same continuous profile discretised with new_T steps."""
        if self.kind == "linear":
            factor = self.T / float(new_T)
            return build_linear(
                new_T,
                min(self.params["beta_min"] * factor, 1.0),
                min(self.params["beta_max"] * factor, 1.0),
            )
        if self.kind == "cosine":
            return build_cosine(new_T, offset=self.params.get("offset", COSINE_OFFSET))
        raise ConfigError(f"Schedule kind '{self.kind}' cannot be rescaled")


def default_linear_endpoints(T: int) -> tuple[float, float]:
    scale = REFERENCE_STEPS / float(T)
    return min(REFERENCE_BETA_MIN * scale, 1.0), min(REFERENCE_BETA_MAX * scale, 1.0)


def build_linear(T: int, beta_min: float | None = None, beta_max: float | None = None) -> NoiseSchedule:
    T = to_int(T, "T")
    if T < 1:
        raise ConfigError(f"Invalid T={T}: must be at least 1")
    default_min, default_max = default_linear_endpoints(T)
    beta_min = default_min if beta_min is None else to_float(beta_min, "beta_min")
    beta_max = default_max if beta_max is None else to_float(beta_max, "beta_max")
    if not 0.0 < beta_min:
        raise ConfigError(f"Invalid beta_min={beta_min}: must be > 0")
    if beta_max > 1.0:
        raise ConfigError(f"Invalid beta_max={beta_max}: must be <= 1")
    if beta_min > beta_max:
        raise ConfigError(f"Invalid beta_min={beta_min}: must be <= beta_max={beta_max}")
    betas = np.linspace(beta_min, beta_max, T, dtype=np.float64) if T > 1 else np.array([beta_min])
    return NoiseSchedule(T=T, betas=betas, kind="linear", params={"beta_min": beta_min, "beta_max": beta_max})


def build_cosine(T: int, offset: float = COSINE_OFFSET) -> NoiseSchedule:
    T = to_int(T, "T")
    if T < 1:
        raise ConfigError(f"Invalid T={T}: must be at least 1")
    steps = np.linspace(0.0, T, T + 1, dtype=np.float64)
    profile = np.cos(((steps / T) + offset) / (1.0 + offset) * np.pi * 0.5) ** 2
    alpha_bars = profile / profile[0]
    betas = 1.0 - alpha_bars[1:] / alpha_bars[:-1]
    betas = np.clip(betas, 1e-12, COSINE_BETA_CLAMP)
    return NoiseSchedule(T=T, betas=betas, kind="cosine", params={"offset": offset})


def from_betas(betas: list[float] | np.ndarray) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    return NoiseSchedule(T=int(betas.shape[0]), betas=betas, kind="custom")


def from_dict(payload: dict[str, Any]) -> NoiseSchedule:
    kind = str(payload.get("kind", "linear")).strip().lower()
    if kind == "linear":
        return build_linear(payload.get("T", 100), payload.get("beta_min"), payload.get("beta_max"))
    if kind == "cosine":
        return build_cosine(payload.get("T", 100), payload.get("offset", COSINE_OFFSET))
    if kind == "custom":
        if "betas" not in payload:
            raise ConfigError("custom schedule requires 'betas'")
        return from_betas(payload["betas"])
    raise ConfigError(f"Unknown schedule kind '{kind}'")


def marginal_coeffs(s: NoiseSchedule, t: int) -> tuple[float, float]:
    """Return (sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t)) for q(x_t | x_0)."""
    abar = s.alpha_bar(t)
    return math.sqrt(abar), math.sqrt(1.0 - abar)


def reverse_variance(s: NoiseSchedule, t: int) -> float:
    t = s._check_level(t, allow_zero=False)
    return float(s.reverse_vars[t - 1])


def forward_step(s: NoiseSchedule, x_prev: np.ndarray, t: int, rng: np.random.Generator) -> np.ndarray:
    """Draw x_t ~ q(x_t | x_{t-1})."""
    beta = s.beta(t)
    return math.sqrt(1.0 - beta) * x_prev + math.sqrt(beta) * rng.standard_normal(x_prev.shape)
