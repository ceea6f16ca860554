#!/usr/bin/env python3
"""Verify noise-schedule construction, derived coefficients and the closed-form marginal."""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path
from typing import Callable

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from services.errors import ConfigError
from services.schedule import (
    build_cosine,
    build_linear,
    forward_step,
    from_betas,
    from_dict,
    marginal_coeffs,
    reverse_variance,
)


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Verify noise schedules.")
    parser.add_argument("--quick", action="store_true", help="Fewer Monte Carlo draws")
    return parser.parse_args()


def check_linear_endpoints() -> list[str]:
    errors: list[str] = []
    s = build_linear(100, 1e-4, 0.02)
    if not math.isclose(s.beta(1), 1e-4, rel_tol=1e-12) or not math.isclose(s.beta(100), 0.02, rel_tol=1e-12):
        errors.append(f"linear endpoints: got beta_1={s.beta(1)!r} beta_100={s.beta(100)!r}")
    single = build_linear(1, 1.0, 1.0)
    if single.alpha_bar(1) != 0.0 or single.sigma2s[0] != 1.0:
        errors.append(f"T=1 full noise: alpha_bar={single.alpha_bar(1)!r}")
    default = build_linear(100)
    if not default.sigma2s[-1] > 0.99:
        errors.append(f"default linear T=100: sigma_T^2={default.sigma2s[-1]!r}, expected > 0.99")
    if not build_cosine(100).sigma2s[-1] > 0.99:
        errors.append("default cosine T=100: sigma_T^2 should exceed 0.99")
    return errors


def check_direct_product() -> list[str]:
    errors: list[str] = []
    s = from_betas([0.1, 0.2, 0.3])
    if not math.isclose(s.alpha_bar(3), 0.504, rel_tol=1e-12):
        errors.append(f"alpha_bar_3: expected 0.504, got {s.alpha_bar(3)!r}")
    scale, sigma = marginal_coeffs(s, 3)
    if abs(scale - math.sqrt(0.504)) > 1e-12 or abs(sigma - math.sqrt(0.496)) > 1e-12:
        errors.append(f"marginal_coeffs(3): got ({scale!r}, {sigma!r})")
    if abs(reverse_variance(s, 3) - 0.3 * 0.28 / 0.496) > 1e-12:
        errors.append(f"reverse_variance(3): got {reverse_variance(s, 3)!r}")
    if reverse_variance(s, 1) != 0.0:
        errors.append("reverse_variance(1) should be 0 (deterministic final mean)")
    if marginal_coeffs(s, 0) != (1.0, 0.0):
        errors.append(f"marginal_coeffs(0): expected (1, 0), got {marginal_coeffs(s, 0)!r}")
    return errors


def check_invariants() -> list[str]:
    errors: list[str] = []
    for s in (build_linear(100), build_linear(100, 1e-4, 0.02), build_cosine(100), build_cosine(1000)):
        if not np.all(np.diff(s.alpha_bars) < 0.0):
            errors.append(f"{s.kind}: alpha_bar not strictly decreasing")
        running = np.cumprod(1.0 - s.betas)
        if np.max(np.abs(running - s.alpha_bars) / running) > 1e-12:
            errors.append(f"{s.kind}: alpha_bar differs from running product")
        for t in (1, s.T // 2, s.T):
            scale, sigma = s.marginal_coeffs(t)
            if abs(scale**2 + sigma**2 - 1.0) > 1e-12:
                errors.append(f"{s.kind}: scale^2 + sigma^2 != 1 at t={t}")
    cos1000 = build_cosine(1000)
    if not cos1000.alpha_bar(1000) < 1e-3:
        errors.append(f"cosine T=1000: alpha_bar_T={cos1000.alpha_bar(1000)!r}")
    if not np.all(np.diff(build_cosine(4).betas) >= 0.0):
        errors.append("cosine T=4: betas should be non-decreasing")
    large = build_linear(100, 0.01, 0.01)
    if abs(large.reverse_variance(100) - 0.01) > 1e-3:
        errors.append(f"uniform betas: reverse variance at T should be close to beta, got {large.reverse_variance(100)!r}")
    return errors


def check_errors() -> list[str]:
    errors: list[str] = []
    cases: list[tuple[str, Callable[[], object], type[Exception], str]] = [
        ("beta_min <= 0", lambda: build_linear(10, 0.0, 0.1), ConfigError, "beta_min"),
        ("beta_max > 1", lambda: build_linear(10, 0.1, 1.5), ConfigError, "beta_max"),
        ("beta_min > beta_max", lambda: build_linear(10, 0.2, 0.1), ConfigError, "beta_min"),
        ("T < 1", lambda: build_linear(0), ConfigError, "T"),
        ("t out of range", lambda: marginal_coeffs(build_linear(10), 11), IndexError, "11"),
        ("unknown kind", lambda: from_dict({"kind": "sigmoid", "T": 10}), ConfigError, "sigmoid"),
    ]
    for label, fn, exc_type, fragment in cases:
        try:
            fn()
        except exc_type as exc:
            if fragment not in str(exc):
                errors.append(f"{label}: message {str(exc)!r} does not name {fragment!r}")
        else:
            errors.append(f"{label}: expected {exc_type.__name__}")
    return errors


def check_round_trip() -> list[str]:
    errors: list[str] = []
    for s in (build_linear(50, 1e-3, 0.1), build_cosine(30), from_betas([0.1, 0.2])):
        back = from_dict(s.to_dict())
        if back.T != s.T or not np.allclose(back.betas, s.betas, rtol=0, atol=1e-15):
            errors.append(f"{s.kind}: to_dict/from_dict changed the schedule")
    rescaled = build_linear(100).rescaled(1000)
    if rescaled.T != 1000 or not math.isclose(rescaled.beta(1), 1e-4, rel_tol=1e-12):
        errors.append(f"rescaled(1000): beta_1={rescaled.beta(1)!r}, expected 1e-4")
    return errors


def check_forward_marginal(n: int) -> list[str]:
    """Two forward steps from a fixed x0 match q(x_2 | x_0) within 3 standard errors."""
    errors: list[str] = []
    s = from_betas([0.1, 0.2, 0.3])
    rng = np.random.default_rng(0)
    x0 = np.tile(np.array([[0.7, -0.4]]), (n, 1))
    x2 = forward_step(s, forward_step(s, x0, 1, rng), 2, rng)
    scale, sigma = s.marginal_coeffs(2)
    mean_err = np.abs(x2.mean(axis=0) - scale * x0[0])
    if np.any(mean_err > 3.0 * sigma / math.sqrt(n)):
        errors.append(f"two-step mean off by {mean_err}")
    var = x2.var(axis=0)
    var_se = sigma**2 * math.sqrt(2.0 / n)
    if np.any(np.abs(var - sigma**2) > 3.0 * var_se):
        errors.append(f"two-step variance {var} vs {sigma**2}")
    return errors


def main() -> int:
    args = parse_args()
    checks = {
        "linear endpoints": check_linear_endpoints,
        "direct product": check_direct_product,
        "invariants": check_invariants,
        "errors": check_errors,
        "round trip": check_round_trip,
        "forward marginal": lambda: check_forward_marginal(20_000 if args.quick else 100_000),
    }
    failures: list[str] = []
    for name, check in checks.items():
        try:
            failures.extend(f"{name}: {err}" for err in check())
        except Exception as exc:  # pylint: disable=broad-except
            failures.append(f"{name}: raised {type(exc).__name__}: {exc}")

    if failures:
        print("Schedule check FAILED")
        for err in failures:
            print(f"- {err}")
        return 1
    print("Schedule check PASSED")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
