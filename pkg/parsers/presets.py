"""Built-in reproduction presets, expressed as ordinary experiment-config payloads."""

from __future__ import annotations

from typing import Any, Callable

from parsers.experiment_config import ExperimentConfig
from services.errors import ConfigError

REPRODUCE_SEEDS = [0, 1, 2, 3, 4]
LINEAR_T100 = {"kind": "linear", "T": 100}


def method_samplers() -> dict[str, dict[str, Any]]:
    """Sampler settings of the reproduction methods; step sizes are constant across levels."""
    hmc = {
        "kind": "HMC_PMR",
        "steps_per_t": 3,
        "leapfrog_steps": 3,
        "step_scale": 0.03,
        "step_exponent": 0.0,
        "mass_scale": 1.0,
        "mass_exponent": 0.0,
        "damping": 0.9,
    }
    mala = {
        "kind": "MALA",
        "steps_per_t": 10,
        "step_scale": 0.002,
        "step_exponent": 0.0,
        "step_convention": "drift",
    }
    return {
        "reverse": {"kind": "REVERSE", "steps_per_t": 0},
        "ula": {**mala, "kind": "ULA"},
        "mala": mala,
        "uhmc": {key: value for key, value in hmc.items() if key != "damping"} | {"kind": "UHMC"},
        "hmc": hmc,
    }


def _base(name: str, distributions: dict[str, Any], models: dict[str, Any], tree: dict[str, Any], metrics: dict[str, Any]) -> dict[str, Any]:
    return {
        "schema_version": 1,
        "name": name,
        "schedule": dict(LINEAR_T100),
        "distributions": distributions,
        "models": models,
        "tree": tree,
        "sampler": method_samplers()["hmc"],
        "methods": method_samplers(),
        "metrics": {"n_samples": 10000, **metrics},
        "seeds": list(REPRODUCE_SEEDS),
        "output_dir": f"out/{name}",
    }


def product2d() -> dict[str, Any]:
    return _base(
        "product2d",
        {"ring": {"type": "named", "name": "ring"}, "box": {"type": "named", "name": "product_box"}},
        {"ring": {"kind": "analytic", "distribution": "ring"}, "box": {"kind": "analytic", "distribution": "box"}},
        {"op": "product", "children": [{"leaf": "ring"}, {"leaf": "box"}]},
        {"gmm_components": 2},
    )


def mixture2d() -> dict[str, Any]:
    centers = [[-0.25, 0.5], [-0.25, 0.0], [-0.25, -0.5], [0.25, 0.5], [0.25, 0.0], [0.25, -0.5]]
    return _base(
        "mixture2d",
        {"left": {"type": "named", "name": "mixture_left"}, "right": {"type": "named", "name": "mixture_right"}},
        {"left": {"kind": "analytic", "distribution": "left"}, "right": {"kind": "analytic", "distribution": "right"}},
        {"op": "mixture", "children": [{"leaf": "left"}, {"leaf": "right"}], "weights": [0.5, 0.5]},
        {"gmm_components": 6, "mode_centers": centers},
    )


def equal_steps_baseline() -> dict[str, Any]:
    payload = product2d()
    payload["name"] = "equal-steps-baseline"
    payload["output_dir"] = "out/equal-steps-baseline"
    return payload


def guidance2d() -> dict[str, Any]:
    return _base(
        "guidance2d",
        {"quad": {"type": "named", "name": "labeled_quad"}},
        {"quad": {"kind": "analytic", "distribution": "quad"}},
        {"op": "guidance", "prior": {"leaf": "quad"}, "term": {"op": "classifier", "model": "quad", "label": 0}, "lambda": 3.0},
        {"gmm_components": 2},
    )


def negation2d() -> dict[str, Any]:
    return _base(
        "negation2d",
        {"keep": {"type": "named", "name": "negation_keep"}, "remove": {"type": "named", "name": "negation_remove"}},
        {"keep": {"kind": "analytic", "distribution": "keep"}, "remove": {"kind": "analytic", "distribution": "remove"}},
        {"op": "negation", "positive": {"leaf": "keep"}, "negative": {"leaf": "remove"}, "alpha": 0.5},
        {"gmm_components": 6},
    )


PRESETS: dict[str, Callable[[], dict[str, Any]]] = {
    "product2d": product2d,
    "mixture2d": mixture2d,
    "equal-steps-baseline": equal_steps_baseline,
    "guidance2d": guidance2d,
    "negation2d": negation2d,
}


def preset_payload(name: str) -> dict[str, Any]:
    if name not in PRESETS:
        raise ConfigError(f"Unknown preset '{name}'; expected one of {', '.join(PRESETS)}")
    return PRESETS[name]()


def load_preset(name: str) -> ExperimentConfig:
    return ExperimentConfig.from_dict(preset_payload(name))
