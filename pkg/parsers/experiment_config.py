"""Experiment configuration: JSON text <-> frozen dataclasses, plus name resolution.

A config names distributions, binds models to them, arranges the models in a composition
tree and carries the sampler and metric settings. `to_dict()` and `from_dict()` round-trip.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from parsers.tree_spec import build_tree, normalize_tree_spec, referenced_models
from services.analytic import NAMED_DISTRIBUTIONS, AnalyticModel, Distribution, Gmm, LabeledGmm, UniformBox
from services.checkpoint import load_checkpoint
from services.compose import CompositionTree
from services.errors import ConfigError, to_float, to_int
from services.networks import MlpArchitecture, Parameterization, TrainConfig, build_model
from services.reporting import read_json, write_json
from services.samplers import SamplerConfig
from services.schedule import NoiseSchedule
from services.schedule import from_dict as schedule_from_dict

LOGGER = logging.getLogger("config")

SCHEMA_VERSION = 1
DISTRIBUTION_TYPES = ("named", "gmm", "box", "labeled_gmm")
MODEL_KINDS = ("analytic", "neural")


def _float_list(value: Any, field_name: str) -> list[float]:
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"Invalid {field_name}: expected a list")
    return [to_float(v, field_name) for v in value]


def _point_list(value: Any, field_name: str) -> list[list[float]]:
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"Invalid {field_name}: expected a list of [x, y] pairs")
    points = [_float_list(p, field_name) for p in value]
    if any(len(p) != 2 for p in points):
        raise ConfigError(f"Invalid {field_name}: every point needs exactly 2 coordinates")
    return points


def normalize_distribution(name: str, spec: Any) -> dict[str, Any]:
    if not isinstance(spec, Mapping):
        raise ConfigError(f"Invalid distribution '{name}': expected an object")
    kind = str(spec.get("type", "named")).strip().lower()
    if kind not in DISTRIBUTION_TYPES:
        raise ConfigError(f"Invalid distribution '{name}': unknown type '{kind}'")
    if kind == "named":
        named = str(spec.get("name", name))
        if named not in NAMED_DISTRIBUTIONS:
            raise ConfigError(
                f"Invalid distribution '{name}': unknown named distribution '{named}' "
                f"(expected one of {', '.join(sorted(NAMED_DISTRIBUTIONS))})"
            )
        return {"type": kind, "name": named}
    if kind == "box":
        return {"type": kind, "lo": _float_list(spec.get("lo"), "lo"), "hi": _float_list(spec.get("hi"), "hi")}
    means = _point_list(spec.get("means"), "means")
    out: dict[str, Any] = {"type": kind, "means": means}
    stds = spec.get("stds", 0.1)
    out["stds"] = _float_list(stds, "stds") if isinstance(stds, (list, tuple)) else to_float(stds, "stds")
    if spec.get("weights") is not None:
        out["weights"] = _float_list(spec["weights"], "weights")
    if kind == "labeled_gmm":
        labels = spec.get("labels")
        if not isinstance(labels, (list, tuple)):
            raise ConfigError(f"Invalid distribution '{name}': labeled_gmm needs 'labels'")
        out["labels"] = [to_int(v, "label") for v in labels]
    return out


def build_distribution(spec: dict[str, Any]) -> Distribution:
    kind = spec["type"]
    if kind == "named":
        return NAMED_DISTRIBUTIONS[spec["name"]]()
    if kind == "box":
        return UniformBox(lo=np.asarray(spec["lo"]), hi=np.asarray(spec["hi"]))
    gmm = Gmm.isotropic(spec.get("weights"), spec["means"], spec["stds"])
    if kind == "labeled_gmm":
        return LabeledGmm(gmm=gmm, labels=np.asarray(spec["labels"]))
    return gmm


@dataclass(frozen=True)
class ModelSpec:
    name: str
    kind: str = "analytic"
    distribution: str = ""
    label: int | None = None
    parameterization: Parameterization = Parameterization.EPSILON
    architecture: MlpArchitecture = field(default_factory=MlpArchitecture)
    checkpoint: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict[str, Any]:
        payload: dict[str, Any] = {"kind": self.kind, "distribution": self.distribution}
        if self.label is not None:
            payload["label"] = self.label
        if self.kind == "neural":
            payload["parameterization"] = self.parameterization.value
            payload["architecture"] = self.architecture.to_dict()
            payload["checkpoint"] = self.checkpoint
            payload["train"] = self.train.to_dict()
        return payload

    @classmethod
    def from_dict(cls, name: str, payload: Any) -> "ModelSpec":
        if not isinstance(payload, Mapping):
            raise ConfigError(f"Invalid model '{name}': expected an object")
        kind = str(payload.get("kind", "analytic")).strip().lower()
        if kind not in MODEL_KINDS:
            raise ConfigError(f"Invalid model '{name}': kind must be one of {', '.join(MODEL_KINDS)}")
        if "distribution" not in payload:
            raise ConfigError(f"Invalid model '{name}': missing 'distribution'")
        label = payload.get("label")
        return cls(
            name=name,
            kind=kind,
            distribution=str(payload["distribution"]),
            label=None if label is None else to_int(label, "label"),
            parameterization=Parameterization.parse(payload.get("parameterization", "epsilon")),
            architecture=MlpArchitecture.from_dict(payload.get("architecture") or {}),
            checkpoint=payload.get("checkpoint") or (f"checkpoints/{name}.ckpt" if kind == "neural" else None),
            train=TrainConfig.from_dict(payload.get("train") or {}),
        )


@dataclass(frozen=True)
class MetricConfig:
    n_samples: int = 10000
    gmm_components: int | None = None
    grid_resolution: int = 512
    bounds: tuple[tuple[float, float], tuple[float, float]] = ((-1.6, -1.6), (1.6, 1.6))
    mode_centers: tuple[tuple[float, float], ...] | None = None
    pilot_chains: int = 256
    verify_probes: int = 400

    def __post_init__(self) -> None:
        if to_int(self.n_samples, "n_samples") < 2:
            raise ConfigError(f"Invalid n_samples={self.n_samples}: need at least 2")
        if self.gmm_components is not None and to_int(self.gmm_components, "gmm_components") < 1:
            raise ConfigError(f"Invalid gmm_components={self.gmm_components}: must be positive")
        if to_int(self.grid_resolution, "grid_resolution") < 16:
            raise ConfigError(f"Invalid grid_resolution={self.grid_resolution}: need at least 16")
        (x_lo, y_lo), (x_hi, y_hi) = self.bounds
        if not (x_lo < x_hi and y_lo < y_hi):
            raise ConfigError(f"Invalid bounds={self.bounds}: need lo < hi on both axes")

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_samples": self.n_samples,
            "gmm_components": self.gmm_components,
            "grid_resolution": self.grid_resolution,
            "bounds": [list(self.bounds[0]), list(self.bounds[1])],
            "mode_centers": None if self.mode_centers is None else [list(c) for c in self.mode_centers],
            "pilot_chains": self.pilot_chains,
            "verify_probes": self.verify_probes,
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any] | None) -> "MetricConfig":
        payload = dict(payload or {})
        defaults = cls()
        bounds = _point_list(payload.get("bounds", [list(b) for b in defaults.bounds]), "bounds")
        if len(bounds) != 2:
            raise ConfigError("Invalid bounds: expected [[x_lo, y_lo], [x_hi, y_hi]]")
        centers = payload.get("mode_centers")
        k = payload.get("gmm_components")
        return cls(
            n_samples=to_int(payload.get("n_samples", defaults.n_samples), "n_samples"),
            gmm_components=None if k is None else to_int(k, "gmm_components"),
            grid_resolution=to_int(payload.get("grid_resolution", defaults.grid_resolution), "grid_resolution"),
            bounds=(tuple(bounds[0]), tuple(bounds[1])),
            mode_centers=None if centers is None else tuple(tuple(c) for c in _point_list(centers, "mode_centers")),
            pilot_chains=to_int(payload.get("pilot_chains", defaults.pilot_chains), "pilot_chains"),
            verify_probes=to_int(payload.get("verify_probes", defaults.verify_probes), "verify_probes"),
        )


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    schedule: dict[str, Any]
    distributions: dict[str, dict[str, Any]]
    models: dict[str, ModelSpec]
    tree: dict[str, Any]
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    methods: dict[str, SamplerConfig] = field(default_factory=dict)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "out"
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self) -> None:
        for model in self.models.values():
            if model.distribution not in self.distributions:
                raise ConfigError(f"Model '{model.name}' references unknown distribution '{model.distribution}'")
        missing = [name for name in referenced_models(self.tree) if name not in self.models]
        if missing:
            raise ConfigError(f"Tree references unknown model(s): {', '.join(missing)}")
        if not self.seeds:
            raise ConfigError("Config needs at least one seed")

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "name": self.name,
            "schedule": dict(self.schedule),
            "distributions": {k: dict(v) for k, v in self.distributions.items()},
            "models": {k: v.to_dict() for k, v in self.models.items()},
            "tree": self.tree,
            "sampler": self.sampler.to_dict(),
            "methods": {k: v.to_dict() for k, v in self.methods.items()},
            "metrics": self.metrics.to_dict(),
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, payload: Any) -> "ExperimentConfig":
        if not isinstance(payload, Mapping):
            raise ConfigError("Invalid config: expected a JSON object at the top level")
        version = to_int(payload.get("schema_version", SCHEMA_VERSION), "schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"Unsupported schema_version={version}; expected {SCHEMA_VERSION}")
        for key in ("schedule", "distributions", "models", "tree"):
            if key not in payload:
                raise ConfigError(f"Invalid config: missing '{key}'")
        schedule = dict(payload["schedule"])
        schedule_from_dict(schedule)
        distributions = {
            str(name): normalize_distribution(str(name), spec) for name, spec in dict(payload["distributions"]).items()
        }
        models = {str(name): ModelSpec.from_dict(str(name), spec) for name, spec in dict(payload["models"]).items()}
        seeds = payload.get("seeds", [0])
        if not isinstance(seeds, (list, tuple)):
            seeds = [seeds]
        return cls(
            name=str(payload.get("name", "experiment")),
            schedule=schedule,
            distributions=distributions,
            models=models,
            tree=normalize_tree_spec(payload["tree"]),
            sampler=SamplerConfig.from_dict(dict(payload.get("sampler") or {})),
            methods={str(k): SamplerConfig.from_dict(dict(v)) for k, v in dict(payload.get("methods") or {}).items()},
            metrics=MetricConfig.from_dict(payload.get("metrics")),
            seeds=tuple(to_int(s, "seed") for s in seeds),
            output_dir=str(payload.get("output_dir", "out")),
            schema_version=version,
        )


def load_config(path: str | Path) -> ExperimentConfig:
    config = ExperimentConfig.from_dict(read_json(path))
    LOGGER.info("Loaded config name=%s path=%s", config.name, path)
    return config


def save_config(config: ExperimentConfig, path: str | Path) -> Path:
    return write_json(config.to_dict(), path)


def build_schedule(config: ExperimentConfig) -> NoiseSchedule:
    return schedule_from_dict(config.schedule)


def resolve_models(
    config: ExperimentConfig,
    schedule: NoiseSchedule,
    require_checkpoints: bool = True,
) -> dict[str, Any]:
    """Instantiate every configured model; neural ones load their checkpoint when present."""
    models: dict[str, Any] = {}
    for name, spec in config.models.items():
        base = build_distribution(config.distributions[spec.distribution])
        if spec.kind == "analytic":
            models[name] = AnalyticModel(base=base, schedule=schedule, label=spec.label, name=name)
            continue
        path = Path(spec.checkpoint) if spec.checkpoint else None
        if path is not None and path.exists():
            model = load_checkpoint(path, expected_arch=spec.architecture)
            if model.parameterization is not spec.parameterization:
                raise ConfigError(
                    f"Checkpoint {path} holds a {model.parameterization.value} model, "
                    f"config asks for {spec.parameterization.value}"
                )
            model.name = name
            models[name] = model
        elif require_checkpoints:
            raise ConfigError(f"Model '{name}' needs a checkpoint; run `cli.py train` first (missing {path})")
        else:
            models[name] = build_model(spec.architecture, spec.parameterization, schedule, seed=spec.train.seed, name=name)
    return models


def resolve_tree(config: ExperimentConfig, models: Mapping[str, Any]) -> CompositionTree:
    return build_tree(config.tree, models)


def neural_models(config: ExperimentConfig) -> list[ModelSpec]:
    return [spec for spec in config.models.values() if spec.kind == "neural"]

