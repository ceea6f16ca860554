from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Sequence

import matplotlib

matplotlib.use("Agg")

import numpy as np
import pandas as pd
from matplotlib.figure import Figure

from services.batch import SampleBatch
from services.errors import ConfigError

LOGGER = logging.getLogger("reporting")

FLOAT_FORMAT = "%.17g"
SAMPLE_COLUMNS = ["x0", "x1"]
MAX_PANELS = 4
SVG_HASH_SALT = "compdiff"
PANEL_SIZE = 3.2


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def _prepare(path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_json(payload: dict[str, Any], path: str | Path) -> Path:
    path = _prepare(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, ensure_ascii=False, default=_json_default)
        fh.write("\n")
    return path


def read_json(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"File not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Invalid JSON in {path}: {exc}") from exc


def write_table_csv(frame: pd.DataFrame, path: str | Path) -> Path:
    path = _prepare(path)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def write_samples_csv(samples: SampleBatch | np.ndarray, path: str | Path) -> Path:
    points = samples.points if isinstance(samples, SampleBatch) else np.asarray(samples, dtype=np.float64)
    return write_table_csv(pd.DataFrame(points.reshape(-1, 2), columns=SAMPLE_COLUMNS), path)


def read_samples_csv(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Samples file not found: {path}")
    frame = pd.read_csv(path, dtype=np.float64)
    if list(frame.columns) != SAMPLE_COLUMNS:
        raise ConfigError(f"Invalid samples file {path}: expected header x0,x1, got {','.join(frame.columns)}")
    return frame.to_numpy(dtype=np.float64)


def write_loss_csv(losses: Sequence[float], path: str | Path) -> Path:
    frame = pd.DataFrame({"iteration": np.arange(len(losses), dtype=np.int64), "loss": np.asarray(losses)})
    return write_table_csv(frame, path)


def plot_panels(
    panels: Sequence[tuple[str, np.ndarray]],
    path: str | Path,
    bounds: tuple[tuple[float, float], tuple[float, float]] = ((-1.6, -1.6), (1.6, 1.6)),
    marker_size: float = 1.0,
) -> Path:
    """Scatter panels side by side as a byte-deterministic SVG; one marker element per point."""
    if not panels:
        raise ConfigError("plot needs at least one panel")
    if len(panels) > MAX_PANELS:
        raise ConfigError(f"plot supports at most {MAX_PANELS} panels, got {len(panels)}")
    (x_lo, y_lo), (x_hi, y_hi) = bounds
    path = _prepare(path)
    rc = {"svg.hashsalt": SVG_HASH_SALT, "svg.fonttype": "none", "path.simplify": False}
    with matplotlib.rc_context(rc):
        fig = Figure(figsize=(PANEL_SIZE * len(panels), PANEL_SIZE))
        axes = fig.subplots(1, len(panels), squeeze=False)[0]
        for ax, (title, points) in zip(axes, panels):
            pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
            ax.plot(pts[:, 0], pts[:, 1], linestyle="none", marker="o", markersize=marker_size, alpha=0.5)
            ax.set_title(title, fontsize=9)
            ax.set_xlim(x_lo, x_hi)
            ax.set_ylim(y_lo, y_hi)
            ax.set_aspect("equal")
            ax.tick_params(labelsize=7)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
    LOGGER.info("Wrote plot path=%s panels=%s", path, len(panels))
    return path
