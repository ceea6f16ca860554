from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from services.errors import NumericAbort


@dataclass(frozen=True, eq=False)
class SampleBatch:
    """n x 2 samples plus where they came from (tree id, sampler config hash, seed)."""

    points: np.ndarray
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(points)):
            bad = int(np.argmax(~np.all(np.isfinite(points), axis=1)))
            raise NumericAbort(f"SampleBatch contains non-finite values (first at row {bad})", {"row": bad})
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @property
    def n(self) -> int:
        return len(self)

    def moments(self) -> dict[str, list]:
        if len(self) == 0:
            return {"mean": [0.0, 0.0], "cov": [[0.0, 0.0], [0.0, 0.0]]}
        cov = np.cov(self.points, rowvar=False) if len(self) > 1 else np.zeros((2, 2))
        return {"mean": self.points.mean(axis=0).tolist(), "cov": np.atleast_2d(cov).tolist()}


def config_hash(payload: dict[str, Any]) -> str:
    encoded = json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(encoded).hexdigest()[:16]
