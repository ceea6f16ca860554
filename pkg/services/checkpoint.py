"""Versioned binary checkpoints for NeuralModel.

Layout (all integers little-endian):

    8 bytes   magic b"CDIFFCK1"
    4 bytes   format version (uint32)
    4 bytes   header length H (uint32)
    H bytes   UTF-8 JSON header: architecture, parameterization, schedule, n_params
    8*n bytes parameter block, float64 little-endian
    32 bytes  sha256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Any

import numpy as np

from services.errors import (
    CheckpointArchitectureError,
    CheckpointChecksumError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from services.networks import MlpArchitecture, NeuralModel, Parameterization, build_model
from services.schedule import from_dict as schedule_from_dict

LOGGER = logging.getLogger("checkpoint")

MAGIC = b"CDIFFCK1"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")
_DIGEST_SIZE = 32


def save_checkpoint(m: NeuralModel, path: str | Path, extra: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    params = m.flat_params().astype("<f8")
    header = {
        "name": m.name,
        "architecture": m.arch.to_dict(),
        "parameterization": m.parameterization.value,
        "schedule": m.schedule.to_dict(),
        "n_params": int(params.shape[0]),
    }
    if extra:
        header["extra"] = extra
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)) + header_bytes + params.tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + hashlib.sha256(body).digest())
    LOGGER.info("Saved checkpoint path=%s params=%s", path, params.shape[0])
    return path


def read_header(path: str | Path) -> dict[str, Any]:
    header, _ = _read(Path(path))
    return header


def load_checkpoint(path: str | Path, expected_arch: MlpArchitecture | None = None) -> NeuralModel:
    path = Path(path)
    header, params = _read(path)
    arch = MlpArchitecture.from_dict(header["architecture"])
    if expected_arch is not None and arch != expected_arch:
        raise CheckpointArchitectureError(
            f"{path}: checkpoint architecture {arch.to_dict()} does not match {expected_arch.to_dict()}"
        )
    model = build_model(
        arch,
        Parameterization.parse(header["parameterization"]),
        schedule_from_dict(header["schedule"]),
        name=str(header.get("name", path.stem)),
    )
    if model.n_params() != params.shape[0]:
        raise CheckpointArchitectureError(
            f"{path}: {params.shape[0]} stored parameters but the architecture needs {model.n_params()}"
        )
    model.load_flat_params(params)
    LOGGER.info("Loaded checkpoint path=%s kind=%s", path, model.parameterization.value)
    return model


def _read(path: Path) -> tuple[dict[str, Any], np.ndarray]:
    blob = path.read_bytes()
    if len(blob) < _PREFIX.size:
        if MAGIC.startswith(blob[: len(MAGIC)]) and blob:
            raise CheckpointTruncatedError(f"{path}: file ends inside the fixed header")
        raise CheckpointFormatError(f"{path}: not a checkpoint file")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(blob) < start + header_len:
        raise CheckpointTruncatedError(f"{path}: file ends inside the JSON header")
    try:
        header = json.loads(blob[start : start + header_len].decode("utf-8"))
        n_params = int(header["n_params"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header ({exc})") from exc
    block_start = start + header_len
    block_end = block_start + 8 * n_params
    if len(blob) < block_end + _DIGEST_SIZE:
        raise CheckpointTruncatedError(
            f"{path}: expected {block_end + _DIGEST_SIZE} bytes, found {len(blob)}"
        )
    if len(blob) > block_end + _DIGEST_SIZE:
        raise CheckpointFormatError(f"{path}: trailing bytes after checksum")
    digest = blob[block_end:]
    if hashlib.sha256(blob[:block_end]).digest() != digest:
        raise CheckpointChecksumError(f"{path}: checksum mismatch")
    params = np.frombuffer(blob[block_start:block_end], dtype="<f8").astype(np.float64)
    return header, params
