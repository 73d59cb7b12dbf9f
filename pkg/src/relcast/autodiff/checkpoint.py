"""JSON parameter checkpoints with a versioned, config-hashed header.

Layout::

    {"format": "relcast-checkpoint", "version": 1,
     "config": {...}, "config_hash": "<sha256 of canonical config JSON>",
     "params": {"<name>": {"shape": [...], "values": [...row-major...]}}}
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from ..errors import CheckpointMismatch
from .nn import Module

FORMAT = "relcast-checkpoint"
VERSION = 1


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, module: Module, config: dict, extra: dict | None = None) -> None:
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "config": config,
        "config_hash": config_hash(config),
        "params": {
            name: {"shape": list(p.shape), "values": p.data.ravel().tolist()}
            for name, p in module.named_parameters()
        },
    }
    if extra:
        payload["extra"] = extra
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def read_checkpoint(path) -> dict:
    """Parse and integrity-check a checkpoint; returns the raw payload."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointMismatch(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format") != FORMAT or payload.get("version") != VERSION:
        raise CheckpointMismatch(
            f"unsupported checkpoint header {payload.get('format')!r} v{payload.get('version')!r}"
        )
    if config_hash(payload.get("config", {})) != payload.get("config_hash"):
        raise CheckpointMismatch("checkpoint config does not match its recorded hash")
    return payload


def load_checkpoint(path, module: Module, config: dict) -> dict:
    """Load parameters into ``module``; ``config`` must hash to the stored one."""
    payload = read_checkpoint(path)
    if payload["config_hash"] != config_hash(config):
        raise CheckpointMismatch("checkpoint was written for a different model config")
    state = {
        name: np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["params"].items()
    }
    try:
        module.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointMismatch(str(exc)) from exc
    return payload
