"""Checkpoints: named-array ``.npz`` archives with a JSON manifest.

Arrays are stored as ``<component>/<parameter>``; the manifest (stage,
iteration, config hash, component names, extras) sits under ``__manifest__``.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

MANIFEST_KEY = "__manifest__"


def state_checksum(state: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(np.ascontiguousarray(_to_numpy(state[name])).tobytes())
    return h.hexdigest()


def _to_numpy(v):
    if isinstance(v, torch.Tensor):
        return v.detach().cpu().numpy()
    return np.asarray(v)


def save_checkpoint(path, components: dict, stage: str, iteration: int,
                    config_hash: str = "", **extra) -> Path:
    arrays = {}
    for comp, module in components.items():
        state = module.state_dict() if hasattr(module, "state_dict") else module
        for k, v in state.items():
            arrays[f"{comp}/{k}"] = _to_numpy(v)
    manifest = {"stage": stage, "iteration": int(iteration), "config_hash": config_hash,
                "components": sorted(components), **extra}
    arrays[MANIFEST_KEY] = np.array(json.dumps(manifest, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path):
    """Returns ({component: {param: tensor}}, manifest)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path) as archive:
        manifest = json.loads(str(archive[MANIFEST_KEY]))
        states: dict = {c: {} for c in manifest["components"]}
        for key in archive.files:
            if key == MANIFEST_KEY:
                continue
            comp, name = key.split("/", 1)
            states[comp][name] = torch.from_numpy(archive[key].copy())
    return states, manifest
