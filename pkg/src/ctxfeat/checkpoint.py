"""Versioned npz checkpoints: model config, weights and optimizer state.

A checkpoint is a numpy .npz archive with a JSON metadata entry
(format version, architecture config, training progress, optionally the
fully resolved run config) plus one array per model parameter/buffer
under ``param/<name>`` and one per optimizer state tensor under
``opt/<param-id>/<key>``. No pickled objects are stored, so files are
portable across torch versions; round-trips are bit-exact.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .model import FeatureModel, ModelConfig

CHECKPOINT_VERSION = 1


def config_to_dict(cfg: ModelConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(obj: dict) -> ModelConfig:
    fields = {}
    for f in dataclasses.fields(ModelConfig):
        value = obj[f.name]
        if isinstance(value, list):
            value = tuple(value)
        fields[f.name] = value
    return ModelConfig(**fields)


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model and resume training."""

    config: ModelConfig
    model_state: dict[str, torch.Tensor]
    optimizer_state: dict | None
    epoch: int
    step: int
    extra: dict

    def build_model(self) -> FeatureModel:
        model = FeatureModel(self.config)
        model.load_state_dict(self.model_state)
        return model


def save_checkpoint(
    path: str | Path,
    model: FeatureModel,
    optimizer: torch.optim.Optimizer | None = None,
    epoch: int = 0,
    step: int = 0,
    extra: dict | None = None,
):
    """Serialize model (and optionally Adam) state to a versioned npz."""
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in model.state_dict().items():
        arrays[f"param/{name}"] = tensor.detach().cpu().numpy()

    opt_meta = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        for pid, state in sd["state"].items():
            for key, value in state.items():
                arrays[f"opt/{pid}/{key}"] = (
                    value.detach().cpu().numpy()
                    if isinstance(value, torch.Tensor)
                    else np.asarray(value)
                )
        opt_meta = {
            "param_groups": sd["param_groups"],
            "state_keys": {
                str(pid): sorted(state) for pid, state in sd["state"].items()
            },
        }

    meta = {
        "version": CHECKPOINT_VERSION,
        "model_config": config_to_dict(model.cfg),
        "epoch": epoch,
        "step": step,
        "optimizer": opt_meta,
        "extra": extra or {},
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Load a checkpoint, validating the format version."""
    with np.load(path, allow_pickle=False) as data:
        if "meta" not in data:
            raise ValueError(f"{path}: not a checkpoint (missing metadata entry)")
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"{path}: unsupported checkpoint version {meta.get('version')}"
            )
        model_state = {
            name[len("param/") :]: torch.from_numpy(data[name].copy())
            for name in data.files
            if name.startswith("param/")
        }
        optimizer_state = None
        opt_meta = meta.get("optimizer")
        if opt_meta is not None:
            state: dict[int, dict] = {}
            for pid_str, keys in opt_meta["state_keys"].items():
                pid = int(pid_str)
                state[pid] = {}
                for key in keys:
                    arr = data[f"opt/{pid}/{key}"].copy()
                    state[pid][key] = (
                        torch.from_numpy(arr) if arr.ndim else torch.tensor(arr)
                    )
            optimizer_state = {
                "state": state,
                "param_groups": opt_meta["param_groups"],
            }
    return Checkpoint(
        config=config_from_dict(meta["model_config"]),
        model_state=model_state,
        optimizer_state=optimizer_state,
        epoch=int(meta["epoch"]),
        step=int(meta["step"]),
        extra=meta.get("extra", {}),
    )
