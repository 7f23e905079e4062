"""
Stage checkpoints

A checkpoint is a directory holding manifest.json and one little-endian
float32 .npy file per trainable array (optimizer moments included).
Writes go to a temporary sibling directory that is moved into place only
once complete, so a crash never leaves a half-written stage behind.
"""

import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np
import torch

from ..errors import CheckpointError
from ..utils import dump_json, load_json, replace_dir_atomically
from .. import __version__

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA_VERSION = 1
ARRAY_DTYPE = '<f4'


@dataclass
class TrainingState:
    config: dict
    order: List[str]
    stage: int
    registered_tasks: List[str]
    acc: List[List[float]]
    parameters: Dict[str, np.ndarray]
    optimizer_state: Dict[int, Dict[str, np.ndarray]] = field(default_factory=dict)
    optimizer_groups: List[dict] = field(default_factory=list)
    optimizer_params: List[str] = field(default_factory=list)
    fingerprints: Dict[str, str] = field(default_factory=dict)


def capture_state(model, optimizer, config, order, stage, acc):
    """Snapshot model and optimizer into plain arrays"""
    parameters = {name: p.detach().cpu().numpy().astype(ARRAY_DTYPE)
                  for name, p in model.checkpoint_parameters().items()}
    state = TrainingState(
        config=config.to_dict(), order=list(order), stage=int(stage),
        registered_tasks=list(model.task_specs), acc=[list(map(float, row)) for row in acc],
        parameters=parameters, fingerprints=model.component_fingerprints())

    if optimizer is not None:
        names_by_id = {id(p): name for name, p in model.named_parameters()}
        sd = optimizer.state_dict()
        flat_params = [p for group in optimizer.param_groups for p in group["params"]]
        state.optimizer_params = [names_by_id[id(p)] for p in flat_params]
        state.optimizer_groups = [
            {k: (list(v) if isinstance(v, tuple) else v) for k, v in group.items()} for group in sd["param_groups"]]
        state.optimizer_state = {
            int(idx): {k: torch.as_tensor(v).detach().cpu().numpy().astype(ARRAY_DTYPE) for k, v in entry.items()}
            for idx, entry in sd["state"].items()}
    return state


def _array_file(kind, name):
    return f"{kind}/{name}.npy"


def save_checkpoint(state, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.parent / f".{path.name}.tmp"
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "params").mkdir(parents=True)
    (tmp / "optimizer").mkdir()

    arrays = {}

    def write(kind, name, arr):
        arr = np.asarray(arr, dtype=ARRAY_DTYPE, order="C")
        rel = _array_file(kind, name)
        np.save(tmp / rel, arr, allow_pickle=False)
        arrays[f"{kind}/{name}"] = {"file": rel, "shape": list(arr.shape), "dtype": ARRAY_DTYPE}

    for name in sorted(state.parameters):
        write("params", name, state.parameters[name])
    for idx in sorted(state.optimizer_state):
        for key in sorted(state.optimizer_state[idx]):
            write("optimizer", f"{idx}.{key}", state.optimizer_state[idx][key])

    config = state.config
    manifest = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "code_version": __version__,
        "config": config,
        "seeds": {
            "experiment": config.get("seed"),
            "encoder": config.get("encoder", {}).get("seed"),
            "train": config.get("train", {}).get("seed"),
            "tasks": {t["task_id"]: t["seed"] for t in config.get("tasks", [])},
        },
        "order": state.order,
        "stage": state.stage,
        "registered_tasks": state.registered_tasks,
        "acc": state.acc,
        "fingerprints": state.fingerprints,
        "optimizer": {"param_groups": state.optimizer_groups, "param_names": state.optimizer_params},
        "arrays": arrays,
    }
    dump_json(manifest, tmp / "manifest.json")
    replace_dir_atomically(tmp, path)
    logger.debug(f"Checkpoint written: {path}")
    return path


def _load_array(path, key, entry):
    file = path / entry["file"]
    if not file.exists():
        raise CheckpointError(f"Checkpoint array '{key}' missing: {file}")
    try:
        arr = np.load(file, allow_pickle=False)
    except (OSError, ValueError, EOFError) as e:
        raise CheckpointError(f"Checkpoint array '{key}' is unreadable ({file}): {e}")
    if list(arr.shape) != entry["shape"] or arr.dtype.str != entry["dtype"]:
        raise CheckpointError(
            f"Checkpoint array '{key}' has shape {list(arr.shape)} {arr.dtype.str}, "
            f"manifest records {entry['shape']} {entry['dtype']}")
    return arr


def load_checkpoint(path):
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"No checkpoint manifest at {manifest_path}")
    try:
        manifest = load_json(manifest_path)
        if manifest.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
            raise CheckpointError(
                f"Checkpoint schema {manifest.get('schema_version')} != supported {CHECKPOINT_SCHEMA_VERSION}")
        arrays = manifest["arrays"]
        state = TrainingState(
            config=manifest["config"], order=manifest["order"], stage=manifest["stage"],
            registered_tasks=manifest["registered_tasks"], acc=manifest["acc"], parameters={},
            optimizer_groups=manifest["optimizer"]["param_groups"],
            optimizer_params=manifest["optimizer"]["param_names"],
            fingerprints=manifest["fingerprints"])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"Corrupt checkpoint manifest {manifest_path}: {e}")
    except (KeyError, TypeError, AttributeError) as e:
        raise CheckpointError(f"Checkpoint manifest {manifest_path} is missing field {e}")

    for key, entry in arrays.items():
        kind, name = key.split("/", 1)
        arr = _load_array(path, key, entry)
        if kind == "params":
            state.parameters[name] = arr
        else:
            idx, slot = name.split(".", 1)
            state.optimizer_state.setdefault(int(idx), {})[slot] = arr
    return state


def restore_model(state):
    """Rebuild a PHPModel with every task registered and trainable arrays loaded"""
    from .config import ExperimentConfig
    from .model import PHPModel

    config = ExperimentConfig.from_dict(state.config)
    model = PHPModel(config)
    for task_id in state.registered_tasks:
        model.register_task(config.task(task_id))

    expected_backbone = state.fingerprints.get("backbone")
    if expected_backbone and model.encoders.fingerprint() != expected_backbone:
        raise CheckpointError("Frozen encoder weights rebuilt from the seed do not match the checkpoint fingerprint")

    params = model.checkpoint_parameters()
    for name, p in params.items():
        if name not in state.parameters:
            raise CheckpointError(f"Checkpoint array 'params/{name}' missing")
        arr = state.parameters[name]
        if tuple(arr.shape) != tuple(p.shape):
            raise CheckpointError(
                f"Checkpoint array 'params/{name}' has shape {tuple(arr.shape)}, model expects {tuple(p.shape)}")
        with torch.no_grad():
            p.copy_(torch.from_numpy(np.array(arr, dtype=np.float32)))
    extra = set(state.parameters) - set(params)
    if extra:
        raise CheckpointError(f"Checkpoint holds arrays the model does not have: {sorted(extra)}")
    return model


def restore_optimizer(state, model):
    named = dict(model.named_parameters())
    try:
        params = [named[name] for name in state.optimizer_params]
    except KeyError as e:
        raise CheckpointError(f"Optimizer state names unknown parameter {e}")
    optimizer = torch.optim.Adam(params)
    groups = [{k: (tuple(v) if k == "betas" else v) for k, v in g.items()} for g in state.optimizer_groups]
    sd = {
        "state": {idx: {k: torch.from_numpy(np.array(v, dtype=np.float32)) for k, v in entry.items()}
                  for idx, entry in state.optimizer_state.items()},
        "param_groups": groups,
    }
    optimizer.load_state_dict(sd)
    return optimizer
