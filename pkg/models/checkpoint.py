"""
Checkpoint Module
Directory checkpoints: manifest.json plus raw little-endian row-major tensor files
"""

import json
import logging
import os
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import torch

from models.diffusion_schedule import schedule_from_dict
from models.exceptions import CheckpointError, ScheduleError
from models.model_state import ModelConfig, ModelState, build_model, parse_stage, trainable_parameters

logger = logging.getLogger(__name__)

FORMAT_NAME = "animator-checkpoint"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
PARAMS_FILE = "params.bin"
OPTIMIZER_FILE = "optimizer.bin"

DTYPES = {
    torch.float32: ("float32", np.dtype("<f4")),
    torch.float64: ("float64", np.dtype("<f8")),
}
NUMPY_DTYPES = {name: dtype for name, dtype in DTYPES.values()}


def _write_tensors(path: Path, tensors: List[Tuple[str, torch.Tensor]]) -> List[Dict]:
    """Append tensors to one file; returns manifest entries with byte offsets"""
    entries = []
    offset = 0
    with open(path, "wb") as f:
        for name, tensor in tensors:
            if tensor.dtype not in DTYPES:
                raise CheckpointError(f"tensor {name} has unsupported dtype {tensor.dtype}")
            dtype_name, np_dtype = DTYPES[tensor.dtype]
            data = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype=np_dtype).tobytes(order="C")
            f.write(data)
            entries.append({
                "name": name,
                "shape": list(tensor.shape),
                "dtype": dtype_name,
                "file": path.name,
                "offset": offset,
                "nbytes": len(data),
            })
            offset += len(data)
    return entries


def _read_tensor(root: Path, entry: Dict, blobs: Dict[str, bytes]) -> torch.Tensor:
    try:
        file_name, offset, nbytes = entry["file"], int(entry["offset"]), int(entry["nbytes"])
        np_dtype = NUMPY_DTYPES[entry["dtype"]]
        shape = tuple(int(s) for s in entry["shape"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"malformed tensor entry {entry!r}: {e}") from e

    if file_name not in blobs:
        path = root / file_name
        if not path.exists():
            raise CheckpointError(f"tensor file {path} is missing")
        blobs[file_name] = path.read_bytes()
    blob = blobs[file_name]

    count = int(np.prod(shape, dtype=np.int64))
    if nbytes != count * np_dtype.itemsize:
        raise CheckpointError(f"tensor {entry['name']}: {nbytes} bytes do not match shape {shape}")
    if offset + nbytes > len(blob):
        raise CheckpointError(
            f"tensor file {file_name} is truncated: {entry['name']} needs bytes "
            f"{offset}..{offset + nbytes}, file has {len(blob)}"
        )
    array = np.frombuffer(blob, dtype=np_dtype, count=count, offset=offset).reshape(shape)
    return torch.from_numpy(array.astype(np_dtype.newbyteorder("="), copy=True))


def optimizer_tensors(state: ModelState) -> Tuple[List[Tuple[str, torch.Tensor]], Dict[str, float]]:
    """Adam moments keyed '<param>/exp_avg' and '<param>/exp_avg_sq', plus per-parameter step counts"""
    tensors, steps = [], {}
    if state.optimizer is None:
        return tensors, steps
    for name, param in trainable_parameters(state.model, state.stage):
        slot = state.optimizer.state.get(param)
        if not slot:
            continue
        tensors.append((f"{name}/exp_avg", slot["exp_avg"]))
        tensors.append((f"{name}/exp_avg_sq", slot["exp_avg_sq"]))
        steps[name] = float(slot["step"])
    return tensors, steps


def save_checkpoint(state: ModelState, path) -> Path:
    """
    Write a checkpoint directory

    Args:
        state: Model state to persist
        path: Target directory (created or overwritten)

    Returns:
        Path: The checkpoint directory
    """
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CheckpointError(f"cannot create checkpoint directory {root}: {e}") from e

    params = _write_tensors(root / PARAMS_FILE, list(state.params.items()))
    moments, steps = optimizer_tensors(state)
    optimizer = None
    if state.optimizer is not None:
        group = state.optimizer.param_groups[0]
        optimizer = {
            "kind": "adam",
            "lr": group["lr"],
            "betas": list(group["betas"]),
            "eps": group["eps"],
            "steps": steps,
            "tensors": _write_tensors(root / OPTIMIZER_FILE, moments),
        }

    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "stage": state.stage.value,
        "step": state.step,
        "trained_stages": list(state.trained_stages),
        "normalization": state.normalization,
        "schedule": state.schedule.to_dict() if state.schedule is not None else None,
        "config": state.config.to_dict(),
        "tensors": params,
        "optimizer": optimizer,
    }
    # manifest is written last; a directory without one is not a checkpoint
    tmp = root / (MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, root / MANIFEST_NAME)
    logger.info("Saved checkpoint %s (stage %s, step %d)", root, state.stage.value, state.step)
    return root


def read_manifest(path) -> Dict:
    manifest_path = Path(path) / MANIFEST_NAME
    if not manifest_path.exists():
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"checkpoint manifest {manifest_path} is corrupt: {e}") from e
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_NAME:
        raise CheckpointError(f"{manifest_path} is not an {FORMAT_NAME} manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")
    return manifest


def load_checkpoint(path, device: str = "cpu") -> ModelState:
    """
    Load a checkpoint directory into a ModelState

    Raises:
        CheckpointError: missing, truncated or inconsistent container
    """
    root = Path(path)
    manifest = read_manifest(root)
    try:
        config = ModelConfig.from_dict(manifest["config"])
        stage = parse_stage(manifest["stage"])
        step = int(manifest["step"])
        schedule = manifest.get("schedule")
        sched = schedule_from_dict(schedule) if schedule is not None else None
    except (KeyError, TypeError, ValueError, ScheduleError) as e:
        raise CheckpointError(f"checkpoint manifest in {root} is incomplete: {e}") from e

    model = build_model(config)
    blobs: Dict[str, bytes] = {}
    tensors = {entry["name"]: _read_tensor(root, entry, blobs) for entry in manifest.get("tensors", [])}

    expected = model.state_dict()
    missing = sorted(set(expected) - set(tensors))
    unexpected = sorted(set(tensors) - set(expected))
    if missing or unexpected:
        raise CheckpointError(f"checkpoint {root} does not match the model: "
                              f"missing {missing[:3]}, unexpected {unexpected[:3]}")
    for name, tensor in tensors.items():
        if tuple(tensor.shape) != tuple(expected[name].shape):
            raise CheckpointError(f"tensor {name} has shape {tuple(tensor.shape)}, "
                                  f"model expects {tuple(expected[name].shape)}")
    if any(t.dtype == torch.float64 for t in tensors.values()):
        model.double()
    model.load_state_dict(tensors, strict=True)
    model.to(device)

    state = ModelState(model=model, stage=stage, step=step,
                       trained_stages=list(manifest.get("trained_stages", [])),
                       schedule=sched)

    optimizer = manifest.get("optimizer")
    if optimizer is not None:
        opt = state.ensure_optimizer(float(optimizer["lr"]))
        for group in opt.param_groups:
            group["betas"] = tuple(optimizer["betas"])
            group["eps"] = float(optimizer["eps"])
        moments = {entry["name"]: _read_tensor(root, entry, blobs) for entry in optimizer["tensors"]}
        for name, param in trainable_parameters(model, stage):
            if name not in optimizer["steps"]:
                continue
            try:
                exp_avg = moments[f"{name}/exp_avg"].to(device)
                exp_avg_sq = moments[f"{name}/exp_avg_sq"].to(device)
            except KeyError as e:
                raise CheckpointError(f"optimizer moments for {name} are missing") from e
            opt.state[param] = {
                "step": torch.tensor(optimizer["steps"][name], dtype=torch.float32),
                "exp_avg": exp_avg,
                "exp_avg_sq": exp_avg_sq,
            }

    if state.normalization != float(manifest.get("normalization", state.normalization)):
        raise CheckpointError("normalization constant disagrees with the stored codec scale")
    logger.info("Loaded checkpoint %s (stage %s, step %d)", root, stage.value, step)
    return state
