"""
Checkpoint directories: manifest.json plus one SWT1 tensor per parameter.

    <dir>/manifest.json
    <dir>/stages.0.blocks.1.attn.qkv.weight.swt
    ...
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from loguru import logger

from src.autodiff.serialization import read_tensor, write_tensor
from src.core.errors import CheckpointError, FormatError
from src.models.config import SwinConfig
from src.models.layers import Module
from src.utils.helpers import atomic_directory

MANIFEST = "manifest.json"
FORMAT = "swinct-checkpoint/1"
BACKBONE_PREFIX = "backbone."


def save_checkpoint(path: Union[str, Path], model: Module, step: int = 0,
                    extra: Optional[Dict[str, Any]] = None,
                    state: Optional[Dict[str, np.ndarray]] = None) -> Path:
    """Write the model (or an explicit state such as EMA weights) atomically to `path`."""
    path = Path(path)
    state = state if state is not None else model.state_dict()
    cfg = getattr(model, "cfg", None)
    manifest = {
        "format": FORMAT,
        "model": type(model).__name__,
        "config": cfg.to_dict() if isinstance(cfg, SwinConfig) else None,
        "step": int(step),
        "parameters": [{"name": name, "shape": list(array.shape)} for name, array in state.items()],
    }
    if extra:
        manifest.update(extra)
    with atomic_directory(path) as staging:
        for name, array in state.items():
            write_tensor(staging / f"{name}.swt", array)
        (staging / MANIFEST).write_text(json.dumps(manifest, indent=2))
    logger.info(f"💾 Checkpoint saved: {path} ({len(state)} tensors, step {step})")
    return path


def read_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    path = Path(path)
    manifest_path = path / MANIFEST
    if not manifest_path.is_file():
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"checkpoint manifest is not valid JSON: {e.msg}", offset=e.pos, path=str(manifest_path))
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r} in {path}")

    state: Dict[str, np.ndarray] = {}
    diff: Dict[str, str] = {}
    for entry in manifest["parameters"]:
        name = entry["name"]
        tensor_path = path / f"{name}.swt"
        if not tensor_path.is_file():
            diff[name] = "tensor file missing"
            continue
        array = read_tensor(tensor_path)
        if list(array.shape) != list(entry["shape"]):
            diff[name] = f"file shape {array.shape} vs manifest {tuple(entry['shape'])}"
            continue
        state[name] = array
    if diff:
        raise CheckpointError(f"checkpoint {path} is incomplete", diff)
    return manifest, state


def load_checkpoint(path: Union[str, Path], model: Module, strict: bool = True) -> Dict[str, Any]:
    manifest, state = read_checkpoint(path)
    skipped = model.load_state_dict(state, strict=strict)
    if skipped:
        logger.warning(f"⚠️  {len(skipped)} parameters kept their initial values: {', '.join(skipped[:5])}")
    logger.info(f"📂 Checkpoint loaded: {path} (step {manifest.get('step', 0)})")
    return manifest


def load_pretrained(path: Union[str, Path], model: Module) -> List[str]:
    """
    Initialise from a checkpoint for fine-tuning. Backbone parameters must
    match exactly; head parameters with another shape are re-initialised.
    Returns the names left at their initial values.
    """
    _, state = read_checkpoint(path)
    own = dict(model.named_parameters())
    diff = {}
    for name, p in own.items():
        if not name.startswith(BACKBONE_PREFIX):
            continue
        if name not in state:
            diff[name] = "missing from checkpoint"
        elif tuple(state[name].shape) != p.shape:
            diff[name] = f"checkpoint {tuple(state[name].shape)} vs model {p.shape}"
    if diff:
        raise CheckpointError(f"checkpoint {path} does not fit the backbone", diff)
    skipped = model.load_state_dict({k: v for k, v in state.items() if k in own}, strict=False)
    logger.info(f"📂 Initialised from {path}; {len(skipped)} head parameters re-initialised")
    return skipped
