"""
Helper utilities for the Swin CT toolkit
"""

import hashlib
import json
import os
import shutil
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Sequence

from src.core.errors import ConfigError


def generate_file_hash(content: bytes) -> str:
    """Content address used for the slice store"""
    return hashlib.sha256(content).hexdigest()


def merge_configs(default_config: Dict[str, Any], user_config: Dict[str, Any]) -> Dict[str, Any]:
    """Merge user configuration onto defaults, rejecting unknown keys.

    A default of ``None`` accepts any value; otherwise the user value must
    have the default's type (ints are accepted for floats).
    """
    merged = json.loads(json.dumps(default_config))

    def merge_dicts(d1, d2, prefix):
        for key, value in d2.items():
            path = f"{prefix}{key}"
            if key not in d1:
                raise ConfigError(f"Unknown configuration key '{path}'")
            default = d1[key]
            if isinstance(default, dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"Configuration key '{path}' must be a mapping")
                merge_dicts(default, value, path + ".")
                continue
            if default is not None and value is not None and not _same_kind(default, value):
                raise ConfigError(
                    f"Configuration key '{path}' expects {type(default).__name__}, "
                    f"got {type(value).__name__}"
                )
            d1[key] = value

    merge_dicts(merged, user_config or {}, "")
    return merged


def _same_kind(default: Any, value: Any) -> bool:
    if isinstance(default, bool) or isinstance(value, bool):
        return isinstance(default, bool) and isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float))
    if isinstance(default, (list, tuple)):
        return isinstance(value, (list, tuple))
    return isinstance(value, type(default))


def largest_remainder(total: int, weights: Sequence[float]) -> List[int]:
    """Split ``total`` into integer parts proportional to ``weights``.

    Floors every share, then hands the leftover units to the largest
    fractional remainders (ties go to the earlier share).
    """
    weight_sum = float(sum(weights))
    if total < 0 or weight_sum <= 0:
        raise ValueError("largest_remainder needs total >= 0 and positive weights")
    exact = [total * w / weight_sum for w in weights]
    parts = [int(e) for e in exact]
    leftover = total - sum(parts)
    order = sorted(range(len(weights)), key=lambda i: (-(exact[i] - parts[i]), i))
    for i in order[:leftover]:
        parts[i] += 1
    return parts


def worker_count(default: int = 1) -> int:
    """Worker pool size, capped by SWINCT_THREADS"""
    raw = os.environ.get("SWINCT_THREADS")
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"SWINCT_THREADS must be an integer, got '{raw}'")


def atomic_write_bytes(path: Path, content: bytes) -> Path:
    """Write via a temp file in the same directory, then rename"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(content)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def atomic_write_text(path: Path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: Path, data: Any) -> Path:
    return atomic_write_text(path, json.dumps(data, indent=2, sort_keys=False) + "\n")


@contextmanager
def atomic_directory(target: Path) -> Iterator[Path]:
    """Yield a staging directory that replaces ``target`` only on success"""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield staging
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    backup = None
    if target.exists():
        backup = target.with_name(f".{target.name}.old")
        if backup.exists():
            shutil.rmtree(backup)
        os.replace(target, backup)
    os.replace(staging, target)
    if backup is not None:
        shutil.rmtree(backup, ignore_errors=True)
