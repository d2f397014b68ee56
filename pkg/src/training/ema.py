"""
Exponential moving average of model parameters.
"""

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, Iterator

import numpy as np

from src.core.errors import ShapeError
from src.models.layers import Module


@dataclass
class EmaState:
    shadow: Dict[str, np.ndarray]
    decay: float = 0.9999

    @classmethod
    def from_model(cls, model: Module, decay: float = 0.9999) -> "EmaState":
        return cls(model.state_dict(), decay)


def ema_update(ema: EmaState, params: Dict[str, np.ndarray]) -> EmaState:
    """shadow ← decay·shadow + (1 − decay)·params"""
    d = ema.decay
    for name, value in params.items():
        old = ema.shadow[name]
        if old.shape != value.shape:
            raise ShapeError(f"EMA shadow for '{name}' has another shape", [old.shape, value.shape])
        ema.shadow[name] = d * old + (1.0 - d) * value
    return ema


@contextmanager
def ema_weights(model: Module, ema: EmaState) -> Iterator[Module]:
    """Temporarily load the shadow weights into `model`."""
    saved = model.state_dict()
    model.load_state_dict(ema.shadow)
    try:
        yield model
    finally:
        model.load_state_dict(saved)
