"""
Adam-family optimizers on numpy parameter buffers.
"""

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.autodiff.tensor import Tensor
from src.core.errors import NumericError

NO_DECAY_SUFFIXES = ("relative_position_bias_table",)


@dataclass
class AdamWState:
    """First/second moments per parameter; `decay` masks which parameters get weight decay."""

    m: List[np.ndarray]
    v: List[np.ndarray]
    lr: float = 1e-3
    weight_decay: float = 0.0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    decoupled: bool = True
    decay: List[bool] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **kwargs) -> "AdamWState":
        state = cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kwargs)
        if not state.decay:
            state.decay = [True] * len(params)
        return state


def adamw_step(params: List[np.ndarray], grads: List[Optional[np.ndarray]], state: AdamWState,
               names: Optional[Sequence[str]] = None) -> List[np.ndarray]:
    """
    One bias-corrected Adam update. Decoupled: θ ← θ − lr·wd·θ − lr·m̂/(√v̂ + ε).
    Coupled (plain Adam with L2): the decay term is folded into the gradient.
    Parameters without a gradient are left untouched.
    """
    names = names or [f"param[{i}]" for i in range(len(params))]
    for name, g in zip(names, grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient", parameter=name)

    state.step += 1
    b1, b2 = state.betas
    lr, wd = state.lr, state.weight_decay
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    updated = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            updated.append(p)
            continue
        decay = wd if state.decay[i] else 0.0
        if decay and not state.decoupled:
            g = g + decay * p
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        step = lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        if decay and state.decoupled:
            p = p - lr * decay * p
        updated.append(p - step)
    return updated


class AdamW:
    """Optimizer over named tensors; biases, norms and the bias table skip weight decay."""

    decoupled = True

    def __init__(self, named_params: Iterable[Tuple[str, Tensor]], lr: float = 1e-3, weight_decay: float = 0.0,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        named = list(named_params)
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        decay = [p.ndim > 1 and not n.endswith(NO_DECAY_SUFFIXES) for n, p in named]
        self.state = AdamWState.zeros_like([p.data for p in self.params], lr=lr, weight_decay=weight_decay,
                                           betas=betas, eps=eps, decoupled=self.decoupled, decay=decay)

    def step(self, lr: Optional[float] = None) -> None:
        if lr is not None:
            self.state.lr = lr
        new = adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state, self.names)
        for p, data in zip(self.params, new):
            p.data = data

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class Adam(AdamW):
    """Adam with coupled L2 decay; identical to AdamW when weight_decay is 0."""

    decoupled = False


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale all grads so their joint L2 norm is at most `max_norm`; returns the norm before clipping."""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if not np.isfinite(total):
        return total
    if total > max_norm > 0:
        factor = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return total
