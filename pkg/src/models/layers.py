"""
Module system and the basic layers the Swin model is assembled from.
"""

from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from scipy.stats import truncnorm

from src.autodiff import functional as F
from src.autodiff.tensor import Tensor, get_default_dtype, parameter
from src.core.errors import CheckpointError

INIT_STD = 0.02


def trunc_normal(shape: Tuple[int, ...], rng: np.random.Generator, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) truncated at ±2 std."""
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


class Module:
    """
    Base class for layers: parameters are `Tensor` attributes with
    requires_grad, sub-layers are `Module` attributes or `ModuleList`s.
    Names follow attribute paths, e.g. ``stages.0.blocks.1.attn.qkv.weight``.
    """

    def __init__(self):
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.named_children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            path = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path)

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        for _, module in self.named_modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def manual_seed(self, seed: int) -> None:
        """Reseed every stochastic-depth generator from one seed."""
        droppers = [m for _, m in self.named_modules() if isinstance(m, DropPath)]
        children = np.random.SeedSequence(seed).spawn(len(droppers))
        for module, child in zip(droppers, children):
            module.rng = np.random.default_rng(child)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> List[str]:
        """
        Copy arrays into parameters. Shape mismatches always fail; with
        strict, missing and unexpected names fail too. With strict off,
        mismatched-shape names are skipped and returned.
        """
        own = dict(self.named_parameters())
        diff: Dict[str, str] = {}
        skipped = []
        for name, p in own.items():
            if name not in state:
                if strict:
                    diff[name] = "missing from checkpoint"
                else:
                    skipped.append(name)
                continue
            if tuple(state[name].shape) != p.shape:
                reason = f"checkpoint {tuple(state[name].shape)} vs model {p.shape}"
                if strict:
                    diff[name] = reason
                else:
                    skipped.append(name)
        if strict:
            for name in state:
                if name not in own:
                    diff[name] = "not a model parameter"
        if diff:
            raise CheckpointError("checkpoint does not match the model", diff)
        for name, p in own.items():
            if name in state and name not in skipped:
                p.data = np.array(state[name], dtype=p.dtype)
                p.grad = None
        return skipped


class ModuleList(Module):
    def __init__(self, modules: List[Module]):
        super().__init__()
        for i, module in enumerate(modules):
            setattr(self, str(i), module)
        self._count = len(modules)

    def __len__(self) -> int:
        return self._count

    def __getitem__(self, index: int) -> Module:
        if not -self._count <= index < self._count:
            raise IndexError(index)
        return getattr(self, str(index % self._count))

    def __iter__(self) -> Iterator[Module]:
        return (self[i] for i in range(self._count))


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.weight = parameter(trunc_normal((in_features, out_features), rng))
        self.bias = parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng=rng)
        self.fc2 = Linear(hidden, dim, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class DropPath(Module):
    """Stochastic depth: drops a whole residual branch per sample while training."""

    def __init__(self, rate: float = 0.0):
        super().__init__()
        self.rate = rate
        self.rng = np.random.default_rng(0)

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.rate == 0.0:
            return x
        keep = self.rng.random(x.shape[0]) >= self.rate
        return F.drop_path(x, keep, 1.0 - self.rate)


def constant(array: np.ndarray) -> Tensor:
    """Non-trainable tensor in the default dtype."""
    return Tensor(np.asarray(array, dtype=get_default_dtype()))
