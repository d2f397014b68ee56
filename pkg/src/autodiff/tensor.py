"""
Dense tensor with reverse-mode automatic differentiation.

A `Tensor` wraps a numpy array. Every differentiable operation is a
`Function` subclass; applying one records the function as the creator of
its output so `backward()` can walk the graph in reverse topological order.
"""

from contextlib import contextmanager
from typing import Any, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.core.errors import UsageError

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype: Union[str, np.dtype]) -> None:
    """Switch the floating dtype used for new tensors (float64 or float32)."""
    global _DEFAULT_DTYPE
    resolved = np.dtype(dtype)
    if resolved not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise UsageError(f"Unsupported tensor dtype: {dtype}")
    _DEFAULT_DTYPE = resolved.type


def get_default_dtype() -> type:
    return _DEFAULT_DTYPE


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Function:
    """
    Base class for differentiable operations.

    `forward` receives the numpy arrays of the inputs; `backward` receives
    dL/d(output) and returns one array (or None) per input.
    """

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs: Any) -> "Tensor":
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=requires_grad, _creator=fn if requires_grad else None)


class Tensor:
    """
    Dense n-dimensional array with optional gradient tracking.

    Gradients accumulate across uses; call `zero_grad()` between steps.
    """

    def __init__(
        self,
        data: Union[np.ndarray, float, int, Sequence],
        requires_grad: bool = False,
        dtype: Optional[Union[str, np.dtype]] = None,
        _creator: Optional[Function] = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            array = np.asarray(data)
            if not np.issubdtype(array.dtype, np.floating):
                array = array.astype(_DEFAULT_DTYPE)
        else:
            array = np.asarray(data, dtype=dtype)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._creator = _creator

    # --- introspection ---

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._creator is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # --- autodiff ---

    def backward(self, retain_graph: bool = False) -> None:
        """
        Populate `.grad` of every requires_grad leaf reachable from this scalar.

        Raises:
            UsageError: If the tensor is not a scalar.
        """
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("backward() called on a tensor that does not require grad")

        order = self._topological_order()
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node._creator is None:
                if node.requires_grad:
                    node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            input_grads = node._creator.backward(grad)
            for inp, inp_grad in zip(node._creator.inputs, input_grads):
                if inp_grad is None or not inp.requires_grad:
                    continue
                if inp_grad.shape != inp.shape:
                    raise AssertionError(
                        f"{type(node._creator).__name__} returned grad {inp_grad.shape} for input {inp.shape}"
                    )
                key = id(inp)
                grads[key] = grads[key] + inp_grad if key in grads else inp_grad
            if not retain_graph:
                node._creator = None

    def _topological_order(self) -> List["Tensor"]:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._creator is not None:
                for inp in node._creator.inputs:
                    if inp.requires_grad and id(inp) not in visited:
                        stack.append((inp, False))
        return order

    # --- operators ---

    def __add__(self, other):
        return F.add(self, _wrap(other, self))

    def __radd__(self, other):
        return F.add(self, _wrap(other, self))

    def __sub__(self, other):
        return F.sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return F.add(F.neg(self), _wrap(other, self))

    def __neg__(self):
        return F.neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return F.mul(self, other)
        return F.scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("Division is only defined by a scalar")
        return F.scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return F.matmul(self, other)

    def __getitem__(self, index):
        return F.getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes or None)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def parameter(data: np.ndarray) -> Tensor:
    """Leaf tensor that requires grad, in the default dtype."""
    return Tensor(np.asarray(data, dtype=_DEFAULT_DTYPE), requires_grad=True)


from src.autodiff import functional as F  # noqa: E402
