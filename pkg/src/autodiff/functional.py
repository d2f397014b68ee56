"""
Differentiable operations.

Shape alignment is explicit: the only implicit broadcast is adding a tensor
whose shape equals the trailing dimensions of the other (bias addition).
"""

import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.autodiff.tensor import Function, Tensor
from src.core.errors import DataError, NumericError, ShapeError

GELU_COEF = 0.044715
GELU_SCALE = math.sqrt(2.0 / math.pi)


def _is_trailing(big: Tuple[int, ...], small: Tuple[int, ...]) -> bool:
    return len(small) == 0 or (len(small) <= len(big) and tuple(big[len(big) - len(small):]) == tuple(small))


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead))).reshape(shape)


# --- elementwise ---

class Add(Function):
    def forward(self, a, b):
        if a.shape != b.shape and not _is_trailing(a.shape, b.shape):
            raise ShapeError("add needs equal shapes or a trailing-dimension bias", [a.shape, b.shape])
        return a + b

    def backward(self, grad):
        a, b = self.inputs
        return grad, _reduce_to(grad, b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Mul(Function):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError("mul needs equal shapes", [a.shape, b.shape])
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Scale(Function):
    def forward(self, a, factor: float):
        self.factor = factor
        return a * factor

    def backward(self, grad):
        return (grad * self.factor,)


class Gelu(Function):
    """GELU, tanh form: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))."""

    def forward(self, x):
        self.x = x
        self.t = np.tanh(GELU_SCALE * (x + GELU_COEF * x ** 3))
        return 0.5 * x * (1.0 + self.t)

    def backward(self, grad):
        x, t = self.x, self.t
        dinner = GELU_SCALE * (1.0 + 3.0 * GELU_COEF * x ** 2)
        return (grad * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner),)


class DropPath(Function):
    """Per-sample residual branch scaling: x · keep[b] / keep_prob."""

    def forward(self, x, keep: np.ndarray, keep_prob: float):
        shape = (x.shape[0],) + (1,) * (x.ndim - 1)
        self.factor = (keep.astype(x.dtype) / keep_prob).reshape(shape)
        return x * self.factor

    def backward(self, grad):
        return (grad * self.factor,)


# --- linear algebra and reductions ---

class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
            raise ShapeError("matmul dimension mismatch", [a.shape, b.shape])
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        return np.matmul(grad, np.swapaxes(self.b, -1, -2)), np.matmul(np.swapaxes(self.a, -1, -2), grad)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.in_shape = a.shape
        self.axis = axis
        self.keepdims = keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            axes = self.axis if isinstance(self.axis, tuple) else (self.axis,)
            axes = tuple(ax % len(self.in_shape) for ax in axes)
            for ax in sorted(axes):
                grad = np.expand_dims(grad, ax)
        return (np.broadcast_to(grad, self.in_shape).copy(),)


# --- shape ---

class Reshape(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape to {tuple(shape)}", [a.shape])

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Transpose(Function):
    def forward(self, a, axes=None):
        self.axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
        if sorted(self.axes) != list(range(a.ndim)):
            raise ShapeError(f"transpose axes {self.axes} do not permute", [a.shape])
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    def forward(self, a, index):
        self.in_shape, self.index = a.shape, index
        return np.ascontiguousarray(a[index])

    def backward(self, grad):
        out = np.zeros(self.in_shape, dtype=grad.dtype)
        out[self.index] += grad
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        ref = arrays[0].shape
        for arr in arrays[1:]:
            if arr.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(arr.shape, ref)) if i != axis % len(ref)):
                raise ShapeError("concat shapes disagree off the concat axis", [a.shape for a in arrays])
        self.axis = axis
        self.splits = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class Roll(Function):
    def forward(self, a, shifts, axes):
        self.shifts, self.axes = tuple(shifts), tuple(axes)
        return np.roll(a, self.shifts, axis=self.axes)

    def backward(self, grad):
        return (np.roll(grad, tuple(-s for s in self.shifts), axis=self.axes),)


class Pad(Function):
    """Zero padding; `pad_width` is one (before, after) pair per axis."""

    def forward(self, a, pad_width):
        self.slices = tuple(slice(before, before + n) for (before, _), n in zip(pad_width, a.shape))
        return np.pad(a, pad_width)

    def backward(self, grad):
        return (np.ascontiguousarray(grad[self.slices]),)


class Take(Function):
    """Row gather: out[...] = table[index[...]]."""

    def forward(self, table, index: np.ndarray):
        self.index = index
        self.rows = table.shape[0]
        return table[index]

    def backward(self, grad):
        table = self.inputs[0]
        out = np.zeros(table.shape, dtype=grad.dtype)
        np.add.at(out, self.index, grad)
        return (out,)


# --- normalisation and probabilities ---

class Softmax(Function):
    def forward(self, x, axis=-1):
        if not np.all(np.isfinite(x)):
            raise NumericError("softmax received non-finite input")
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.y = e / e.sum(axis=axis, keepdims=True)
        self.axis = axis
        return self.y

    def backward(self, grad):
        y = self.y
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


class LayerNorm(Function):
    def forward(self, x, gamma, beta, eps=1e-5):
        if x.shape[-1] != gamma.shape[-1] or gamma.shape != beta.shape or gamma.ndim != 1:
            raise ShapeError("layer_norm parameters must match the last dimension", [x.shape, gamma.shape, beta.shape])
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered ** 2).mean(axis=-1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            self.rstd = 1.0 / np.sqrt(var + eps)
            self.xhat = np.where(np.isfinite(self.rstd), centered * self.rstd, 0.0)
        self.gamma = gamma
        return self.xhat * gamma + beta

    def backward(self, grad):
        lead = tuple(range(grad.ndim - 1))
        dgamma = (grad * self.xhat).sum(axis=lead)
        dbeta = grad.sum(axis=lead)
        dxhat = grad * self.gamma
        rstd = np.where(np.isfinite(self.rstd), self.rstd, 0.0)
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - self.xhat * (dxhat * self.xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta


class SoftmaxCrossEntropy(Function):
    """Mean of −log softmax(logits)[label] over rows whose label != ignore_index."""

    def forward(self, logits, labels: np.ndarray, ignore_index: Optional[int] = None):
        if logits.ndim != 2 or labels.shape != logits.shape[:1]:
            raise ShapeError("cross entropy needs logits [N, M] and labels [N]", [logits.shape, labels.shape])
        num_classes = logits.shape[1]
        valid = np.ones(labels.shape, dtype=bool) if ignore_index is None else labels != ignore_index
        picked = labels[valid]
        if picked.size == 0:
            raise DataError("cross entropy over an empty set of labelled samples")
        if np.any(picked < 0) or np.any(picked >= num_classes):
            bad = picked[(picked < 0) | (picked >= num_classes)][0]
            raise DataError(f"label {int(bad)} outside [0, {num_classes})")
        z = logits[valid]
        shifted = z - z.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - log_norm
        count = picked.size
        self.valid, self.picked, self.count = valid, picked, count
        self.probs = np.exp(log_probs)
        return np.asarray(-log_probs[np.arange(count), picked].sum() / count)

    def backward(self, grad):
        logits = self.inputs[0]
        d = self.probs.copy()
        d[np.arange(self.count), self.picked] -= 1.0
        out = np.zeros(logits.shape, dtype=d.dtype)
        out[self.valid] = d * (grad / self.count)
        return (out,)


# --- spatial resampling on [B, H, W, C] ---

class ResizeNearest(Function):
    def forward(self, x, factor: int):
        self.factor = factor
        return x.repeat(factor, axis=1).repeat(factor, axis=2)

    def backward(self, grad):
        b, h, w, c = grad.shape
        f = self.factor
        return (grad.reshape(b, h // f, f, w // f, f, c).sum(axis=(2, 4)),)


def bilinear_matrix(in_size: int, out_size: int, dtype=np.float64) -> np.ndarray:
    """Interpolation weights [out_size, in_size], half-pixel centres, edge clamped."""
    matrix = np.zeros((out_size, in_size), dtype=dtype)
    scale = in_size / out_size
    for i in range(out_size):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        matrix[i, i0] += 1.0 - frac
        matrix[i, i1] += frac
    return matrix


class ResizeBilinear(Function):
    def forward(self, x, out_h: int, out_w: int):
        self.ah = bilinear_matrix(x.shape[1], out_h, x.dtype)
        self.aw = bilinear_matrix(x.shape[2], out_w, x.dtype)
        return np.einsum("ph,bhwc,qw->bpqc", self.ah, x, self.aw, optimize=True)

    def backward(self, grad):
        return (np.einsum("ph,bpqc,qw->bhwc", self.ah, grad, self.aw, optimize=True),)


# --- public API ---

def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, Neg.apply(b))


def neg(a: Tensor) -> Tensor:
    return Neg.apply(a)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=factor)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """c[..., i, j] = Σ_k a[..., i, k]·b[..., k, j]; leading dimensions must agree."""
    return MatMul.apply(a, b)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(Sum.apply(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    return Transpose.apply(a, axes=axes)


def getitem(a: Tensor, index) -> Tensor:
    return GetItem.apply(a, index=index)


def concat(tensors: List[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def roll(a: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    """Cyclic shift along the given axes (numpy.roll semantics)."""
    return Roll.apply(a, shifts=shifts, axes=axes)


def pad(a: Tensor, pad_width: Sequence[Tuple[int, int]]) -> Tensor:
    return Pad.apply(a, pad_width=tuple(tuple(p) for p in pad_width))


def take(table: Tensor, index: np.ndarray) -> Tensor:
    return Take.apply(table, index=index)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x[..., in] @ weight[in, out] (+ bias[out])."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError("linear input does not match weight", [x.shape, weight.shape])
    lead = x.shape[:-1]
    out = matmul(reshape(x, (-1, x.shape[-1])), weight)
    if bias is not None:
        out = add(out, bias)
    return reshape(out, lead + (weight.shape[1],))


def drop_path(x: Tensor, keep: np.ndarray, keep_prob: float) -> Tensor:
    return DropPath.apply(x, keep=keep, keep_prob=keep_prob)


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: Optional[int] = None) -> Tensor:
    return SoftmaxCrossEntropy.apply(logits, labels=np.asarray(labels).astype(np.int64), ignore_index=ignore_index)


def resize_nearest(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    return ResizeNearest.apply(x, factor=factor)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    return ResizeBilinear.apply(x, out_h=out_h, out_w=out_w)


def conv3x3(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """'Same' 3×3 convolution on [B, H, W, Cin] with weight [9·Cin, Cout].

    Weight rows are ordered (dy, dx, cin) with dy, dx in {0, 1, 2}.
    """
    _, h, w, _ = x.shape
    padded = pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    taps = [getitem(padded, (slice(None), slice(dy, dy + h), slice(dx, dx + w), slice(None)))
            for dy in range(3) for dx in range(3)]
    return linear(concat(taps, axis=3), weight, bias)


def backward(loss: Tensor) -> None:
    loss.backward()
