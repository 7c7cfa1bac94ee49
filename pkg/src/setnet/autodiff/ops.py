"""Differentiable primitives.

Every primitive is a `Function` subclass with a numpy `forward` and a
`backward` that maps the upstream gradient to one gradient per input. The
functional wrappers at the bottom are the public API used by the layers.
"""

from __future__ import annotations

from collections.abc import Sequence
from typing import Any, ClassVar

import numpy as np

from setnet.autodiff.tape import Node, current_tape
from setnet.autodiff.tensor import Tensor
from setnet.errors import ContractError, DimensionError, NumericError

Axis = int | tuple[int, ...] | None


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out the dimensions numpy broadcasting added to reach `grad.shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axes(axis: Axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(out))


class Function:
    """Base class of a differentiable primitive."""

    name: ClassVar[str] = ""

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError

    def kink_state(self) -> np.ndarray | None:
        """Which linear piece the forward pass selected, for piecewise primitives."""
        return None

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs: Any) -> Tensor:
        for t in tensors:
            if np.isnan(t.data).any():
                raise NumericError(f"NaN input to {cls.name}")
        fn = cls()
        try:
            with np.errstate(all="ignore"):
                out_data = fn.forward(*(t.data for t in tensors), **kwargs)
        except ValueError as e:
            raise DimensionError(f"{cls.name}: {e}") from e
        requires_grad = any(t.requires_grad for t in tensors)
        out = Tensor._wrap(out_data, requires_grad=requires_grad)
        tape = current_tape()
        if requires_grad and tape is not None:
            tape.record(Node(fn, tensors, out))
        return out


class Add(Function):
    name = "add"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Sub(Function):
    name = "sub"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return unbroadcast(grad, self.shapes[0]), unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    name = "mul"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return unbroadcast(grad * self.b, self.a.shape), unbroadcast(grad * self.a, self.b.shape)


class Div(Function):
    """Elementwise a / b with x / 0 := 0 (value and gradient)."""

    name = "div"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        shape = np.broadcast_shapes(a.shape, b.shape)
        self.a, self.b = a, b
        self.nonzero = np.broadcast_to(b != 0, shape)
        self.inv = np.divide(1.0, np.broadcast_to(b, shape), out=np.zeros(shape), where=self.nonzero)
        return a * self.inv

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = grad * self.inv
        gb = -grad * self.a * self.inv * self.inv
        return unbroadcast(ga, self.a.shape), unbroadcast(gb, self.b.shape)


class Scale(Function):
    name = "scale"

    def forward(self, a: np.ndarray, factor: float = 1.0) -> np.ndarray:
        self.factor = float(factor)
        return a * self.factor

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * self.factor,)


class MatMul(Function):
    """Matrix product over the last two axes, batched over a leading axis."""

    name = "matmul"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.ndim < 2 or b.ndim < 2:
            raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        gb = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return unbroadcast(ga, self.a.shape), unbroadcast(gb, self.b.shape)


class Relu(Function):
    """max(x, 0); the derivative at 0 is 0."""

    name = "relu"

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.active = x > 0
        return np.where(self.active, x, 0.0)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * self.active,)

    def kink_state(self) -> np.ndarray:
        return self.active


class Sum(Function):
    name = "sum"

    def forward(self, x: np.ndarray, axis: Axis = None, keepdims: bool = False) -> np.ndarray:
        self.shape = x.shape
        self.axes = _normalize_axes(axis, x.ndim)
        self.keepdims = keepdims
        return x.sum(axis=self.axes, keepdims=keepdims)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad, self.shape),)


class Mean(Function):
    name = "mean"

    def forward(self, x: np.ndarray, axis: Axis = None, keepdims: bool = False) -> np.ndarray:
        self.shape = x.shape
        self.axes = _normalize_axes(axis, x.ndim)
        self.keepdims = keepdims
        self.count = int(np.prod([x.shape[a] for a in self.axes]))
        return x.mean(axis=self.axes, keepdims=keepdims)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad / self.count, self.shape),)


class Max(Function):
    """Max over one axis, ignoring masked-out positions.

    Ties route the gradient to the first arg-max.
    """

    name = "max"

    def forward(
        self,
        x: np.ndarray,
        axis: int = -1,
        mask: np.ndarray | None = None,
        keepdims: bool = False,
    ) -> np.ndarray:
        (self.axis,) = _normalize_axes(axis, x.ndim)
        self.shape = x.shape
        self.keepdims = keepdims
        candidates = x
        if mask is not None:
            valid = np.broadcast_to(mask, x.shape)
            if not valid.any(axis=self.axis).all():
                raise ContractError("max over a slice with no valid element")
            candidates = np.where(valid, x, -np.inf)
        self.index = np.argmax(candidates, axis=self.axis, keepdims=True)
        out = np.take_along_axis(x, self.index, axis=self.axis)
        return out if keepdims else np.squeeze(out, axis=self.axis)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        gx = np.zeros(self.shape)
        np.put_along_axis(gx, self.index, grad, axis=self.axis)
        return (gx,)

    def kink_state(self) -> np.ndarray:
        return self.index


class BroadcastTo(Function):
    name = "broadcast"

    def forward(self, x: np.ndarray, shape: Sequence[int] = ()) -> np.ndarray:
        self.shape = x.shape
        return np.array(np.broadcast_to(x, tuple(shape)))

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (unbroadcast(grad, self.shape),)


class Concat(Function):
    name = "concat"

    def forward(self, *xs: np.ndarray, axis: int = -1) -> np.ndarray:
        self.axis = axis
        self.splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return np.concatenate(xs, axis=axis)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, ...]:
        return tuple(np.split(grad, self.splits, axis=self.axis))


class Slice(Function):
    """Contiguous range [start, stop) along one axis."""

    name = "slice"

    def forward(self, x: np.ndarray, axis: int = -1, start: int = 0, stop: int | None = None) -> np.ndarray:
        self.shape = x.shape
        self.index = [slice(None)] * x.ndim
        self.index[axis] = slice(start, stop)
        self.index = tuple(self.index)
        return x[self.index].copy()

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        out = np.zeros(self.shape)
        out[self.index] = grad
        return (out,)


class Transpose(Function):
    """Axis permutation; by default swaps the last two axes."""

    name = "transpose"

    def forward(self, x: np.ndarray, axes: Sequence[int] | None = None) -> np.ndarray:
        if axes is None:
            axes = list(range(x.ndim))
            axes[-2], axes[-1] = axes[-1], axes[-2]
        self.axes = tuple(axes)
        return np.transpose(x, self.axes)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (np.transpose(grad, np.argsort(self.axes)),)


class ScaledSoftmax(Function):
    """softmax(scale * x) along `axis`; masked positions get probability 0."""

    name = "scaled_softmax"

    def forward(
        self,
        x: np.ndarray,
        axis: int = -1,
        scale: float = 1.0,
        mask: np.ndarray | None = None,
    ) -> np.ndarray:
        if x.shape[axis] < 1:
            raise DimensionError("softmax over an empty axis")
        self.axis = axis
        self.scale = float(scale)
        z = x * self.scale
        if mask is not None:
            valid = np.broadcast_to(mask, z.shape)
            if not valid.any(axis=axis).all():
                raise ContractError("softmax row with no valid position")
            z = np.where(valid, z, -np.inf)
        z = z - z.max(axis=axis, keepdims=True)
        e = np.exp(z)
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        s = self.out
        inner = (grad * s).sum(axis=self.axis, keepdims=True)
        return (self.scale * s * (grad - inner),)


class Sqrt(Function):
    """Square root; the derivative at 0 is taken as 0."""

    name = "sqrt"

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.out = np.sqrt(x)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        positive = self.out > 0
        denom = np.where(positive, 2.0 * self.out, 1.0)
        return (np.where(positive, grad / denom, 0.0),)


class Exp(Function):
    name = "exp"

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.out = np.exp(x)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * self.out,)


class Log(Function):
    name = "log"

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.x = x
        return np.log(x)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad / self.x,)


PRIMITIVES: dict[str, type[Function]] = {
    fn.name: fn
    for fn in (
        Add, Sub, Mul, Div, Scale, MatMul, Relu, Sum, Mean, Max,
        BroadcastTo, Concat, Slice, Transpose, ScaledSoftmax, Sqrt, Exp, Log,
    )
}


def primitive_forward(op: str, *inputs: Tensor, **kwargs: Any) -> Tensor:
    """Apply a primitive by name, recording it on the active tape."""
    fn = PRIMITIVES.get(op)
    if fn is None:
        raise ContractError(f"unknown primitive '{op}'")
    return fn.apply(*inputs, **kwargs)


def constant(data: Any) -> Tensor:
    return Tensor(data, requires_grad=False)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def div(a: Tensor, b: Tensor) -> Tensor:
    return Div.apply(a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=factor)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def sqrt(x: Tensor) -> Tensor:
    return Sqrt.apply(x)


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    return BroadcastTo.apply(x, shape=tuple(shape))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    return Concat.apply(*xs, axis=axis)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    return Slice.apply(x, axis=axis, start=start, stop=stop)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    return Transpose.apply(x, axes=axes)


def scaled_softmax(
    x: Tensor,
    axis: int = -1,
    scale: float = 1.0,
    mask: np.ndarray | None = None,
) -> Tensor:
    return ScaledSoftmax.apply(x, axis=axis, scale=scale, mask=mask)


def reduce_sum(
    x: Tensor,
    axis: Axis = None,
    keepdims: bool = False,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Sum over `axis`; positions where `mask` is False contribute nothing."""
    if mask is not None:
        x = mul(x, constant(np.asarray(mask, dtype=np.float64)))
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def reduce_mean(
    x: Tensor,
    axis: Axis = None,
    keepdims: bool = False,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Mean over `axis`, counting only valid positions when a mask is given."""
    if mask is None:
        return Mean.apply(x, axis=axis, keepdims=keepdims)
    weights = np.broadcast_to(np.asarray(mask, dtype=np.float64), x.shape)
    axes = _normalize_axes(axis, x.ndim)
    counts = weights.sum(axis=axes, keepdims=keepdims)
    if (counts == 0).any():
        raise ContractError("mean over a slice with no valid element")
    return div(reduce_sum(x, axis=axes, keepdims=keepdims, mask=weights), constant(counts))


def reduce_max(
    x: Tensor,
    axis: int = -1,
    keepdims: bool = False,
    mask: np.ndarray | None = None,
) -> Tensor:
    return Max.apply(x, axis=axis, mask=mask, keepdims=keepdims)
