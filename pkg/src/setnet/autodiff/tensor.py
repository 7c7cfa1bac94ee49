"""Immutable float64 tensors and zero-padded set batches."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

import numpy as np

from setnet.errors import ContractError, DimensionError

if TYPE_CHECKING:
    from setnet.autodiff.tape import Node

MAX_RANK = 3

_tensor_ids = itertools.count()


class Tensor:
    """A dense tensor of rank <= 3 holding row-major 64-bit floats.

    The underlying array is read-only, so a Tensor can be shared freely across
    threads. Gradients never live on the tensor; `backward` returns them in a
    `GradMap`.
    """

    __slots__ = ("data", "requires_grad", "name", "id", "node")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: str | None = None,
    ) -> None:
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
        arr.flags.writeable = False
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.name = name
        self.id = next(_tensor_ids)
        self.node: Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> Tensor:
        """Adopt a freshly computed array without copying it."""
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = requires_grad
        out.name = None
        out.id = next(_tensor_ids)
        out.node = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        """Return a writable copy of the values."""
        return np.array(self.data)

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single value, shape is {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        """Same values, cut from any recorded computation."""
        return Tensor._wrap(self.data, requires_grad=False)

    def __add__(self, other: Tensor) -> Tensor:
        from setnet.autodiff import ops

        return ops.add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        from setnet.autodiff import ops

        return ops.sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        from setnet.autodiff import ops

        return ops.mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        from setnet.autodiff import ops

        return ops.matmul(self, other)

    def __neg__(self) -> Tensor:
        from setnet.autodiff import ops

        return ops.scale(self, -1.0)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


@dataclass(frozen=True)
class SetBatch:
    """A batch of N zero-padded sets, each with up to M elements of D features.

    `mask[n, i]` is True when element i of set n is a real element. Padded
    positions always hold exactly 0.0.
    """

    tensor: Tensor
    mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.tensor.ndim != 3:
            raise DimensionError(f"SetBatch needs an N x M x D tensor, got shape {self.tensor.shape}")
        if self.mask is not None:
            if self.mask.shape != self.tensor.shape[:2]:
                raise DimensionError(
                    f"mask shape {self.mask.shape} does not match batch {self.tensor.shape[:2]}"
                )
            if not self.mask.any(axis=1).all():
                raise ContractError("every set needs at least one valid element")

    @classmethod
    def from_arrays(
        cls,
        data: Any,
        mask: Any = None,
        requires_grad: bool = False,
    ) -> SetBatch:
        """Build a batch from raw arrays, zeroing padded positions."""
        arr = np.array(data, dtype=np.float64)
        if arr.ndim != 3:
            raise DimensionError(f"SetBatch needs an N x M x D array, got shape {arr.shape}")
        mask_arr = None
        if mask is not None:
            mask_arr = np.array(mask, dtype=bool)
            if mask_arr.shape != arr.shape[:2]:
                raise DimensionError(
                    f"mask shape {mask_arr.shape} does not match batch {arr.shape[:2]}"
                )
            arr = np.where(mask_arr[:, :, None], arr, 0.0)
            mask_arr.flags.writeable = False
        return cls(Tensor(arr, requires_grad=requires_grad), mask_arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        n, m, d = self.tensor.shape
        return n, m, d

    @property
    def n_sets(self) -> int:
        return self.tensor.shape[0]

    @property
    def set_size(self) -> int:
        return self.tensor.shape[1]

    @property
    def dim(self) -> int:
        return self.tensor.shape[2]

    def valid(self) -> np.ndarray:
        """N x M boolean validity, all True when unmasked."""
        if self.mask is None:
            return np.ones(self.tensor.shape[:2], dtype=bool)
        return self.mask

    def counts(self) -> np.ndarray:
        """Number of valid elements per set."""
        return self.valid().sum(axis=1)

    def mask_tensor(self) -> Tensor | None:
        """Constant N x M x 1 float mask for multiplicative masking."""
        if self.mask is None:
            return None
        return Tensor(self.mask[:, :, None].astype(np.float64))

    def with_tensor(self, tensor: Tensor) -> SetBatch:
        """Same mask around a new activation tensor, padded rows zeroed."""
        from setnet.autodiff import ops

        if tensor.shape[:2] != self.tensor.shape[:2]:
            raise DimensionError(
                f"activation shape {tensor.shape} does not match batch {self.tensor.shape}"
            )
        mask = self.mask_tensor()
        if mask is not None:
            tensor = ops.mul(tensor, mask)
        return SetBatch(tensor, self.mask)

    def take(self, index: np.ndarray) -> SetBatch:
        """Reorder elements within each set: row n becomes `data[n, index[n]]`."""
        index = np.asarray(index)
        if index.shape != self.tensor.shape[:2]:
            raise DimensionError(f"index shape {index.shape} does not match {self.tensor.shape[:2]}")
        data = np.take_along_axis(self.tensor.data, index[:, :, None], axis=1)
        mask = None
        if self.mask is not None:
            mask = np.take_along_axis(self.mask, index, axis=1)
            mask.flags.writeable = False
        return SetBatch(Tensor(data, requires_grad=self.tensor.requires_grad), mask)

    def take_sets(self, order: np.ndarray) -> SetBatch:
        """Reorder the sets of the batch."""
        data = self.tensor.data[np.asarray(order)]
        mask = None if self.mask is None else self.mask[np.asarray(order)]
        return SetBatch(Tensor(data, requires_grad=self.tensor.requires_grad), mask)
