"""Flat parameter registry with stable dotted ids."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, replace
from typing import Any, Literal

import numpy as np

from setnet.autodiff import Tensor
from setnet.errors import ContractError, DimensionError

Section = Literal["encoder", "aggregation", "decoder"]
ParamKind = Literal["weight", "bias", "gamma", "beta", "inducing"]


@dataclass(frozen=True)
class ParameterSpec:
    id: str
    shape: tuple[int, ...]
    layer_index: int
    section: Section
    kind: ParamKind


class ParameterStore:
    """Owns every trainable tensor of a model, in construction order.

    Layers keep only parameter ids and read the current value at forward time,
    so an optimizer step is a single `assign` between passes.
    """

    def __init__(self, rng: np.random.Generator) -> None:
        self._rng = rng
        self._specs: dict[str, ParameterSpec] = {}
        self._values: dict[str, Tensor] = {}
        # non-trainable state (feature norm running statistics), by owner id
        self.buffers: dict[str, Any] = {}

    def add(
        self,
        name: str,
        value: np.ndarray,
        layer_index: int,
        section: Section,
        kind: ParamKind,
    ) -> str:
        if name in self._specs:
            raise ContractError(f"duplicate parameter id '{name}'")
        self._specs[name] = ParameterSpec(name, tuple(value.shape), layer_index, section, kind)
        self._values[name] = Tensor(value, requires_grad=True, name=name)
        return name

    def uniform(self, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return self._rng.uniform(-bound, bound, size=shape)

    def normal(self, shape: tuple[int, ...], std: float) -> np.ndarray:
        return self._rng.standard_normal(size=shape) * std

    def __getitem__(self, name: str) -> Tensor:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._specs)

    def registry(self) -> list[ParameterSpec]:
        return list(self._specs.values())

    def spec(self, name: str) -> ParameterSpec:
        return self._specs[name]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.numpy() for name, t in self._values.items()}

    def assign(self, values: Mapping[str, np.ndarray]) -> None:
        """Replace parameter values; ids must exist and shapes must match."""
        for name, value in values.items():
            spec = self._specs.get(name)
            if spec is None:
                raise ContractError(f"unknown parameter id '{name}'")
            value = np.asarray(value, dtype=np.float64)
            if value.shape != spec.shape:
                raise DimensionError(f"{name}: expected shape {spec.shape}, got {value.shape}")
            self._values[name] = Tensor(value, requires_grad=True, name=name)

    def num_parameters(self) -> int:
        return sum(int(np.prod(s.shape)) for s in self._specs.values())


@dataclass(frozen=True)
class Scope:
    """Where a layer registers its parameters: id prefix, layer index, section."""

    store: ParameterStore
    prefix: str
    layer_index: int
    section: Section = "encoder"

    def child(self, name: str | int) -> Scope:
        prefix = f"{self.prefix}.{name}" if self.prefix else str(name)
        return replace(self, prefix=prefix)

    def at(self, layer_index: int, section: Section | None = None) -> Scope:
        return replace(self, layer_index=layer_index, section=section or self.section)

    def _id(self, leaf: str) -> str:
        return f"{self.prefix}.{leaf}" if self.prefix else leaf

    def weight(self, fan_in: int, fan_out: int, leaf: str = "weight", scale: float = 1.0) -> str:
        value = self.store.uniform(fan_in, (fan_in, fan_out)) * scale
        return self.store.add(self._id(leaf), value, self.layer_index, self.section, "weight")

    def bias(self, fan_in: int, size: int, leaf: str = "bias") -> str:
        value = self.store.uniform(fan_in, (size,))
        return self.store.add(self._id(leaf), value, self.layer_index, self.section, "bias")

    def constant(self, shape: tuple[int, ...], fill: float, leaf: str, kind: ParamKind) -> str:
        value = np.full(shape, fill, dtype=np.float64)
        return self.store.add(self._id(leaf), value, self.layer_index, self.section, kind)

    def inducing(self, count: int, dim: int, leaf: str = "inducing") -> str:
        value = self.store.normal((count, dim), std=1.0 / np.sqrt(dim))
        return self.store.add(self._id(leaf), value, self.layer_index, self.section, "inducing")
