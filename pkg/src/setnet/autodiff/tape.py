"""Define-by-run tape and reverse-mode gradient accumulation."""

from __future__ import annotations

import contextvars
from collections.abc import Iterator, Mapping
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from setnet.autodiff.tensor import Tensor
from setnet.errors import ContractError

if TYPE_CHECKING:
    from setnet.autodiff.ops import Function

_active_tape: contextvars.ContextVar[Tape | None] = contextvars.ContextVar(
    "setnet_active_tape", default=None
)


@dataclass(frozen=True)
class Node:
    """One recorded primitive application."""
    fn: Function
    inputs: tuple[Tensor, ...]
    output: Tensor


class Tape:
    """Ordered record of primitive applications (a Wengert list).

    A tape is rebuilt for every forward pass and belongs to a single thread:

        with Tape() as tape:
            loss = model_loss(...)
        grads = backward(tape, loss)
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._token: contextvars.Token | None = None

    def __enter__(self) -> Tape:
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc: object) -> None:
        if self._token is not None:
            _active_tape.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        node.output.node = node
        self.nodes.append(node)

    def owns(self, tensor: Tensor) -> bool:
        return tensor.node is not None and any(n is tensor.node for n in reversed(self.nodes))

    def kink_signature(self) -> list[np.ndarray]:
        """Activation patterns of every piecewise primitive on this tape.

        Two passes with equal signatures went through the same linear pieces of
        every relu and picked the same arg-max everywhere.
        """
        return [state for node in self.nodes if (state := node.fn.kink_state()) is not None]


def current_tape() -> Tape | None:
    return _active_tape.get()


class GradMap(Mapping[str, Tensor]):
    """Gradients of a scalar loss, keyed by parameter id (tensor name).

    Unnamed leaves are reachable through `of(tensor)`.
    """

    def __init__(self, by_id: dict[int, np.ndarray], leaves: dict[int, Tensor]) -> None:
        self._by_id = by_id
        self._names = {t.name: t.id for t in leaves.values() if t.name is not None}

    def __getitem__(self, name: str) -> Tensor:
        return Tensor._wrap(self._by_id[self._names[name]], requires_grad=False)

    def __iter__(self) -> Iterator[str]:
        return iter(self._names)

    def __len__(self) -> int:
        return len(self._names)

    def of(self, tensor: Tensor) -> Tensor:
        """Gradient with respect to any leaf that took part in the pass."""
        if tensor.id not in self._by_id:
            raise ContractError(f"no gradient recorded for {tensor!r}")
        return Tensor._wrap(self._by_id[tensor.id], requires_grad=False)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: self._by_id[i] for name, i in self._names.items()}


def backward(tape: Tape, loss: Tensor) -> GradMap:
    """Reverse-mode pass from a scalar loss over the nodes recorded on `tape`."""
    if loss.size != 1 or loss.ndim != 0:
        raise ContractError(f"loss must be a rank-0 scalar, got shape {loss.shape}")
    if not tape.owns(loss):
        raise ContractError("loss was not recorded on this tape")

    grads: dict[int, np.ndarray] = {loss.id: np.ones((), dtype=np.float64)}
    produced = {node.output.id for node in tape.nodes}
    leaves: dict[int, Tensor] = {}

    for node in reversed(tape.nodes):
        g = grads.pop(node.output.id, None)
        for inp in node.inputs:
            if inp.requires_grad and inp.id not in produced:
                leaves.setdefault(inp.id, inp)
        if g is None:
            continue
        input_grads = node.fn.backward(g)
        for inp, ig in zip(node.inputs, input_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp.id in grads:
                grads[inp.id] = grads[inp.id] + ig
            else:
                grads[inp.id] = ig

    by_id = {
        leaf_id: grads.get(leaf_id, np.zeros(leaf.shape, dtype=np.float64))
        for leaf_id, leaf in leaves.items()
    }
    return GradMap(by_id, leaves)
