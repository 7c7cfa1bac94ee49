"""Tests for tensors, the tape and the differentiable primitives."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from setnet.autodiff import SetBatch, Tape, Tensor, backward, current_tape, primitive_forward
from setnet.autodiff import ops
from setnet.errors import ContractError, DimensionError, NumericError


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(x)
    for i in range(x.size):
        plus, minus = x.copy(), x.copy()
        plus.flat[i] += h
        minus.flat[i] -= h
        grad.flat[i] = (f(plus) - f(minus)) / (2 * h)
    return grad


def analytic_grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    with Tape() as tape:
        t = Tensor(x, requires_grad=True)
        loss = f(t)
    return backward(tape, loss).of(t).data


def weighted(f: Callable[[Tensor], Tensor], weights: np.ndarray) -> Callable[[Tensor], Tensor]:
    """Scalar loss sum(f(x) * weights)."""
    return lambda t: ops.reduce_sum(ops.mul(f(t), ops.constant(weights)))


def assert_grad_matches(f: Callable[[Tensor], Tensor], x: np.ndarray, rtol: float = 1e-6) -> None:
    expected = numeric_grad(lambda a: f(Tensor(a)).item(), x)
    np.testing.assert_allclose(analytic_grad(f, x), expected, rtol=rtol, atol=1e-8)


UNARY: dict[str, tuple[Callable[[Tensor], Tensor], Callable[[np.random.Generator], np.ndarray]]] = {
    "relu": (ops.relu, lambda rng: np.sign(rng.standard_normal((2, 3, 4))) * rng.uniform(0.1, 1.0, (2, 3, 4))),
    "sqrt": (ops.sqrt, lambda rng: rng.uniform(0.5, 2.0, (2, 3))),
    "exp": (ops.exp, lambda rng: rng.standard_normal((3, 4))),
    "log": (ops.log, lambda rng: rng.uniform(0.5, 2.0, (4,))),
    "scale": (lambda t: ops.scale(t, -2.5), lambda rng: rng.standard_normal((2, 2, 2))),
    "transpose": (ops.transpose, lambda rng: rng.standard_normal((2, 3, 4))),
    "permute_axes": (lambda t: ops.transpose(t, (2, 0, 1)), lambda rng: rng.standard_normal((2, 3, 4))),
    "broadcast": (lambda t: ops.broadcast_to(t, (3, 2, 4)), lambda rng: rng.standard_normal((2, 1))),
    "softmax": (
        lambda t: ops.scaled_softmax(t, axis=-1, scale=0.7),
        lambda rng: rng.standard_normal((2, 3, 5)),
    ),
    "mean_axis1": (lambda t: ops.reduce_mean(t, axis=1, keepdims=True), lambda rng: rng.standard_normal((2, 4, 3))),
    "sum_axes": (lambda t: ops.reduce_sum(t, axis=(0, 2)), lambda rng: rng.standard_normal((2, 4, 3))),
    "max_axis1": (lambda t: ops.reduce_max(t, axis=1), lambda rng: rng.permutation(24).reshape(2, 4, 3) * 0.5),
}


class TestTensor:
    def test_data_is_read_only(self) -> None:
        t = Tensor([[1.0, 2.0]])
        with pytest.raises(ValueError):
            t.data[0, 0] = 5.0

    def test_numpy_returns_writable_copy(self) -> None:
        t = Tensor([1.0, 2.0])
        copy = t.numpy()
        copy[0] = 9.0
        assert t.data[0] == 1.0

    def test_rank_above_three_rejected(self) -> None:
        with pytest.raises(DimensionError):
            Tensor(np.zeros((1, 1, 1, 1)))

    def test_item_needs_single_value(self) -> None:
        assert Tensor(3.5).item() == 3.5
        with pytest.raises(ContractError):
            Tensor([1.0, 2.0]).item()

    def test_operators_dispatch_to_primitives(self) -> None:
        a, b = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
        np.testing.assert_array_equal((a + b).data, [4.0, 7.0])
        np.testing.assert_array_equal((a - b).data, [-2.0, -3.0])
        np.testing.assert_array_equal((a * b).data, [3.0, 10.0])
        np.testing.assert_array_equal((-a).data, [-1.0, -2.0])

    def test_detach_cuts_the_graph(self) -> None:
        with Tape() as tape:
            x = Tensor([2.0], requires_grad=True)
            y = ops.mul(x, x).detach()
            loss = ops.reduce_sum(ops.mul(ops.mul(x, x), y))
        # d/dx (x^2 * c) with c = 4 held constant
        np.testing.assert_allclose(backward(tape, loss).of(x).data, [16.0])


class TestSetBatch:
    def test_from_arrays_zeroes_padding(self) -> None:
        data = np.ones((2, 3, 2))
        mask = np.array([[True, True, False], [True, False, False]])
        batch = SetBatch.from_arrays(data, mask)
        assert batch.tensor.data[0, 2].tolist() == [0.0, 0.0]
        assert batch.counts().tolist() == [2, 1]

    def test_empty_set_rejected(self) -> None:
        with pytest.raises(ContractError):
            SetBatch.from_arrays(np.ones((2, 2, 1)), [[True, True], [False, False]])

    def test_mask_shape_checked(self) -> None:
        with pytest.raises(DimensionError):
            SetBatch.from_arrays(np.ones((2, 2, 1)), np.ones((2, 3), dtype=bool))

    def test_rank_checked(self) -> None:
        with pytest.raises(DimensionError):
            SetBatch.from_arrays(np.ones((2, 2)))

    def test_take_reorders_elements_and_mask(self) -> None:
        data = np.arange(6, dtype=float).reshape(1, 3, 2)
        batch = SetBatch.from_arrays(data, [[True, True, False]])
        moved = batch.take(np.array([[2, 0, 1]]))
        assert moved.mask.tolist() == [[False, True, True]]
        np.testing.assert_array_equal(moved.tensor.data[0, 1], [0.0, 1.0])

    def test_with_tensor_keeps_padding_zero(self) -> None:
        batch = SetBatch.from_arrays(np.ones((1, 2, 1)), [[True, False]])
        out = batch.with_tensor(Tensor(np.full((1, 2, 1), 7.0)))
        assert out.tensor.data[0, :, 0].tolist() == [7.0, 0.0]


class TestTape:
    def test_current_tape_is_scoped(self) -> None:
        assert current_tape() is None
        with Tape() as tape:
            assert current_tape() is tape
        assert current_tape() is None

    def test_nothing_recorded_without_grad(self) -> None:
        with Tape() as tape:
            ops.add(Tensor([1.0]), Tensor([2.0]))
        assert len(tape) == 0

    def test_backward_needs_scalar_loss(self) -> None:
        with Tape() as tape:
            x = Tensor([1.0, 2.0], requires_grad=True)
            y = ops.mul(x, x)
        with pytest.raises(ContractError):
            backward(tape, y)

    def test_backward_needs_loss_from_this_tape(self) -> None:
        with Tape():
            x = Tensor([1.0, 2.0], requires_grad=True)
            loss = ops.reduce_sum(x * x)
        with pytest.raises(ContractError):
            backward(Tape(), loss)

    def test_gradients_keyed_by_parameter_name(self) -> None:
        with Tape() as tape:
            w = Tensor([[1.0], [2.0]], requires_grad=True, name="layer.weight")
            loss = ops.reduce_sum(ops.matmul(Tensor([[3.0, 4.0]]), w))
        grads = backward(tape, loss)
        assert list(grads) == ["layer.weight"]
        np.testing.assert_array_equal(grads["layer.weight"].data, [[3.0], [4.0]])

    def test_unused_leaf_gets_zero_gradient(self) -> None:
        with Tape() as tape:
            x = Tensor([1.0, 2.0], requires_grad=True, name="x")
            y = Tensor([5.0], requires_grad=True, name="y")
            loss = ops.reduce_sum(ops.mul(x, ops.constant([0.0, 0.0])))
            ops.add(y, y)
        grads = backward(tape, loss)
        np.testing.assert_array_equal(grads["x"].data, [0.0, 0.0])
        np.testing.assert_array_equal(grads["y"].data, [0.0])

    def test_reused_tensor_accumulates(self) -> None:
        with Tape() as tape:
            x = Tensor([3.0], requires_grad=True)
            loss = ops.reduce_sum(ops.add(ops.mul(x, x), x))
        np.testing.assert_allclose(backward(tape, loss).of(x).data, [7.0])

    def test_kink_signature_tracks_relu_pattern(self) -> None:
        def signature(values: list[float]) -> list[np.ndarray]:
            with Tape() as tape:
                ops.relu(Tensor(values, requires_grad=True))
            return tape.kink_signature()

        assert np.array_equal(signature([1.0, -1.0])[0], signature([2.0, -3.0])[0])
        assert not np.array_equal(signature([1.0, -1.0])[0], signature([1.0, 1.0])[0])


class TestPrimitives:
    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_unary_gradient(self, name: str) -> None:
        fn, sample = UNARY[name]
        rng = np.random.default_rng(0)
        x = sample(rng)
        weights = rng.standard_normal(fn(Tensor(x)).shape)
        assert_grad_matches(weighted(fn, weights), x)

    @pytest.mark.parametrize(
        ("name", "shape_a", "shape_b"),
        [
            ("add", (2, 3, 4), (4,)),
            ("sub", (2, 1, 4), (2, 3, 1)),
            ("mul", (3, 4), (1, 4)),
            ("div", (2, 3), (2, 3)),
            ("matmul", (2, 3, 4), (4, 5)),
            ("matmul", (2, 3, 4), (2, 4, 2)),
        ],
    )
    def test_binary_gradient(self, name: str, shape_a: tuple[int, ...], shape_b: tuple[int, ...]) -> None:
        rng = np.random.default_rng(1)
        a = rng.standard_normal(shape_a)
        b = rng.uniform(0.5, 2.0, shape_b) if name == "div" else rng.standard_normal(shape_b)
        fn = getattr(ops, name)
        weights = rng.standard_normal(fn(Tensor(a), Tensor(b)).shape)
        assert_grad_matches(weighted(lambda t: fn(t, Tensor(b)), weights), a)
        assert_grad_matches(weighted(lambda t: fn(Tensor(a), t), weights), b)

    def test_concat_gradient(self) -> None:
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((2, 3, 2)), rng.standard_normal((2, 3, 3))
        weights = rng.standard_normal((2, 3, 5))
        assert_grad_matches(weighted(lambda t: ops.concat([t, Tensor(b)]), weights), a)

    def test_slice_gradient(self) -> None:
        rng = np.random.default_rng(3)
        a = rng.standard_normal((2, 3, 6))
        weights = rng.standard_normal((2, 3, 2))
        assert_grad_matches(weighted(lambda t: ops.slice_axis(t, 2, 4), weights), a)
        np.testing.assert_array_equal(ops.slice_axis(Tensor(a), 2, 4).data, a[..., 2:4])

    def test_masked_mean_ignores_padding(self) -> None:
        x = Tensor(np.array([[[1.0], [3.0], [100.0]]]))
        mask = np.array([[[True], [True], [False]]])
        assert ops.reduce_mean(x, axis=1, mask=mask).data.tolist() == [[2.0]]

    def test_masked_mean_of_empty_slice_rejected(self) -> None:
        with pytest.raises(ContractError):
            ops.reduce_mean(Tensor(np.ones((1, 2, 1))), axis=1, mask=np.zeros((1, 2, 1), dtype=bool))

    def test_max_routes_gradient_to_first_argmax(self) -> None:
        x = np.array([[2.0, 5.0, 5.0, 1.0]])
        grad = analytic_grad(lambda t: ops.reduce_sum(ops.reduce_max(t, axis=1)), x)
        assert grad.tolist() == [[0.0, 1.0, 0.0, 0.0]]

    def test_masked_max_skips_padding(self) -> None:
        x = Tensor(np.array([[[1.0], [9.0], [4.0]]]))
        mask = np.array([[[True], [False], [True]]])
        assert ops.reduce_max(x, axis=1, mask=mask).data.tolist() == [[4.0]]

    def test_masked_softmax_gives_zero_weight(self) -> None:
        logits = Tensor(np.array([[[1.0, 2.0, 50.0]]]))
        probs = ops.scaled_softmax(logits, mask=np.array([[[True, True, False]]])).data
        assert probs[0, 0, 2] == 0.0
        assert probs.sum() == pytest.approx(1.0)

    def test_division_by_zero_is_zero(self) -> None:
        a = np.array([1.0, 2.0])
        b = Tensor(np.array([0.0, 4.0]))
        assert ops.div(Tensor(a), b).data.tolist() == [0.0, 0.5]
        grad = analytic_grad(lambda t: ops.reduce_sum(ops.div(t, b)), a)
        assert grad.tolist() == [0.0, 0.25]

    def test_sqrt_gradient_at_zero_is_zero(self) -> None:
        grad = analytic_grad(lambda t: ops.reduce_sum(ops.sqrt(t)), np.array([0.0, 4.0]))
        assert grad.tolist() == [0.0, 0.25]

    def test_nan_input_raises(self) -> None:
        with pytest.raises(NumericError):
            ops.relu(Tensor([np.nan]))

    def test_shape_mismatch_raises_dimension_error(self) -> None:
        with pytest.raises(DimensionError):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_primitive_forward_by_name(self) -> None:
        out = primitive_forward("mul", Tensor([2.0]), Tensor([3.0]))
        assert out.data.tolist() == [6.0]
        with pytest.raises(ContractError):
            primitive_forward("conv", Tensor([1.0]))


class TestGradientProperties:
    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=2**31 - 1))
    def test_linear_relu_chain_matches_closed_form(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((3, 2))
        x = rng.standard_normal((2, 4, 3))

        def f(t: Tensor) -> Tensor:
            return ops.reduce_sum(ops.relu(ops.matmul(Tensor(x), t)))

        with Tape() as tape:
            leaf = Tensor(w, requires_grad=True)
            loss = f(leaf)
        grad = backward(tape, loss).of(leaf).data
        expected = np.einsum("nmi,nmj->ij", x, (x @ w > 0).astype(float))
        np.testing.assert_allclose(grad, expected, rtol=1e-12, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=2**31 - 1))
    def test_sum_gradient_is_ones(self, seed: int) -> None:
        x = np.random.default_rng(seed).standard_normal((2, 3, 4))
        grad = analytic_grad(lambda t: ops.reduce_sum(t), x)
        np.testing.assert_array_equal(grad, np.ones_like(x))
