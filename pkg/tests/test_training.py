"""Tests for losses, Adam and the training loop."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest
from pytest_mock import MockerFixture

from setnet.autodiff import Tape, Tensor, backward, ops
from setnet.config import GenSpec, ModelConfig, TrainConfig
from setnet.data import SetDataset, gen_normal_var, gen_toy_shapes
from setnet.errors import ConfigError, ContractError, DimensionError, DivergenceError
from setnet.models import build
from setnet.training import (
    CSV_HEADER,
    AdamState,
    EpochMetrics,
    adam_step,
    compute_loss,
    cross_entropy_loss,
    evaluate,
    layer_gradient_norms,
    loss_and_grads,
    mse_loss,
    train,
)


def normal_var(n_sets: int, seed: int, set_size: int = 20) -> SetDataset:
    return gen_normal_var(GenSpec(task="normal_var", n_sets=n_sets, set_size=set_size, seed=seed))


def small_model(**overrides: object) -> ModelConfig:
    base = {"family": "deep_sets_pp", "input_dim": 1, "encoder_depth": 2, "hidden_dim": 8, "decoder_widths": [8]}
    return ModelConfig(**{**base, **overrides})


def quick_train(**overrides: object) -> TrainConfig:
    return TrainConfig(**{"batch_size": 8, "epochs": 3, "learning_rate": 1e-2, **overrides})


class TestLosses:
    def test_mse(self) -> None:
        loss = mse_loss(Tensor([[1.0], [3.0]]), np.array([[0.0], [1.0]]))
        assert loss.item() == pytest.approx(2.5)

    def test_mse_shape_mismatch(self) -> None:
        with pytest.raises(DimensionError):
            mse_loss(Tensor([[1.0, 2.0]]), np.array([[1.0]]))

    def test_cross_entropy_matches_log_softmax(self) -> None:
        logits = np.array([[2.0, -1.0, 0.5], [0.0, 0.0, 3.0]])
        classes = np.array([[0], [1]])
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        expected = -(log_probs[0, 0] + log_probs[1, 1]) / 2
        assert cross_entropy_loss(Tensor(logits), classes).item() == pytest.approx(expected, rel=1e-12)

    def test_cross_entropy_stable_for_large_logits(self) -> None:
        loss = cross_entropy_loss(Tensor([[1000.0, 0.0]]), np.array([[0]]))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_cross_entropy_gradient_is_softmax_minus_onehot(self) -> None:
        logits = np.array([[0.3, -0.2, 1.1]])
        with Tape() as tape:
            t = Tensor(logits, requires_grad=True)
            loss = cross_entropy_loss(t, np.array([[2]]))
        grad = backward(tape, loss).of(t).data
        probs = np.exp(logits) / np.exp(logits).sum()
        np.testing.assert_allclose(grad, probs - np.array([[0.0, 0.0, 1.0]]), atol=1e-12)

    def test_cross_entropy_class_out_of_range(self) -> None:
        with pytest.raises(ContractError):
            cross_entropy_loss(Tensor([[0.0, 1.0]]), np.array([[2]]))


class TestAdam:
    def test_first_step_moves_by_learning_rate(self) -> None:
        config = TrainConfig(learning_rate=0.1)
        params = {"w": np.array([1.0, -1.0, 0.5])}
        grads = {"w": np.array([0.3, -2.0, 0.0])}
        updated, state = adam_step(params, grads, AdamState(), config)
        np.testing.assert_allclose(updated["w"], [0.9, -0.9, 0.5], atol=1e-6)
        assert state.step == 1

    def test_bias_correction_keeps_constant_gradient_step(self) -> None:
        config = TrainConfig(learning_rate=0.01)
        params, state = {"w": np.zeros(1)}, AdamState()
        for _ in range(5):
            params, state = adam_step(params, {"w": np.ones(1)}, state, config)
        np.testing.assert_allclose(params["w"], [-0.05], atol=1e-6)

    def test_non_finite_gradient_refused(self) -> None:
        state = AdamState()
        with pytest.raises(DivergenceError):
            adam_step({"w": np.zeros(2)}, {"w": np.array([np.inf, 0.0])}, state, TrainConfig())
        assert state.step == 0
        assert state.m == {}

    def test_gradient_shape_checked(self) -> None:
        with pytest.raises(DimensionError):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), TrainConfig())


    def test_single_step_lowers_loss(self) -> None:
        trials, lowered = 40, 0
        for seed in range(trials):
            model = build(small_model(seed=seed))
            ds = normal_var(8, seed=seed, set_size=10)
            before, grads = loss_and_grads(model, ds.batch(), ds.targets, "mse")
            step = TrainConfig(learning_rate=1e-4)
            updated, _ = adam_step(model.store.arrays(), grads.arrays(), AdamState(), step)
            model.store.assign(updated)
            after = compute_loss(model, ds.batch(), ds.targets, "mse").item()
            lowered += after < before
        assert lowered >= 0.95 * trials


class TestNormModes:
    @pytest.mark.parametrize("norm", ["layer_norm", "set_norm"])
    @pytest.mark.parametrize("family", ["deep_sets_pp", "set_transformer_pp"])
    def test_batch_agnostic_norms_ignore_mode(self, family: str, norm: str) -> None:
        extra = {"heads": 2, "inducing_points": 3} if family == "set_transformer_pp" else {}
        model = build(small_model(family=family, norm=norm, **extra))
        train_ds, test_ds = normal_var(24, seed=0), normal_var(10, seed=1)
        train(model, train_ds, test_ds, quick_train(epochs=1))
        batch, targets = test_ds.batch(), test_ds.targets
        in_train_mode = compute_loss(model, batch, targets, "mse", training=True).item()
        assert compute_loss(model, batch, targets, "mse", training=False).item() == in_train_mode


class TestGradientNorms:
    def test_norms_per_layer(self) -> None:
        model = build(small_model())
        grads = {spec.id: np.ones(spec.shape) for spec in model.parameter_registry()}
        norms = layer_gradient_norms(model, grads)
        sizes: dict[int, int] = {}
        for spec in model.parameter_registry():
            sizes[spec.layer_index] = sizes.get(spec.layer_index, 0) + int(np.prod(spec.shape))
        assert norms == pytest.approx({k: math.sqrt(v) for k, v in sizes.items()})

    def test_non_finite_becomes_inf(self) -> None:
        model = build(small_model())
        spec = model.parameter_registry()[0]
        norms = layer_gradient_norms(model, {spec.id: np.full(spec.shape, np.nan)})
        assert norms[spec.layer_index] == math.inf

    def test_loss_and_grads_cover_every_parameter(self) -> None:
        model = build(small_model())
        ds = normal_var(4, seed=0)
        value, grads = loss_and_grads(model, ds.batch(), ds.targets, "mse")
        assert value > 0
        assert set(grads) == {spec.id for spec in model.parameter_registry()}


class TestTrain:
    def test_history_and_csv(self, tmp_path: Path) -> None:
        model = build(small_model())
        result = train(model, normal_var(16, 0), normal_var(8, 1), quick_train())
        history = result.history
        assert [row.epoch for row in history.rows] == [1, 2, 3]
        assert not history.diverged
        path = tmp_path / "metrics.csv"
        history.write_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == CSV_HEADER
        assert len(lines) == 4
        assert all(row.wall_seconds == 0.0 for row in history.rows)

    def test_deterministic(self) -> None:
        runs = [
            train(build(small_model()), normal_var(16, 0), normal_var(8, 1), quick_train()).history.to_csv()
            for _ in range(2)
        ]
        assert runs[0] == runs[1]

    def test_loss_decreases(self) -> None:
        model = build(small_model())
        history = train(model, normal_var(32, 0), normal_var(16, 1), quick_train(epochs=8)).history
        assert history.rows[-1].train_loss < history.rows[0].train_loss

    def test_wall_time_opt_in(self) -> None:
        history = train(
            build(small_model()), normal_var(8, 0), normal_var(4, 1), quick_train(epochs=1, record_wall_time=True)
        ).history
        assert history.rows[0].wall_seconds > 0.0

    def test_on_epoch_callback(self, mocker: MockerFixture) -> None:
        callback = mocker.Mock()
        train(build(small_model()), normal_var(8, 0), normal_var(4, 1), quick_train(epochs=2), on_epoch=callback)
        assert callback.call_count == 2
        assert isinstance(callback.call_args.args[0], EpochMetrics)

    def test_divergence_truncates_history(self) -> None:
        result = train(
            build(small_model()), normal_var(8, 0), normal_var(4, 1), quick_train(divergence_threshold=1e-12)
        )
        assert result.history.diverged
        assert result.history.rows == []
        assert "epoch 1" in result.history.divergence_reason
        assert result.history.final_test_loss is None

    def test_loss_must_fit_dataset(self) -> None:
        with pytest.raises(ConfigError) as exc:
            train(build(small_model()), normal_var(8, 0), normal_var(4, 1), quick_train(loss="cross_entropy"))
        assert exc.value.field == "loss"

    def test_input_width_must_fit_model(self) -> None:
        with pytest.raises(DimensionError):
            train(build(small_model(input_dim=3)), normal_var(8, 0), normal_var(4, 1), quick_train())

    def test_feature_norm_model_evaluates_after_training(self) -> None:
        model = build(small_model(norm="feature_norm"))
        train_ds, test_ds = normal_var(16, 0), normal_var(8, 1)
        history = train(model, train_ds, test_ds, quick_train(epochs=1)).history
        assert history.rows[0].test_loss == pytest.approx(evaluate(model, test_ds, "mse"))

    def test_classification(self) -> None:
        spec = GenSpec(task="toy_shapes", n_sets=16, set_size=16, seed=0)
        config = small_model(input_dim=3, output_dim=4, task_head="classification", aggregation="max")
        history = train(
            build(config), gen_toy_shapes(spec), gen_toy_shapes(spec.model_copy(update={"seed": 1})),
            quick_train(loss="cross_entropy", epochs=2),
        ).history
        assert len(history.rows) == 2
        assert all(math.isfinite(row.test_loss) for row in history.rows)


class TestMomentFeatureModel:
    """A linear model over per-set (mean, variance) features can represent Normal Var exactly."""

    def test_reaches_near_zero_error(self) -> None:
        ds = normal_var(1000, seed=0)
        features = np.concatenate([ds.inputs.mean(axis=1), ds.inputs.var(axis=1)], axis=1)
        params = {"w": np.zeros((2, 1)), "b": np.zeros(1)}
        state, config = AdamState(), TrainConfig(learning_rate=0.02)
        for _ in range(5):
            for start in range(0, ds.n_sets, 8):
                rows = slice(start, start + 8)
                with Tape() as tape:
                    w = Tensor(params["w"], requires_grad=True, name="w")
                    b = Tensor(params["b"], requires_grad=True, name="b")
                    pred = ops.add(ops.matmul(ops.constant(features[rows]), w), b)
                    loss = mse_loss(pred, ds.targets[rows])
                params, state = adam_step(params, backward(tape, loss).arrays(), state, config)
        residual = features @ params["w"] + params["b"] - ds.targets
        assert float(np.mean(residual**2)) < 1e-3
