"""Losses, the Adam optimizer and the epoch loop."""

from __future__ import annotations

import logging
import math
import time
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from setnet.autodiff import GradMap, SetBatch, Tape, Tensor, backward
from setnet.autodiff import ops
from setnet.config import TrainConfig
from setnet.data import SetDataset
from setnet.errors import ConfigError, ContractError, DimensionError, DivergenceError, NumericError
from setnet.models import Model

logger = logging.getLogger(__name__)

CSV_HEADER = "epoch,train_loss,test_loss,wall_seconds,grad_norm_first,grad_norm_last"


def mse_loss(pred: Tensor, target: Tensor | np.ndarray) -> Tensor:
    """Mean over batch and output dims of the squared error."""
    target_t = target if isinstance(target, Tensor) else ops.constant(target)
    if pred.shape != target_t.shape:
        raise DimensionError(f"prediction shape {pred.shape} differs from target {target_t.shape}")
    diff = ops.sub(pred, target_t)
    return ops.reduce_mean(ops.mul(diff, diff))


def cross_entropy_loss(logits: Tensor, classes: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer class ids under softmax(logits)."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be N x C, got {logits.shape}")
    ids = np.asarray(classes).reshape(-1)
    n, n_classes = logits.shape
    if ids.shape[0] != n:
        raise DimensionError(f"{ids.shape[0]} class ids for {n} rows of logits")
    if (ids < 0).any() or (ids >= n_classes).any():
        raise ContractError(f"class ids must lie in [0, {n_classes})")

    shift = ops.constant(logits.data.max(axis=1, keepdims=True))
    z = ops.sub(logits, shift)
    log_norm = ops.log(ops.reduce_sum(ops.exp(z), axis=1, keepdims=True))
    one_hot = ops.constant(np.eye(n_classes)[ids.astype(np.int64)])
    picked = ops.reduce_sum(ops.mul(z, one_hot), axis=1, keepdims=True)
    return ops.reduce_mean(ops.sub(log_norm, picked))


def compute_loss(
    model: Model,
    batch: SetBatch,
    targets: np.ndarray,
    loss: str,
    training: bool = True,
) -> Tensor:
    pred = model.forward(batch, training)
    if loss == "cross_entropy":
        return cross_entropy_loss(pred, targets)
    return mse_loss(pred, np.asarray(targets, dtype=np.float64))


def loss_and_grads(
    model: Model,
    batch: SetBatch,
    targets: np.ndarray,
    loss: str,
) -> tuple[float, GradMap]:
    """One recorded forward pass and its reverse pass."""
    with Tape() as tape:
        value = compute_loss(model, batch, targets, loss, training=True)
    return value.item(), backward(tape, value)


def layer_gradient_norms(model: Model, grads: Mapping[str, np.ndarray]) -> dict[int, float]:
    """L2 norm over all parameters sharing a layer index; non-finite becomes +inf."""
    sums: dict[int, float] = {}
    for spec in model.parameter_registry():
        g = grads.get(spec.id)
        sq = 0.0 if g is None else float(np.sum(np.square(g)))
        sums[spec.layer_index] = sums.get(spec.layer_index, 0.0) + sq
    return {k: (math.sqrt(v) if math.isfinite(v) else math.inf) for k, v in sums.items()}


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam. A non-finite gradient refuses the step and leaves `state` untouched."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for '{name}'")

    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    updated: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else np.asarray(g)
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient shape {g.shape} differs from parameter {p.shape}")
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1.0 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        updated[name] = p - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        new_m[name], new_v[name] = m, v
    return updated, AdamState(t, new_m, new_v)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    test_loss: float
    wall_seconds: float
    grad_norm_first: float
    grad_norm_last: float

    def csv_row(self) -> str:
        values = (self.train_loss, self.test_loss, self.wall_seconds, self.grad_norm_first, self.grad_norm_last)
        return ",".join([str(self.epoch), *(repr(float(v)) for v in values)])


@dataclass
class MetricsHistory:
    rows: list[EpochMetrics] = field(default_factory=list)
    diverged: bool = False
    divergence_reason: str | None = None

    def to_csv(self) -> str:
        return "\n".join([CSV_HEADER, *(row.csv_row() for row in self.rows)]) + "\n"

    def write_csv(self, path: Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @property
    def final_test_loss(self) -> float | None:
        return self.rows[-1].test_loss if self.rows else None


@dataclass
class TrainResult:
    history: MetricsHistory
    model: Model


def evaluate(model: Model, dataset: SetDataset, loss: str, batch_size: int = 256) -> float:
    """Mean loss over the whole dataset with every norm in eval mode."""
    total = 0.0
    for lo in range(0, dataset.n_sets, batch_size):
        index = np.arange(lo, min(lo + batch_size, dataset.n_sets))
        value = compute_loss(model, dataset.batch(index), dataset.target_rows(index), loss, training=False)
        total += value.item() * len(index)
    return total / dataset.n_sets


def _check_compatible(model: Model, dataset: SetDataset, config: TrainConfig) -> None:
    if dataset.dim != model.config.input_dim:
        raise DimensionError(f"dataset has {dataset.dim} features, model takes {model.config.input_dim}")
    if dataset.classification != (config.loss == "cross_entropy"):
        kind = "classification" if dataset.classification else "regression"
        raise ConfigError("loss", f"{config.loss} does not fit a {kind} dataset")
    if not dataset.classification and dataset.n_targets != model.config.output_dim:
        raise DimensionError(f"dataset has {dataset.n_targets} targets, model outputs {model.config.output_dim}")


def train(
    model: Model,
    train_ds: SetDataset,
    test_ds: SetDataset,
    config: TrainConfig,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
) -> TrainResult:
    """Mini-batch Adam for `config.epochs` epochs, evaluating on the full test set each epoch.

    The model is updated in place. A non-finite loss, a loss above
    `divergence_threshold` or a non-finite gradient stops training with the
    history truncated and `diverged` set.
    """
    _check_compatible(model, train_ds, config)
    _check_compatible(model, test_ds, config)

    history = MetricsHistory()
    shuffle_rng = np.random.default_rng([config.seed, 1])
    state = AdamState()
    layers = model.encoder_layers()
    first, last = layers[0], layers[-1]

    def diverge(reason: str) -> TrainResult:
        history.diverged = True
        history.divergence_reason = reason
        logger.warning("training diverged: %s", reason)
        return TrainResult(history, model)

    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = shuffle_rng.permutation(train_ds.n_sets)
        total = 0.0
        norms: dict[int, float] = {}
        for lo in range(0, train_ds.n_sets, config.batch_size):
            index = order[lo:lo + config.batch_size]
            try:
                value, grads = loss_and_grads(
                    model, train_ds.batch(index), train_ds.target_rows(index), config.loss
                )
            except NumericError as e:
                return diverge(f"epoch {epoch}: {e}")
            if not math.isfinite(value) or value > config.divergence_threshold:
                return diverge(f"epoch {epoch}: training loss {value!r}")
            grad_arrays = grads.arrays()
            norms = layer_gradient_norms(model, grad_arrays)
            if state.step % config.grad_log_every == 0:
                logger.debug(
                    "step %d loss %.6g |grad| first %.3e last %.3e",
                    state.step, value, norms.get(first, 0.0), norms.get(last, 0.0),
                )
            try:
                params, state = adam_step(model.store.arrays(), grad_arrays, state, config)
            except DivergenceError as e:
                return diverge(f"epoch {epoch}: {e}")
            model.store.assign(params)
            total += value * len(index)

        train_loss = total / train_ds.n_sets
        try:
            test_loss = evaluate(model, test_ds, config.loss)
        except NumericError:
            test_loss = math.nan
        if not math.isfinite(test_loss) or test_loss > config.divergence_threshold:
            return diverge(f"epoch {epoch}: test loss {test_loss!r}")

        row = EpochMetrics(
            epoch=epoch,
            train_loss=train_loss,
            test_loss=test_loss,
            wall_seconds=time.perf_counter() - start if config.record_wall_time else 0.0,
            grad_norm_first=norms.get(first, 0.0),
            grad_norm_last=norms.get(last, 0.0),
        )
        history.rows.append(row)
        logger.info("epoch %d train %.6f test %.6f", epoch, train_loss, test_loss)
        if on_epoch is not None:
            on_epoch(row)

    return TrainResult(history, model)
