"""Normalization as standardization over 𝒮 followed by an affine transform over 𝒯.

Dimensions are named N (sets in the batch), M (elements of a set) and D
(features). 𝒮 lists the dimensions that keep separate statistics, so the
statistics are computed over the remaining ones; 𝒯 lists the dimensions along
which the learned scale and shift may vary.

    layer norm    𝒮 = {N, M}   𝒯 = {D}
    set norm      𝒮 = {N}      𝒯 = {D}
    feature norm  𝒮 = {D}      𝒯 = {D}
"""

from __future__ import annotations

import itertools
import logging
from collections.abc import Iterable
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from setnet.autodiff import SetBatch, Tensor
from setnet.autodiff import ops
from setnet.errors import ConfigError, DegenerateInputError, DimensionError, UninitializedStatisticsError
from setnet.parameters import Scope

logger = logging.getLogger(__name__)

Dim = Literal["N", "M", "D"]
DIMS: tuple[Dim, ...] = ("N", "M", "D")
AXIS = {"N": 0, "M": 1, "D": 2}

EPSILON = 1e-5
MOMENTUM = 0.1


def _dims(dims: Iterable[str]) -> frozenset[Dim]:
    out = frozenset(dims)
    unknown = out - set(DIMS)
    if unknown:
        raise DimensionError(f"unknown dimensions {sorted(unknown)}; use N, M, D")
    return out  # type: ignore[return-value]


def label(dims: Iterable[str]) -> str:
    """Render a dimension set in N, M, D order, e.g. '{N, D}'."""
    present = set(dims)
    return "{" + ", ".join(d for d in DIMS if d in present) + "}"


@dataclass(frozen=True)
class NormSetting:
    standardize_dims: frozenset[Dim]
    transform_dims: frozenset[Dim]

    @classmethod
    def of(cls, standardize: Iterable[str], transform: Iterable[str]) -> NormSetting:
        return cls(_dims(standardize), _dims(transform))


LAYER_NORM = NormSetting.of("NM", "D")
SET_NORM = NormSetting.of("N", "D")
FEATURE_NORM = NormSetting.of("D", "D")


def transform_shape(dims: Iterable[str], batch_shape: tuple[int, int, int]) -> tuple[int, int, int]:
    """Shape of γ/β for transform dims 𝒯: full size along 𝒯, 1 elsewhere."""
    present = _dims(dims)
    n, m, d = batch_shape
    return (
        n if "N" in present else 1,
        m if "M" in present else 1,
        d if "D" in present else 1,
    )


def standardize(a: SetBatch, dims: Iterable[str], epsilon: float = EPSILON) -> SetBatch:
    """(a − μ) / (σ + ε) with population statistics over valid elements.

    Statistics are shared across the dimensions not in `dims`; masked
    positions stay exactly 0. When M is kept, a group is one element position
    and a padded position has count 0; the guarded division keeps it at 0.
    When M is reduced, a group spans whole sets and an empty one raises
    DegenerateInputError (SetBatch already refuses a set with no valid element).
    """
    keep = _dims(dims)
    reduce_axes = tuple(AXIS[d] for d in DIMS if d not in keep)
    weights = np.broadcast_to(a.valid()[:, :, None], a.shape).astype(np.float64)
    counts = weights.sum(axis=reduce_axes, keepdims=True)
    if "M" not in keep and not counts.all():
        raise DegenerateInputError(f"empty statistics group for {label(keep)}")

    x = a.tensor
    w = ops.constant(weights)
    n = ops.constant(counts)
    mean = ops.div(ops.reduce_sum(ops.mul(x, w), axis=reduce_axes, keepdims=True), n)
    centered = ops.mul(ops.sub(x, mean), w)
    var = ops.div(ops.reduce_sum(ops.mul(centered, centered), axis=reduce_axes, keepdims=True), n)
    std = ops.sqrt(var)
    denom = ops.add(std, ops.constant(epsilon)) if epsilon else std
    return SetBatch(ops.div(centered, denom), a.mask)


def transform(a: SetBatch, dims: Iterable[str], gamma: Tensor, beta: Tensor) -> SetBatch:
    """ā ⊙ γ + β with parameters broadcast over the dimensions not in `dims`."""
    expected = transform_shape(dims, a.shape)
    for name, param in (("gamma", gamma), ("beta", beta)):
        padded = (1,) * (3 - param.ndim) + param.shape
        if padded != expected:
            raise DimensionError(f"{name} shape {param.shape} does not match 𝒯 shape {expected}")
    return a.with_tensor(ops.add(ops.mul(a.tensor, gamma), beta))


def layer_norm(a: SetBatch, gamma: Tensor, beta: Tensor, epsilon: float = EPSILON) -> SetBatch:
    return transform(standardize(a, LAYER_NORM.standardize_dims, epsilon), "D", gamma, beta)


def set_norm(a: SetBatch, gamma: Tensor, beta: Tensor, epsilon: float = EPSILON) -> SetBatch:
    """Standardize each set by one scalar mean/std over its valid elements and features."""
    valid = a.valid()
    data = a.tensor.data
    for n in range(a.n_sets):
        values = data[n][valid[n]]
        if np.ptp(values) == 0:
            logger.warning(
                "set %d is constant (%d valid element(s)); set norm output falls back to beta",
                n, int(valid[n].sum()),
            )
    return transform(standardize(a, SET_NORM.standardize_dims, epsilon), "D", gamma, beta)


@dataclass
class RunningStats:
    """Per-feature running mean/variance of a feature norm layer."""

    momentum: float = MOMENTUM
    mean: np.ndarray | None = None
    var: np.ndarray | None = None

    @property
    def initialized(self) -> bool:
        return self.mean is not None

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        if self.mean is None or self.var is None:
            self.mean, self.var = mean.copy(), var.copy()
            return
        self.mean = (1.0 - self.momentum) * self.mean + self.momentum * mean
        self.var = (1.0 - self.momentum) * self.var + self.momentum * var


def feature_norm(
    a: SetBatch,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    training: bool,
    epsilon: float = EPSILON,
) -> SetBatch:
    """Per-feature standardization over every valid element of the batch.

    Train mode uses (and records) batch statistics; eval mode uses the running
    statistics only, so each set's output is independent of its batch mates.
    """
    valid = a.valid()
    if training:
        total = int(valid.sum())
        if total < 2:
            raise DegenerateInputError("feature norm in train mode needs >= 2 valid elements")
        values = a.tensor.data[valid]
        stats.update(values.mean(axis=0), values.var(axis=0))
        standardized = standardize(a, FEATURE_NORM.standardize_dims, epsilon)
    else:
        if not stats.initialized:
            raise UninitializedStatisticsError("feature norm evaluated before any training step")
        mean = ops.constant(stats.mean)
        denom = ops.constant(np.sqrt(stats.var) + epsilon)
        standardized = a.with_tensor(ops.div(ops.sub(a.tensor, mean), denom))
    return transform(standardized, "D", gamma, beta)


NormKind = Literal["none", "layer_norm", "set_norm", "feature_norm", "generic"]


class NormLayer:
    """A normalization layer owning γ/β in a parameter store."""

    def __init__(
        self,
        scope: Scope,
        kind: NormKind,
        dim: int,
        epsilon: float = EPSILON,
        setting: NormSetting | None = None,
        batch_shape: tuple[int, int, int] | None = None,
    ) -> None:
        if epsilon <= 0:
            raise ConfigError("epsilon", f"norm epsilon must be positive, got {epsilon}")
        self.kind = kind
        self.epsilon = epsilon
        self.store = scope.store
        if kind == "generic":
            if setting is None or batch_shape is None:
                raise DimensionError("a generic norm needs a setting and a batch shape")
            shape = transform_shape(setting.transform_dims, batch_shape)
        else:
            setting = {"layer_norm": LAYER_NORM, "set_norm": SET_NORM, "feature_norm": FEATURE_NORM}[kind]
            shape = (dim,)
        self.setting = setting
        self.gamma = scope.constant(shape, 1.0, "gamma", "gamma")
        self.beta = scope.constant(shape, 0.0, "beta", "beta")
        self.running = RunningStats() if kind == "feature_norm" else None
        if self.running is not None:
            self.store.buffers[scope.prefix] = self.running

    def __call__(self, a: SetBatch, training: bool = True) -> SetBatch:
        gamma, beta = self.store[self.gamma], self.store[self.beta]
        if self.kind == "layer_norm":
            return layer_norm(a, gamma, beta, self.epsilon)
        if self.kind == "set_norm":
            return set_norm(a, gamma, beta, self.epsilon)
        if self.kind == "feature_norm":
            assert self.running is not None
            return feature_norm(a, gamma, beta, self.running, training, self.epsilon)
        standardized = standardize(a, self.setting.standardize_dims, self.epsilon)
        return transform(standardized, self.setting.transform_dims, gamma, beta)


def make_norm(scope: Scope, kind: str, dim: int) -> NormLayer | None:
    """Norm layer of the given kind, or None for "none"."""
    if kind == "none":
        return None
    return NormLayer(scope, kind, dim)  # type: ignore[arg-type]


def apply_norm(norm: NormLayer | None, a: SetBatch, training: bool) -> SetBatch:
    return a if norm is None else norm(a, training)


@dataclass(frozen=True)
class TransformCertificate:
    transform_dims: frozenset[Dim]
    equivariant: bool
    batch_agnostic: bool
    trials: int = field(default=32, compare=False)

    @property
    def label(self) -> str:
        return label(self.transform_dims)


def _non_identity_permutation(rng: np.random.Generator, size: int) -> np.ndarray:
    while True:
        perm = rng.permutation(size)
        if size < 2 or (perm != np.arange(size)).any():
            return perm


def certify_transform_setting(
    dims: Iterable[str],
    trials: int = 32,
    seed: int = 0,
    batch_shape: tuple[int, int, int] = (3, 4, 2),
    tolerance: float = 1e-12,
) -> TransformCertificate:
    """Randomized search for counterexamples to element/set permutation commutation.

    Parameters are drawn with distinct values along every dimension of 𝒯.
    """
    present = _dims(dims)
    shape = transform_shape(present, batch_shape)
    rng = np.random.default_rng(seed)
    n, m, _ = batch_shape
    equivariant = batch_agnostic = True

    for _ in range(trials):
        a = SetBatch.from_arrays(rng.standard_normal(batch_shape))
        gamma = Tensor(rng.standard_normal(shape) + 2.0)
        beta = Tensor(rng.standard_normal(shape))
        out = transform(a, present, gamma, beta)

        if equivariant:
            index = np.stack([_non_identity_permutation(rng, m) for _ in range(n)])
            moved = transform(a.take(index), present, gamma, beta)
            if np.abs(moved.tensor.data - out.take(index).tensor.data).max() > tolerance:
                equivariant = False
        if batch_agnostic:
            order = _non_identity_permutation(rng, n)
            moved = transform(a.take_sets(order), present, gamma, beta)
            if np.abs(moved.tensor.data - out.take_sets(order).tensor.data).max() > tolerance:
                batch_agnostic = False
        if not (equivariant or batch_agnostic):
            break

    return TransformCertificate(present, equivariant, batch_agnostic, trials)


def all_transform_settings() -> list[frozenset[Dim]]:
    """The 8 subsets of {N, M, D}, smallest first."""
    return [
        frozenset(combo)
        for r in range(len(DIMS) + 1)
        for combo in itertools.combinations(DIMS, r)
    ]
