"""Synthetic set datasets and the SETD binary file format."""

from __future__ import annotations

import json
import struct
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from setnet.autodiff import SetBatch
from setnet.config import GenSpec, canonical_json
from setnet.errors import (
    BadMagicError,
    ConfigError,
    ContractError,
    DatasetParseError,
    DimensionError,
    TruncationError,
    VersionMismatchError,
)

TOY_SHAPES = ("sphere", "cube", "two_cluster", "line")


@dataclass(frozen=True)
class SetDataset:
    """N sets of M elements with D features, plus N x T targets.

    Classification targets are integer class ids with T = 1.
    """

    inputs: np.ndarray
    targets: np.ndarray
    metadata: dict[str, Any] = field(default_factory=dict)
    classification: bool = False

    def __post_init__(self) -> None:
        if self.inputs.ndim != 3 or min(self.inputs.shape) < 1:
            raise DimensionError(f"inputs must be N x M x D with N, M, D >= 1, got {self.inputs.shape}")
        if self.targets.ndim != 2 or self.targets.shape[0] != self.inputs.shape[0]:
            raise DimensionError(f"targets must be N x T, got {self.targets.shape}")
        if self.classification:
            n_classes = int(self.metadata.get("n_classes", 0))
            if self.targets.shape[1] != 1:
                raise DimensionError("classification targets hold one class id per set")
            if (self.targets < 0).any() or (self.targets >= n_classes).any():
                raise ContractError(f"class ids must lie in [0, {n_classes})")

    @property
    def n_sets(self) -> int:
        return self.inputs.shape[0]

    @property
    def set_size(self) -> int:
        return self.inputs.shape[1]

    @property
    def dim(self) -> int:
        return self.inputs.shape[2]

    @property
    def n_targets(self) -> int:
        return self.targets.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.metadata.get("n_classes", 0))

    def batch(self, index: np.ndarray | None = None) -> SetBatch:
        data = self.inputs if index is None else self.inputs[index]
        return SetBatch.from_arrays(data)

    def target_rows(self, index: np.ndarray | None = None) -> np.ndarray:
        return self.targets if index is None else self.targets[index]


def _substream(seed: int, index: int) -> np.random.Generator:
    """Independent PCG64 stream for set `index`; pure function of (seed, index)."""
    return np.random.default_rng([seed, index])


def empirical_variance(values: np.ndarray) -> float:
    """Population variance of a set's values."""
    return float(np.var(np.ascontiguousarray(values).reshape(-1)))


def gen_normal_var(spec: GenSpec) -> SetDataset:
    """Sets of Gaussian samples; the target is their population variance."""
    if spec.task != "normal_var":
        raise ConfigError("task", f"expected normal_var, got {spec.task}")
    if spec.set_size < 2:
        raise ConfigError("set_size", "variance needs at least 2 samples per set")
    inputs = np.empty((spec.n_sets, spec.set_size, 1), dtype=np.float64)
    targets = np.empty((spec.n_sets, 1), dtype=np.float64)
    for i in range(spec.n_sets):
        rng = _substream(spec.seed, i)
        mean = rng.uniform(*spec.mean_range)
        variance = rng.uniform(*spec.variance_range)
        samples = rng.normal(mean, np.sqrt(variance), size=spec.set_size)
        inputs[i, :, 0] = samples
        targets[i, 0] = empirical_variance(inputs[i, :, 0])
    return SetDataset(inputs, targets, _metadata(spec))


def oracle_normal_var(dataset: SetDataset) -> np.ndarray:
    """Exact solution of the task: each set's own empirical variance."""
    return np.array([[empirical_variance(dataset.inputs[i, :, 0])] for i in range(dataset.n_sets)])


def _sphere(rng: np.random.Generator, size: int) -> np.ndarray:
    points = rng.standard_normal((size, 3))
    return points / np.linalg.norm(points, axis=1, keepdims=True)


def _cube(rng: np.random.Generator, size: int) -> np.ndarray:
    points = rng.uniform(-1.0, 1.0, (size, 3))
    face_axis = rng.integers(0, 3, size)
    points[np.arange(size), face_axis] = rng.choice([-1.0, 1.0], size)
    return points


def _two_cluster(rng: np.random.Generator, size: int) -> np.ndarray:
    centers = np.array([[-1.5, 0.0, 0.0], [1.5, 0.0, 0.0]])
    which = rng.integers(0, 2, size)
    return centers[which] + 0.3 * rng.standard_normal((size, 3))


def _line(rng: np.random.Generator, size: int) -> np.ndarray:
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    return rng.uniform(-1.0, 1.0, (size, 1)) * direction


_SHAPE_SAMPLERS: dict[str, Callable[[np.random.Generator, int], np.ndarray]] = {
    "sphere": _sphere,
    "cube": _cube,
    "two_cluster": _two_cluster,
    "line": _line,
}


def _standardize_axes(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=0)
    std = centered.std(axis=0)
    return centered / np.where(std > 0, std, 1.0)


def gen_toy_shapes(spec: GenSpec) -> SetDataset:
    """Point clouds in R^3 sampled from simple shapes; label i % n_classes."""
    if spec.task != "toy_shapes":
        raise ConfigError("task", f"expected toy_shapes, got {spec.task}")
    if spec.n_classes > len(TOY_SHAPES):
        raise ConfigError("n_classes", f"at most {len(TOY_SHAPES)} shape classes, got {spec.n_classes}")
    inputs = np.empty((spec.n_sets, spec.set_size, 3), dtype=np.float64)
    targets = np.empty((spec.n_sets, 1), dtype=np.int64)
    for i in range(spec.n_sets):
        rng = _substream(spec.seed, i)
        label = i % spec.n_classes
        points = _SHAPE_SAMPLERS[TOY_SHAPES[label]](rng, spec.set_size)
        points = points + spec.noise_scale * rng.standard_normal(points.shape)
        inputs[i] = _standardize_axes(points)
        targets[i, 0] = label
    return SetDataset(inputs, targets, _metadata(spec), classification=True)


def generate(spec: GenSpec) -> SetDataset:
    return gen_normal_var(spec) if spec.task == "normal_var" else gen_toy_shapes(spec)


def _metadata(spec: GenSpec) -> dict[str, Any]:
    return spec.model_dump(mode="json")


def _moment_features(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=0)
    eigvals = np.sort(np.linalg.eigvalsh(np.cov(centered, rowvar=False, bias=True)))
    radius = np.linalg.norm(centered, axis=1)
    var = centered.var(axis=0)
    kurtosis = np.sort((centered**4).mean(axis=0) / np.where(var > 0, var**2, 1.0))
    return np.concatenate([eigvals, [radius.mean(), radius.std()], kurtosis])


def nearest_centroid_baseline(train: SetDataset, test: SetDataset) -> float:
    """Accuracy of a nearest-centroid classifier on per-set moment features."""
    if not (train.classification and test.classification):
        raise ContractError("the moment baseline needs classification datasets")
    train_x = np.stack([_moment_features(s) for s in train.inputs])
    test_x = np.stack([_moment_features(s) for s in test.inputs])
    scale = train_x.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    train_x, test_x = train_x / scale, test_x / scale
    labels = train.targets[:, 0]
    classes = np.unique(labels)
    centroids = np.stack([train_x[labels == c].mean(axis=0) for c in classes])
    distances = ((test_x[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    predicted = classes[np.argmin(distances, axis=1)]
    return float((predicted == test.targets[:, 0]).mean())


DATASET_MAGIC = b"SETD"
DATASET_VERSION = 1
FLAG_CLASSIFICATION = 1
_PREFIX = struct.Struct("<4sII")
_DIMS = struct.Struct("<QQQQI")


def dataset_bytes(dataset: SetDataset) -> bytes:
    meta = canonical_json(dataset.metadata)
    n, m, d = dataset.inputs.shape
    flags = FLAG_CLASSIFICATION if dataset.classification else 0
    target_dtype = "<u4" if dataset.classification else "<f8"
    return b"".join([
        _PREFIX.pack(DATASET_MAGIC, DATASET_VERSION, flags),
        _DIMS.pack(n, m, d, dataset.n_targets, len(meta)),
        meta,
        np.ascontiguousarray(dataset.inputs, dtype="<f8").tobytes(),
        np.ascontiguousarray(dataset.targets, dtype=target_dtype).tobytes(),
    ])


def write_dataset(dataset: SetDataset, path: Path) -> None:
    Path(path).write_bytes(dataset_bytes(dataset))


def dataset_from_bytes(blob: bytes) -> SetDataset:
    if len(blob) < 4 or blob[:4] != DATASET_MAGIC:
        raise BadMagicError(f"expected magic {DATASET_MAGIC!r}, found {blob[:4]!r}", 0)
    header_end = _PREFIX.size + _DIMS.size
    if len(blob) < header_end:
        raise TruncationError(f"header needs {header_end} bytes, file has {len(blob)}", len(blob))
    _, version, flags = _PREFIX.unpack_from(blob, 0)
    if version != DATASET_VERSION:
        raise VersionMismatchError(f"unsupported SETD version {version}", 4)
    n, m, d, t, meta_len = _DIMS.unpack_from(blob, _PREFIX.size)
    classification = bool(flags & FLAG_CLASSIFICATION)

    target_width = 4 if classification else 8
    inputs_at = header_end + meta_len
    targets_at = inputs_at + 8 * n * m * d
    expected = targets_at + target_width * n * t
    if len(blob) != expected:
        raise TruncationError(
            f"header declares {n}x{m}x{d} inputs and {n}x{t} targets ({expected} bytes), "
            f"file has {len(blob)}",
            min(len(blob), expected),
        )
    try:
        metadata = json.loads(blob[header_end:inputs_at].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetParseError(f"metadata is not canonical JSON: {e}", header_end) from e

    inputs = np.frombuffer(blob, dtype="<f8", count=n * m * d, offset=inputs_at).reshape(n, m, d)
    if classification:
        raw = np.frombuffer(blob, dtype="<u4", count=n * t, offset=targets_at)
        targets = raw.astype(np.int64).reshape(n, t)
    else:
        targets = np.frombuffer(blob, dtype="<f8", count=n * t, offset=targets_at).reshape(n, t)
    return SetDataset(
        inputs.astype(np.float64),
        targets.astype(np.int64 if classification else np.float64),
        metadata,
        classification,
    )


def read_dataset(path: Path) -> SetDataset:
    return dataset_from_bytes(Path(path).read_bytes())
