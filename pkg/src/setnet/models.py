"""Full permutation-invariant networks: encoder -> aggregation -> decoder."""

from __future__ import annotations

import logging
import struct
from collections.abc import Sequence
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from setnet.autodiff import SetBatch, Tensor
from setnet.autodiff import ops
from setnet.blocks import (
    ISAB,
    MAB,
    Block,
    DSBlockClean,
    DSBlockNonClean,
    DSFeedforward,
    FreqAddBlock,
    InputProjection,
    ISABPlusPlus,
    Linear,
    NormReluLinear,
    inducing_batch,
)
from setnet.config import ModelConfig, canonical_json
from setnet.errors import CheckpointError, DimensionError
from setnet.normalization import RunningStats
from setnet.parameters import ParameterSpec, ParameterStore, Scope

logger = logging.getLogger(__name__)


class SumPool:
    def __call__(self, z: SetBatch, training: bool = True) -> Tensor:
        return ops.reduce_sum(z.tensor, axis=1, mask=z.valid()[:, :, None])


class MaxPool:
    def __call__(self, z: SetBatch, training: bool = True) -> Tensor:
        return ops.reduce_max(z.tensor, axis=1, mask=z.valid()[:, :, None])


class PositionalPool:
    """Sum weighted by element position (1, 2, ..., M).

    Deliberately order-sensitive: the negative control for invariance checks.
    """

    def __call__(self, z: SetBatch, training: bool = True) -> Tensor:
        weights = np.arange(1, z.set_size + 1, dtype=np.float64)[None, :, None]
        weights = weights * z.valid()[:, :, None]
        return ops.reduce_sum(ops.mul(z.tensor, ops.constant(weights)), axis=1)


class PMA:
    """Pooling by attention: an unnormalized MAB between one learned seed and the set."""

    def __init__(self, scope: Scope, dim: int, heads: int) -> None:
        self.store = scope.store
        self.seed = scope.inducing(1, dim, leaf="seed")
        self.mab = MAB(scope.child("mab"), dim, dim, dim, heads)

    def __call__(self, z: SetBatch, training: bool = True) -> Tensor:
        seed = inducing_batch(self.store[self.seed], z.n_sets)
        return ops.reduce_sum(self.mab(seed, z, training).tensor, axis=1)


Pool = SumPool | MaxPool | PositionalPool | PMA


class Model:
    """An assembled network; parameters live in `store`, layers hold ids only."""

    def __init__(
        self,
        config: ModelConfig,
        store: ParameterStore,
        encoder: Sequence[Block],
        pool: Pool,
        decoder: Sequence[Linear],
        head: Linear,
    ) -> None:
        self.config = config
        self.store = store
        self.encoder = list(encoder)
        self.pool = pool
        self.decoder = list(decoder)
        self.head = head

    def encode(self, batch: SetBatch, training: bool = True) -> SetBatch:
        if batch.dim != self.config.input_dim:
            raise DimensionError(f"model takes {self.config.input_dim} input features, batch has {batch.dim}")
        z = batch
        for block in self.encoder:
            z = block(z, training)
        return z

    def forward(self, batch: SetBatch, training: bool = True) -> Tensor:
        """Predictions of shape N x output_dim (logits for classification)."""
        h = self.pool(self.encode(batch, training), training)
        for linear in self.decoder:
            h = ops.relu(linear(h))
        return self.head(h)

    __call__ = forward

    def parameter_registry(self) -> list[ParameterSpec]:
        return self.store.registry()

    def encoder_layers(self) -> list[int]:
        return sorted({s.layer_index for s in self.store.registry() if s.section == "encoder"})

    @property
    def num_parameters(self) -> int:
        return self.store.num_parameters()


def _deep_sets_encoder(cfg: ModelConfig, scope: Scope) -> list[Block]:
    dim, depth = cfg.hidden_dim, cfg.encoder_depth
    if cfg.path == "plain":
        return [
            DSFeedforward(scope.child(i).at(i), cfg.input_dim if i == 0 else dim, dim, cfg.norm)
            for i in range(depth)
        ]

    blocks: list[Block] = [InputProjection(scope.child("input").at(0), cfg.input_dim, dim)]
    block_cls = {"clean": DSBlockClean, "non_clean": DSBlockNonClean, "freq_add": FreqAddBlock}[cfg.path]
    for i in range(1, depth + 1):
        blocks.append(block_cls(scope.child(i).at(i), dim, cfg.norm, cfg.residual))
    if cfg.path == "clean":
        blocks.append(NormReluLinear(scope.child("tail").at(depth + 1), dim, cfg.norm))
    return blocks


def _set_transformer_encoder(cfg: ModelConfig, scope: Scope) -> list[Block]:
    dim, depth = cfg.hidden_dim, cfg.encoder_depth
    if cfg.family == "set_transformer":
        return [
            ISAB(
                scope.child(i).at(i),
                cfg.input_dim if i == 0 else dim,
                dim,
                cfg.heads,
                cfg.inducing_points,
                cfg.norm,
                cfg.wq_scale,
            )
            for i in range(depth)
        ]
    blocks: list[Block] = [InputProjection(scope.child("input").at(0), cfg.input_dim, dim)]
    for i in range(1, depth + 1):
        blocks.append(
            ISABPlusPlus(
                scope.child(i).at(i),
                dim,
                cfg.heads,
                cfg.inducing_points,
                cfg.norm,
                cfg.residual,
                query_scale=cfg.wq_scale,
            )
        )
    return blocks


def build(config: ModelConfig) -> Model:
    """Construct a freshly initialized model; the seed fixes every initial value."""
    cfg = config.resolve()
    store = ParameterStore(np.random.default_rng(cfg.seed))
    encoder_scope = Scope(store, "encoder", 0, "encoder")
    if cfg.is_deep_sets:
        encoder = _deep_sets_encoder(cfg, encoder_scope)
    else:
        encoder = _set_transformer_encoder(cfg, encoder_scope)

    next_layer = max(s.layer_index for s in store.registry()) + 1
    pool: Pool
    if cfg.aggregation == "pma":
        pool = PMA(Scope(store, "aggregation", next_layer, "aggregation"), cfg.hidden_dim, cfg.heads)
        next_layer += 1
    else:
        pool = {"sum": SumPool, "max": MaxPool, "positional": PositionalPool}[cfg.aggregation]()

    decoder_scope = Scope(store, "decoder", next_layer, "decoder")
    decoder = []
    width = cfg.hidden_dim
    for j, out in enumerate(cfg.decoder_widths or []):
        decoder.append(Linear(decoder_scope.child(j).at(next_layer + j), width, out))
        width = out
    head_layer = next_layer + len(decoder)
    head = Linear(decoder_scope.child("head").at(head_layer), width, cfg.output_dim)

    logger.debug("built %s depth %d: %d parameters", cfg.family, cfg.encoder_depth, store.num_parameters())
    return Model(cfg, store, encoder, pool, decoder, head)


def parameter_registry(model: Model) -> list[tuple[str, tuple[int, ...], int]]:
    """(id, shape, layer_index) in construction order."""
    return [(s.id, s.shape, s.layer_index) for s in model.parameter_registry()]


CHECKPOINT_MAGIC = b"SETN"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sII")
_U32 = struct.Struct("<I")


def checkpoint_bytes(model: Model) -> bytes:
    """Serialize config and parameters.

    Layout: magic, u32 version, u32 config length, canonical config JSON,
    parameters in registry order as little-endian f64, then one record per
    feature norm layer (u32 width, running mean, running var; width 0 when
    the statistics are not initialized).
    """
    config_blob = canonical_json(model.config.model_dump(mode="json"))
    parts = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(config_blob)), config_blob]
    values = model.store.arrays()
    for spec in model.parameter_registry():
        parts.append(np.ascontiguousarray(values[spec.id], dtype="<f8").tobytes())
    for stats in model.store.buffers.values():
        if stats.mean is None:
            parts.append(_U32.pack(0))
            continue
        parts.append(_U32.pack(stats.mean.size))
        parts.append(np.ascontiguousarray(stats.mean, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(stats.var, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(model: Model, path: Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


class _Reader:
    def __init__(self, blob: bytes) -> None:
        self.blob = blob
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.blob):
            raise CheckpointError(f"checkpoint truncated at offset {self.offset}")
        chunk = self.blob[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def floats(self, shape: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)


def model_from_bytes(blob: bytes) -> Model:
    reader = _Reader(blob)
    magic, version, config_len = _HEADER.unpack(reader.take(_HEADER.size))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        config = ModelConfig.model_validate_json(reader.take(config_len))
    except ValidationError as e:
        raise CheckpointError(f"invalid config in checkpoint: {e}") from e

    model = build(config)
    model.store.assign({spec.id: reader.floats(spec.shape) for spec in model.parameter_registry()})
    stats: RunningStats
    for stats in model.store.buffers.values():
        (width,) = _U32.unpack(reader.take(_U32.size))
        if width:
            stats.mean = reader.floats((width,))
            stats.var = reader.floats((width,))
    if reader.offset != len(blob):
        raise CheckpointError(f"{len(blob) - reader.offset} trailing bytes in checkpoint")
    return model


def load_checkpoint(path: Path) -> Model:
    return model_from_bytes(Path(path).read_bytes())
