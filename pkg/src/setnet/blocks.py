"""Permutation-equivariant encoder blocks.

Every block maps a SetBatch to a SetBatch with the same mask, reads its
parameters from a ParameterStore at call time and takes a `training` flag
that only feature norm looks at.
"""

from __future__ import annotations

from typing import Protocol

import numpy as np

from setnet.autodiff import SetBatch, Tensor
from setnet.autodiff import ops
from setnet.errors import ConfigError, DimensionError
from setnet.normalization import apply_norm, make_norm
from setnet.parameters import Scope


class Block(Protocol):
    def __call__(self, x: SetBatch, training: bool = True) -> SetBatch: ...


class Linear:
    """x W (+ b), with W stored fan_in x fan_out."""

    def __init__(
        self,
        scope: Scope,
        fan_in: int,
        fan_out: int,
        bias: bool = True,
        scale: float = 1.0,
    ) -> None:
        self.store = scope.store
        self.fan_in, self.fan_out = fan_in, fan_out
        self.weight = scope.weight(fan_in, fan_out, scale=scale)
        self.bias = scope.bias(fan_in, fan_out) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.fan_in:
            raise DimensionError(f"linear expects {self.fan_in} input features, got {x.shape[-1]}")
        out = ops.matmul(x, self.store[self.weight])
        if self.bias is not None:
            out = ops.add(out, self.store[self.bias])
        return out

    def on(self, x: SetBatch) -> SetBatch:
        return x.with_tensor(self(x.tensor))


def apply_residual(x: SetBatch, f_out: SetBatch, kind: str) -> SetBatch:
    """Combine a block input with its residual branch.

    erc adds each element's own input; arc_mean / arc_max add the pooled
    input of the whole set to every element; none returns the branch alone.
    """
    if f_out.shape != x.shape:
        raise DimensionError(f"residual branch shape {f_out.shape} differs from input {x.shape}")
    if kind == "none":
        return f_out
    if kind == "erc":
        skip = x.tensor
    elif kind in ("arc_mean", "arc_max"):
        mask = x.valid()[:, :, None]
        reduce = ops.reduce_mean if kind == "arc_mean" else ops.reduce_max
        skip = reduce(x.tensor, axis=1, keepdims=True, mask=mask)
    else:
        raise ConfigError("residual", f"unknown residual kind '{kind}'")
    return x.with_tensor(ops.add(f_out.tensor, skip))


def inducing_batch(points: Tensor, n_sets: int) -> SetBatch:
    """Learned points shared by every set of the batch, as an unmasked SetBatch."""
    count, dim = points.shape
    return SetBatch(ops.broadcast_to(points, (n_sets, count, dim)))


def _attend(qh: Tensor, kh: Tensor, vh: Tensor, scale: float, key_mask: np.ndarray | None) -> Tensor:
    logits = ops.matmul(qh, ops.transpose(kh))
    return ops.matmul(ops.scaled_softmax(logits, axis=-1, scale=scale, mask=key_mask), vh)


class MultiheadAttention:
    """Attn_K(q, k, v): per-head scaled-softmax attention, heads concatenated then projected.

    Logits are scaled by 1/sqrt(dim) with dim the model feature width. Padded
    keys are excluded from the softmax and padded queries give zero rows.
    """

    def __init__(
        self,
        scope: Scope,
        dim: int,
        heads: int,
        query_dim: int | None = None,
        key_dim: int | None = None,
        query_scale: float = 1.0,
    ) -> None:
        if dim % heads != 0:
            raise ConfigError("heads", f"{heads} heads do not divide feature width {dim}")
        self.store = scope.store
        self.dim, self.heads = dim, heads
        self.query_dim = query_dim or dim
        self.key_dim = key_dim or dim
        head_dim = dim // heads
        self.w_q, self.w_k, self.w_v = [], [], []
        for h in range(heads):
            head = scope.child(f"head{h}")
            self.w_q.append(head.weight(self.query_dim, head_dim, leaf="w_q", scale=query_scale))
            self.w_k.append(head.weight(self.key_dim, head_dim, leaf="w_k"))
            self.w_v.append(head.weight(self.key_dim, head_dim, leaf="w_v"))
        self.w_o = scope.weight(dim, dim, leaf="w_o")

    def __call__(self, q: SetBatch, k: SetBatch, v: SetBatch) -> SetBatch:
        if k.shape[:2] != v.shape[:2]:
            raise DimensionError(f"keys {k.shape} and values {v.shape} differ in set layout")
        if q.n_sets != k.n_sets:
            raise DimensionError(f"queries cover {q.n_sets} sets, keys {k.n_sets}")
        key_mask = None if k.mask is None else k.mask[:, None, :]
        scale = 1.0 / np.sqrt(self.dim)
        outputs = []
        for w_q, w_k, w_v in zip(self.w_q, self.w_k, self.w_v):
            qh = ops.matmul(q.tensor, self.store[w_q])
            kh = ops.matmul(k.tensor, self.store[w_k])
            vh = ops.matmul(v.tensor, self.store[w_v])
            outputs.append(_attend(qh, kh, vh, scale, key_mask))
        joined = outputs[0] if len(outputs) == 1 else ops.concat(outputs, axis=-1)
        return q.with_tensor(ops.matmul(joined, self.store[self.w_o]))


class MAB:
    """Multihead attention block with the skip path on the projected input.

        q = x W_Q,  k = y W_K,  v = y W_V   (split column-wise into K heads)
        f = q + concat_h softmax(q_h k_h^T / sqrt(D)) v_h
        MAB(x, y) = f + relu(f W + b)

    The single W_Q feeds both the skip path and the attention queries, so
    `wq_scale` scales both. With a norm enabled it is applied to f and to the
    block output.
    """

    def __init__(
        self,
        scope: Scope,
        query_dim: int,
        key_dim: int,
        dim: int,
        heads: int,
        norm: str = "none",
        wq_scale: float = 1.0,
    ) -> None:
        if dim % heads != 0:
            raise ConfigError("heads", f"{heads} heads do not divide feature width {dim}")
        self.dim, self.heads = dim, heads
        self.w_q = Linear(scope.child("w_q"), query_dim, dim, bias=False, scale=wq_scale)
        self.w_k = Linear(scope.child("w_k"), key_dim, dim, bias=False)
        self.w_v = Linear(scope.child("w_v"), key_dim, dim, bias=False)
        self.ff = Linear(scope.child("ff"), dim, dim)
        self.norm_f = make_norm(scope.child("norm_f"), norm, dim)
        self.norm_out = make_norm(scope.child("norm_out"), norm, dim)

    def attend(self, x: SetBatch, y: SetBatch) -> Tensor:
        """f(x, y) before normalization."""
        if x.n_sets != y.n_sets:
            raise DimensionError(f"queries cover {x.n_sets} sets, keys {y.n_sets}")
        q, k, v = self.w_q(x.tensor), self.w_k(y.tensor), self.w_v(y.tensor)
        key_mask = None if y.mask is None else y.mask[:, None, :]
        scale = 1.0 / np.sqrt(self.dim)
        width = self.dim // self.heads
        outputs = []
        for h in range(self.heads):
            qh, kh, vh = (ops.slice_axis(t, h * width, (h + 1) * width) for t in (q, k, v))
            outputs.append(_attend(qh, kh, vh, scale, key_mask))
        joined = outputs[0] if len(outputs) == 1 else ops.concat(outputs, axis=-1)
        return ops.add(q, joined)

    def __call__(self, x: SetBatch, y: SetBatch, training: bool = True) -> SetBatch:
        f = apply_norm(self.norm_f, x.with_tensor(self.attend(x, y)), training)
        out = f.with_tensor(ops.add(f.tensor, ops.relu(self.ff(f.tensor))))
        return apply_norm(self.norm_out, out, training)


class ISAB:
    """ISAB(x) = MAB(x, h) with h = MAB(p, x) for learned inducing points p."""

    def __init__(
        self,
        scope: Scope,
        input_dim: int,
        dim: int,
        heads: int,
        inducing: int,
        norm: str = "none",
        wq_scale: float = 1.0,
    ) -> None:
        if inducing < 1:
            raise ConfigError("inducing_points", "need at least one inducing point")
        self.store = scope.store
        self.inducing = scope.inducing(inducing, dim)
        self.mab_induced = MAB(scope.child("mab0"), dim, input_dim, dim, heads, norm, wq_scale)
        self.mab_out = MAB(scope.child("mab1"), input_dim, dim, dim, heads, norm, wq_scale)

    def induced(self, x: SetBatch, training: bool = True) -> SetBatch:
        """The inducing points after attending over x; invariant to element order."""
        p = inducing_batch(self.store[self.inducing], x.n_sets)
        return self.mab_induced(p, x, training)

    def __call__(self, x: SetBatch, training: bool = True) -> SetBatch:
        return self.mab_out(x, self.induced(x, training), training)


class MABPlusPlus:
    """Clean-path attention block.

        h = x + Attn(x, Norm(y), y)          (MAB1, queries left unnormalized)
        h = x + Attn(Norm(x), Norm(y), y)    (MAB2)
        out = h + fcc(relu(Norm(h)))
    """

    normalize_queries = True

    def __init__(
        self,
        scope: Scope,
        dim: int,
        heads: int,
        norm: str = "set_norm",
        residual: str = "erc",
        query_scale: float = 1.0,
    ) -> None:
        self.residual = residual
        self.attn = MultiheadAttention(scope.child("attn"), dim, heads, query_scale=query_scale)
        self.norm_x = make_norm(scope.child("norm_x"), norm, dim) if self.normalize_queries else None
        self.norm_y = make_norm(scope.child("norm_y"), norm, dim)
        self.norm_h = make_norm(scope.child("norm_h"), norm, dim)
        self.fcc = Linear(scope.child("fcc"), dim, dim, bias=False)

    def __call__(self, x: SetBatch, y: SetBatch, training: bool = True) -> SetBatch:
        queries = apply_norm(self.norm_x, x, training)
        keys = apply_norm(self.norm_y, y, training)
        h = apply_residual(x, self.attn(queries, keys, y), self.residual)
        inner = ops.relu(apply_norm(self.norm_h, h, training).tensor)
        return apply_residual(h, h.with_tensor(self.fcc(inner)), self.residual)


class MAB1PlusPlus(MABPlusPlus):
    normalize_queries = False


class MAB2PlusPlus(MABPlusPlus):
    normalize_queries = True


class ISABPlusPlus:
    """ISAB++(x) = MAB2(x, h) with h = MAB1(p, x)."""

    def __init__(
        self,
        scope: Scope,
        dim: int,
        heads: int,
        inducing: int,
        norm: str = "set_norm",
        residual: str = "erc",
        query_scale: float = 1.0,
    ) -> None:
        if inducing < 1:
            raise ConfigError("inducing_points", "need at least one inducing point")
        self.store = scope.store
        self.inducing = scope.inducing(inducing, dim)
        self.mab1 = MAB1PlusPlus(scope.child("mab1"), dim, heads, norm, residual, query_scale)
        self.mab2 = MAB2PlusPlus(scope.child("mab2"), dim, heads, norm, residual, query_scale)

    def induced(self, x: SetBatch, training: bool = True) -> SetBatch:
        p = inducing_batch(self.store[self.inducing], x.n_sets)
        return self.mab1(p, x, training)

    def __call__(self, x: SetBatch, training: bool = True) -> SetBatch:
        return self.mab2(x, self.induced(x, training), training)


class DSFeedforward:
    """relu(Norm(x W + b)); the bias is dropped when a norm follows."""

    def __init__(self, scope: Scope, fan_in: int, dim: int, norm: str = "none") -> None:
        self.linear = Linear(scope.child("linear"), fan_in, dim, bias=norm == "none")
        self.norm = make_norm(scope.child("norm"), norm, dim)

    def __call__(self, x: SetBatch, training: bool = True) -> SetBatch:
        z = apply_norm(self.norm, self.linear.on(x), training)
        return z.with_tensor(ops.relu(z.tensor))


class _TwoLayerBranch:
    """Norm(W_1 relu(Norm(W_2 x))), the residual branch of the Deep Sets blocks."""

    def __init__(self, scope: Scope, dim: int, norm: str) -> None:
        bias = norm == "none"
        self.linear1 = Linear(scope.child("linear1"), dim, dim, bias=bias)
        self.norm1 = make_norm(scope.child("norm1"), norm, dim)
        self.linear2 = Linear(scope.child("linear2"), dim, dim, bias=bias)
        self.norm2 = make_norm(scope.child("norm2"), norm, dim)

    def __call__(self, x: SetBatch, training: bool) -> SetBatch:
        z = apply_norm(self.norm1, self.linear1.on(x), training)
        z = z.with_tensor(ops.relu(z.tensor))
        return apply_norm(self.norm2, self.linear2.on(z), training)


class DSBlockClean:
    """x + Norm(W_1 relu(Norm(W_2 x))), nothing on the skip path."""

    def __init__(self, scope: Scope, dim: int, norm: str = "set_norm", residual: str = "erc") -> None:
        self.branch = _TwoLayerBranch(scope, dim, norm)
        self.residual = residual

    def __call__(self, x: SetBatch, training: bool = True) -> SetBatch:
        return apply_residual(x, self.branch(x, training), self.residual)


class DSBlockNonClean:
    """relu(x + Norm(W_1 relu(Norm(W_2 x)))), post-activation arrangement."""

    def __init__(self, scope: Scope, dim: int, norm: str = "set_norm", residual: str = "erc") -> None:
        self.branch = _TwoLayerBranch(scope, dim, norm)
        self.residual = residual

    def __call__(self, x: SetBatch, training: bool = True) -> SetBatch:
        out = apply_residual(x, self.branch(x, training), self.residual)
        return out.with_tensor(ops.relu(out.tensor))


class FreqAddBlock:
    """relu(x + Norm(W x)): one linear per residual, followed by a relu."""

    def __init__(self, scope: Scope, dim: int, norm: str = "set_norm", residual: str = "erc") -> None:
        self.linear = Linear(scope.child("linear"), dim, dim, bias=norm == "none")
        self.norm = make_norm(scope.child("norm"), norm, dim)
        self.residual = residual

    def __call__(self, x: SetBatch, training: bool = True) -> SetBatch:
        branch = apply_norm(self.norm, self.linear.on(x), training)
        out = apply_residual(x, branch, self.residual)
        return out.with_tensor(ops.relu(out.tensor))


class NormReluLinear:
    """Linear(relu(Norm(x))), the tail closing a clean-path encoder."""

    def __init__(self, scope: Scope, dim: int, norm: str = "set_norm") -> None:
        self.norm = make_norm(scope.child("norm"), norm, dim)
        self.linear = Linear(scope.child("linear"), dim, dim, bias=False)

    def __call__(self, x: SetBatch, training: bool = True) -> SetBatch:
        z = apply_norm(self.norm, x, training)
        return self.linear.on(z.with_tensor(ops.relu(z.tensor)))


class InputProjection:
    """Bias-free linear map from the input features to the hidden width."""

    def __init__(self, scope: Scope, fan_in: int, dim: int) -> None:
        self.linear = Linear(scope, fan_in, dim, bias=False)

    def __call__(self, x: SetBatch, training: bool = True) -> SetBatch:
        return self.linear.on(x)


__all__ = [
    "ISAB",
    "MAB",
    "Block",
    "DSBlockClean",
    "DSBlockNonClean",
    "DSFeedforward",
    "FreqAddBlock",
    "ISABPlusPlus",
    "InputProjection",
    "Linear",
    "MAB1PlusPlus",
    "MAB2PlusPlus",
    "MABPlusPlus",
    "MultiheadAttention",
    "NormReluLinear",
    "apply_residual",
    "inducing_batch",
]
