"""Tests for the encoder blocks and residual connections."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from setnet.autodiff import SetBatch, Tensor
from setnet.blocks import (
    ISAB,
    MAB,
    DSBlockClean,
    DSBlockNonClean,
    DSFeedforward,
    FreqAddBlock,
    InputProjection,
    ISABPlusPlus,
    Linear,
    MAB1PlusPlus,
    MAB2PlusPlus,
    MultiheadAttention,
    NormReluLinear,
    apply_residual,
)
from setnet.diagnostics import equivariance_check
from setnet.errors import ConfigError, DimensionError
from setnet.parameters import ParameterStore, Scope

DIM = 8


def scope(seed: int = 0, prefix: str = "block") -> Scope:
    return Scope(ParameterStore(np.random.default_rng(seed)), prefix, 0)


def random_batch(seed: int = 0, n: int = 3, m: int = 5, d: int = DIM, padded: bool = False) -> SetBatch:
    rng = np.random.default_rng(seed)
    mask = None
    if padded:
        mask = np.ones((n, m), dtype=bool)
        mask[1, m - 2:] = False
        mask[-1, 1:] = False
    return SetBatch.from_arrays(rng.standard_normal((n, m, d)), mask)


def zero_all(store: ParameterStore) -> None:
    store.assign({spec.id: np.zeros(spec.shape) for spec in store.registry()})


BLOCK_FACTORIES: dict[str, Callable[[Scope], Callable[[SetBatch], SetBatch]]] = {
    "ds_feedforward": lambda s: DSFeedforward(s, DIM, DIM),
    "ds_feedforward_set_norm": lambda s: DSFeedforward(s, DIM, DIM, norm="set_norm"),
    "ds_clean_set_norm": lambda s: DSBlockClean(s, DIM),
    "ds_clean_layer_norm": lambda s: DSBlockClean(s, DIM, norm="layer_norm"),
    "ds_clean_feature_norm": lambda s: DSBlockClean(s, DIM, norm="feature_norm"),
    "ds_clean_arc_mean": lambda s: DSBlockClean(s, DIM, residual="arc_mean"),
    "ds_clean_arc_max": lambda s: DSBlockClean(s, DIM, residual="arc_max"),
    "ds_nonclean": lambda s: DSBlockNonClean(s, DIM),
    "freqadd": lambda s: FreqAddBlock(s, DIM),
    "tail": lambda s: NormReluLinear(s, DIM),
    "input_projection": lambda s: InputProjection(s, DIM, DIM),
    "isab": lambda s: ISAB(s, DIM, DIM, heads=2, inducing=3),
    "isab_layer_norm": lambda s: ISAB(s, DIM, DIM, heads=2, inducing=3, norm="layer_norm"),
    "isab_pp": lambda s: ISABPlusPlus(s, DIM, heads=2, inducing=3),
    "isab_pp_feature_norm": lambda s: ISABPlusPlus(s, DIM, heads=2, inducing=3, norm="feature_norm"),
    "isab_pp_arc_max": lambda s: ISABPlusPlus(s, DIM, heads=2, inducing=3, residual="arc_max"),
}


class TestLinear:
    def test_shapes_and_ids(self) -> None:
        s = scope()
        layer = Linear(s.child("fc"), 3, 5)
        assert s.store.spec("block.fc.weight").shape == (3, 5)
        assert s.store.spec("block.fc.bias").shape == (5,)
        assert layer(Tensor(np.ones((2, 4, 3)))).shape == (2, 4, 5)

    def test_biasless(self) -> None:
        s = scope()
        Linear(s, 3, 5, bias=False)
        assert [spec.id for spec in s.store.registry()] == ["block.weight"]

    def test_uniform_init_bound(self) -> None:
        s = scope()
        layer = Linear(s, 16, 4)
        bound = 1.0 / np.sqrt(16)
        assert np.abs(s.store[layer.weight].data).max() <= bound

    def test_scale_multiplies_init(self) -> None:
        a, b = scope(seed=3), scope(seed=3)
        w1 = Linear(a, 4, 4).weight
        w2 = Linear(b, 4, 4, scale=1.5).weight
        np.testing.assert_allclose(b.store[w2].data, 1.5 * a.store[w1].data)

    def test_wrong_width_rejected(self) -> None:
        with pytest.raises(DimensionError):
            Linear(scope(), 3, 5)(Tensor(np.ones((1, 2, 4))))


class TestResidual:
    def test_erc_adds_own_input(self) -> None:
        x = random_batch(d=2)
        f = random_batch(seed=1, d=2)
        out = apply_residual(x, f, "erc").tensor.data
        np.testing.assert_allclose(out, x.tensor.data + f.tensor.data)

    def test_arc_mean_adds_set_mean(self) -> None:
        x = random_batch(d=2, padded=True)
        f = SetBatch(Tensor(np.zeros(x.shape)), x.mask)
        out = apply_residual(x, f, "arc_mean").tensor.data
        valid = x.valid()
        expected = x.tensor.data[1][valid[1]].mean(axis=0)
        np.testing.assert_allclose(out[1][valid[1]], np.broadcast_to(expected, (valid[1].sum(), 2)))
        assert (out[1][~valid[1]] == 0.0).all()

    def test_arc_max_ignores_padding(self) -> None:
        data = np.array([[[1.0], [-5.0], [-2.0]]])
        x = SetBatch.from_arrays(data, [[False, True, True]])
        f = SetBatch(Tensor(np.zeros((1, 3, 1))), x.mask)
        out = apply_residual(x, f, "arc_max").tensor.data
        assert out[0, :, 0].tolist() == [0.0, -2.0, -2.0]

    def test_none_returns_branch(self) -> None:
        x, f = random_batch(d=2), random_batch(seed=1, d=2)
        assert apply_residual(x, f, "none") is f

    def test_unknown_kind(self) -> None:
        x = random_batch(d=2)
        with pytest.raises(ConfigError):
            apply_residual(x, x, "dense")

    def test_shape_mismatch(self) -> None:
        with pytest.raises(DimensionError):
            apply_residual(random_batch(d=2), random_batch(d=3), "erc")


class TestAttention:
    def test_heads_must_divide_width(self) -> None:
        with pytest.raises(ConfigError) as exc:
            MultiheadAttention(scope(), 6, 4)
        assert exc.value.field == "heads"

    def test_per_head_parameter_ids(self) -> None:
        s = scope()
        MultiheadAttention(s.child("attn"), DIM, 2)
        ids = [spec.id for spec in s.store.registry()]
        assert "block.attn.head0.w_q" in ids
        assert "block.attn.head1.w_v" in ids
        assert ids[-1] == "block.attn.w_o"

    def test_padded_keys_do_not_leak(self) -> None:
        attn = MultiheadAttention(scope(), DIM, 2)
        rng = np.random.default_rng(1)
        q = SetBatch.from_arrays(rng.standard_normal((1, 2, DIM)))
        keys = rng.standard_normal((1, 4, DIM))
        mask = np.array([[True, True, False, False]])
        short = attn(q, SetBatch.from_arrays(keys[:, :2]), SetBatch.from_arrays(keys[:, :2])).tensor.data
        k = SetBatch.from_arrays(keys, mask)
        full = attn(q, k, k).tensor.data
        np.testing.assert_allclose(full, short, atol=1e-12)

    def test_padded_queries_give_zero_rows(self) -> None:
        attn = MultiheadAttention(scope(), DIM, 2)
        x = random_batch(padded=True)
        out = attn(x, x, x).tensor.data
        assert (out[~x.valid()] == 0.0).all()


class TestBlockEquivariance:
    @pytest.mark.parametrize("name", sorted(BLOCK_FACTORIES))
    def test_equivariant(self, name: str) -> None:
        block = BLOCK_FACTORIES[name](scope(seed=7))
        report = equivariance_check(block, random_batch(seed=2), n_perms=20, tolerance=1e-9, seed=0)
        assert report.passed, report.counterexample

    @pytest.mark.parametrize("name", sorted(BLOCK_FACTORIES))
    def test_equivariant_with_padding(self, name: str) -> None:
        block = BLOCK_FACTORIES[name](scope(seed=7))
        report = equivariance_check(block, random_batch(seed=3, padded=True), n_perms=10, tolerance=1e-9, seed=1)
        assert report.passed, report.counterexample

    def test_mab_equivariant_in_queries(self) -> None:
        s = scope()
        mab = MAB(s, DIM, DIM, DIM, heads=2)
        keys = random_batch(seed=9, m=4)
        report = equivariance_check(lambda b: mab(b, keys), random_batch(seed=4), n_perms=20, seed=2)
        assert report.passed

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=2**31 - 1))
    def test_clean_block_equivariant_for_any_init(self, seed: int) -> None:
        block = DSBlockClean(scope(seed=seed), DIM)
        report = equivariance_check(block, random_batch(seed=seed), n_perms=5, seed=seed)
        assert report.passed


class TestInducedPoints:
    @pytest.mark.parametrize("factory", [
        lambda s: ISAB(s, DIM, DIM, heads=2, inducing=3),
        lambda s: ISABPlusPlus(s, DIM, heads=2, inducing=3),
    ])
    def test_induced_summary_is_invariant(self, factory: Callable[[Scope], ISAB | ISABPlusPlus]) -> None:
        block = factory(scope())
        x = random_batch(seed=5)
        index = np.stack([np.random.default_rng(i).permutation(5) for i in range(3)])
        np.testing.assert_allclose(
            block.induced(x.take(index)).tensor.data, block.induced(x).tensor.data, atol=1e-12
        )

    def test_zero_inducing_points_rejected(self) -> None:
        with pytest.raises(ConfigError):
            ISABPlusPlus(scope(), DIM, heads=2, inducing=0)

    def test_mab_variants_differ_in_query_norm(self) -> None:
        assert MAB1PlusPlus(scope(), DIM, 2).norm_x is None
        assert MAB2PlusPlus(scope(), DIM, 2).norm_x is not None


class TestCleanPath:
    """At zero weights and zero shift a clean-path block is the identity; a non-clean one is not."""

    @pytest.mark.parametrize("factory", [
        lambda s: DSBlockClean(s, DIM),
        lambda s: DSBlockClean(s, DIM, norm="layer_norm"),
        lambda s: DSBlockClean(s, DIM, norm="none"),
        lambda s: ISABPlusPlus(s, DIM, heads=2, inducing=3),
    ])
    def test_clean_block_is_identity_at_zero(self, factory: Callable[[Scope], Callable[[SetBatch], SetBatch]]) -> None:
        s = scope()
        block = factory(s)
        zero_all(s.store)
        x = random_batch(seed=6)
        assert np.abs(block(x).tensor.data - x.tensor.data).max() < 1e-12

    @pytest.mark.parametrize("factory", [
        lambda s: DSBlockNonClean(s, DIM),
        lambda s: FreqAddBlock(s, DIM),
    ])
    def test_nonclean_block_is_not_identity(self, factory: Callable[[Scope], Callable[[SetBatch], SetBatch]]) -> None:
        s = scope()
        block = factory(s)
        zero_all(s.store)
        x = random_batch(seed=6)
        assert (x.tensor.data < 0).any()
        assert np.abs(block(x).tensor.data - x.tensor.data).max() > 0.0

    def test_original_mab_skip_is_projected(self) -> None:
        s = scope()
        mab = MAB(s, DIM, DIM, DIM, heads=2)
        zero_all(s.store)
        x = random_batch(seed=6)
        # x W_Q with W_Q = 0 erases the input
        assert np.abs(mab(x, x).tensor.data).max() == 0.0

    def test_original_mab_skip_equals_query_projection(self) -> None:
        s = scope()
        mab = MAB(s, DIM, DIM, DIM, heads=2)
        s.store.assign({
            spec.id: np.zeros(spec.shape)
            for spec in s.store.registry()
            if spec.id.startswith(("block.w_v", "block.ff"))
        })
        x = random_batch(seed=6)
        expected = x.tensor.data @ s.store["block.w_q.weight"].data
        np.testing.assert_allclose(mab(x, x).tensor.data, expected, atol=1e-12)


class TestOriginalMABQueries:
    def test_single_query_projection(self) -> None:
        s = scope()
        MAB(s, DIM, DIM, DIM, heads=2)
        ids = [spec.id for spec in s.store.registry()]
        assert [i for i in ids if "w_q" in i] == ["block.w_q.weight"]

    def test_attention_uses_projected_queries(self) -> None:
        s = scope(seed=3)
        mab = MAB(s, DIM, DIM, DIM, heads=2)
        x, y = random_batch(seed=1), random_batch(seed=2, m=4)
        w = {name: s.store[f"block.{name}.weight"].data for name in ("w_q", "w_k", "w_v")}
        q, k, v = x.tensor.data @ w["w_q"], y.tensor.data @ w["w_k"], y.tensor.data @ w["w_v"]
        heads = []
        for cols in (slice(0, DIM // 2), slice(DIM // 2, DIM)):
            logits = q[..., cols] @ np.swapaxes(k[..., cols], 1, 2) / np.sqrt(DIM)
            weights = np.exp(logits - logits.max(axis=-1, keepdims=True))
            weights /= weights.sum(axis=-1, keepdims=True)
            heads.append(weights @ v[..., cols])
        np.testing.assert_allclose(mab.attend(x, y).data, q + np.concatenate(heads, axis=-1), atol=1e-12)

    def test_wq_scale_reaches_attention(self) -> None:
        base, scaled = scope(seed=4), scope(seed=4)
        mab = MAB(base, DIM, DIM, DIM, heads=2)
        mab_scaled = MAB(scaled, DIM, DIM, DIM, heads=2, wq_scale=1.5)
        x = random_batch(seed=5)
        # a query-independent attention term would make this difference exactly 0.5 * x W_Q
        diff = mab_scaled.attend(x, x).data - mab.attend(x, x).data
        skip_only = 0.5 * (x.tensor.data @ base.store["block.w_q.weight"].data)
        assert np.abs(diff - skip_only).max() > 1e-6
