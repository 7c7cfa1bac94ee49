"""The built-in check suites: invariance, equivariance, gradcheck, prop1, normalization."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np

from setnet.autodiff import SetBatch
from setnet.blocks import (
    ISAB,
    MAB,
    DSBlockClean,
    DSBlockNonClean,
    DSFeedforward,
    FreqAddBlock,
    ISABPlusPlus,
    Linear,
    apply_residual,
)
from setnet.config import GenSpec, ModelConfig
from setnet.data import gen_normal_var, gen_toy_shapes
from setnet.diagnostics import (
    CheckReport,
    equivariance_check,
    finite_diff_check,
    invariance_check,
    ln_collapse_demo,
    ln_scale_invariance_check,
    prop1_report,
    prop1_sweep,
)
from setnet.models import build
from setnet.normalization import NormLayer
from setnet.parameters import ParameterStore, Scope
from setnet.suites import Suite, SuiteContext, register_suite

# gradcheck on desk-sized models
DEFAULT_GRADCHECK_CONFIG = ModelConfig(
    family="deep_sets_pp", input_dim=1, encoder_depth=4, hidden_dim=8, decoder_widths=[8]
)


def sample_batch(config: ModelConfig, seed: int, n_sets: int = 4, set_size: int = 6) -> tuple[SetBatch, np.ndarray]:
    """A small deterministic batch and targets that fit `config`."""
    cfg = config.resolve()
    if cfg.task_head == "regression" and cfg.input_dim == 1 and cfg.output_dim == 1:
        ds = gen_normal_var(GenSpec(task="normal_var", n_sets=n_sets, set_size=set_size, seed=seed))
        return ds.batch(), ds.targets
    if cfg.task_head == "classification" and cfg.input_dim == 3:
        spec = GenSpec(
            task="toy_shapes", n_sets=n_sets, set_size=set_size, seed=seed, n_classes=min(4, cfg.output_dim)
        )
        ds = gen_toy_shapes(spec)
        return ds.batch(), ds.targets
    rng = np.random.default_rng(seed)
    batch = SetBatch.from_arrays(rng.standard_normal((n_sets, set_size, cfg.input_dim)))
    if cfg.task_head == "classification":
        return batch, rng.integers(0, cfg.output_dim, (n_sets, 1))
    return batch, rng.standard_normal((n_sets, cfg.output_dim))


def _loss_for(config: ModelConfig) -> str:
    return "cross_entropy" if config.task_head == "classification" else "mse"


def run_invariance(ctx: SuiteContext) -> list[CheckReport]:
    assert ctx.config is not None
    diag = ctx.diagnostics
    model = build(ctx.config)
    batch, _ = sample_batch(ctx.config, diag.check_seed)
    return [
        invariance_check(model, batch, diag.n_perms, diag.perm_tolerance, diag.check_seed, name="model_invariance"),
        equivariance_check(
            model.encode, batch, diag.n_perms, diag.perm_tolerance, diag.check_seed, name="encoder_equivariance"
        ),
    ]


def _checked_blocks(dim: int, n_sets: int, seed: int) -> list[tuple[str, Callable[[SetBatch], SetBatch], float]]:
    """One instance of every block kind, with the tolerance it is held to."""
    store = ParameterStore(np.random.default_rng(seed))
    scope = Scope(store, "check", 0)
    heads, inducing = 2, 3
    keys = SetBatch.from_arrays(np.random.default_rng(seed + 1).standard_normal((n_sets, 4, dim)))
    mab = MAB(scope.child("mab"), dim, dim, dim, heads)
    residual_branch = Linear(scope.child("residual"), dim, dim)
    blocks: list[tuple[str, Callable[[SetBatch], SetBatch], float]] = [
        ("set_norm", NormLayer(scope.child("set_norm"), "set_norm", dim), 1e-12),
        ("layer_norm", NormLayer(scope.child("layer_norm"), "layer_norm", dim), 1e-12),
        ("feature_norm", NormLayer(scope.child("feature_norm"), "feature_norm", dim), 1e-12),
        ("ds_feedforward", DSFeedforward(scope.child("ff"), dim, dim), 1e-9),
        ("ds_block_clean", DSBlockClean(scope.child("clean"), dim), 1e-9),
        ("ds_block_nonclean", DSBlockNonClean(scope.child("nonclean"), dim), 1e-9),
        ("freqadd_block", FreqAddBlock(scope.child("freqadd"), dim), 1e-9),
        ("mab_original", lambda b: mab(b, keys), 1e-9),
        ("isab_original", ISAB(scope.child("isab"), dim, dim, heads, inducing), 1e-9),
        ("isab_pp", ISABPlusPlus(scope.child("isab_pp"), dim, heads, inducing), 1e-9),
    ]
    for kind in ("erc", "arc_mean", "arc_max"):
        blocks.append((
            f"residual_{kind}",
            lambda b, kind=kind: apply_residual(b, residual_branch.on(b), kind),
            1e-12,
        ))
    return blocks


def run_equivariance(ctx: SuiteContext) -> list[CheckReport]:
    diag = ctx.diagnostics
    if ctx.config is not None:
        model = build(ctx.config)
        batch, _ = sample_batch(ctx.config, diag.check_seed)
        reports = []
        z = batch
        for i, block in enumerate(model.encoder):
            reports.append(equivariance_check(
                block, z, diag.n_perms, diag.perm_tolerance, diag.check_seed, name=f"encoder_block_{i}"
            ))
            z = SetBatch(block(z).tensor.detach(), z.mask)
        return reports

    rng = np.random.default_rng(diag.check_seed)
    dim, n_sets = 8, 3
    mask = np.ones((n_sets, 5), dtype=bool)
    mask[1, 3:] = False
    batch = SetBatch.from_arrays(rng.standard_normal((n_sets, 5, dim)), mask)
    return [
        equivariance_check(block, batch, diag.n_perms, tol, diag.check_seed, name=name)
        for name, block, tol in _checked_blocks(dim, n_sets, diag.check_seed)
    ]


def run_gradcheck(ctx: SuiteContext) -> list[CheckReport]:
    diag = ctx.diagnostics
    config = ctx.config or DEFAULT_GRADCHECK_CONFIG
    model = build(config)
    batch, targets = sample_batch(config, diag.check_seed)
    return [
        finite_diff_check(
            model,
            batch,
            targets,
            loss=_loss_for(config),
            h=diag.gradcheck_h,
            subsample=diag.gradcheck_subsample,
            tolerance=diag.gradcheck_tolerance,
            floor=diag.gradcheck_floor,
            seed=diag.check_seed,
            name=f"gradcheck_{model.config.family}",
        )
    ]


def run_prop1(ctx: SuiteContext) -> list[CheckReport]:
    return [prop1_report(prop1_sweep(seed=ctx.diagnostics.check_seed))]


def run_normalization(ctx: SuiteContext) -> list[CheckReport]:
    """Set norm equivariance, layer-norm scale invariance and the 2D collapse buckets."""
    seed = ctx.diagnostics.check_seed
    rng = np.random.default_rng(seed)
    store = ParameterStore(rng)
    set_norm = NormLayer(Scope(store, "set_norm", 0), "set_norm", 4)
    batch = SetBatch.from_arrays(rng.standard_normal((5, 6, 4)))
    reports = [
        equivariance_check(set_norm, batch, n_perms=100, tolerance=1e-12, seed=seed, name="set_norm_equivariance"),
        ln_scale_invariance_check(seed=seed),
    ]

    points = rng.standard_normal((40, 2))
    collapse = ln_collapse_demo(points, np.eye(2))
    reports.append(CheckReport(
        name="ln_collapse_buckets",
        max_deviation=float(collapse.off_bucket),
        tolerance=1.0,
        passed=collapse.off_bucket == 0,
        details={"bucket_counts": collapse.bucket_counts},
    ))
    return reports


def register_builtin_suites() -> None:
    """Register every built-in suite into the global registry."""
    register_suite(Suite(
        name="invariance",
        description="Full-model permutation invariance and encoder equivariance for a config",
        runner=run_invariance,
        needs_config=True,
    ))
    register_suite(Suite(
        name="equivariance",
        description="Per-block permutation equivariance (config encoder, or every block kind)",
        runner=run_equivariance,
    ))
    register_suite(Suite(
        name="gradcheck",
        description="Reverse-mode gradients against central finite differences",
        runner=run_gradcheck,
    ))
    register_suite(Suite(
        name="prop1",
        description="Which transform settings are equivariant and batch-agnostic",
        runner=run_prop1,
    ))
    register_suite(Suite(
        name="normalization",
        description="Set norm equivariance, layer norm scale invariance, 2D collapse",
        runner=run_normalization,
    ))
