"""Gradient oracle, permutation checks, gradient profiles and normalization demos.

Every report here converts to a plain dict with stable field names so it can
be dumped as JSON.
"""

from __future__ import annotations

import copy
import functools
import itertools
import logging
import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import asdict, dataclass, field
from typing import Any

import anyio
import numpy as np

from setnet.autodiff import SetBatch, Tape, Tensor, backward
from setnet.config import ModelConfig
from setnet.errors import NumericError
from setnet.models import Model, build
from setnet.normalization import (
    LAYER_NORM,
    TransformCertificate,
    all_transform_settings,
    certify_transform_setting,
    label,
    layer_norm,
    standardize,
)
from setnet.parameters import ParameterStore
from setnet.training import compute_loss, layer_gradient_norms

logger = logging.getLogger(__name__)


@dataclass
class CheckReport:
    name: str
    max_deviation: float
    tolerance: float
    passed: bool
    counterexample: dict[str, Any] | None = None
    details: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _kinks_equal(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _snapshot_buffers(model: Model) -> dict[str, Any]:
    return {k: copy.deepcopy(v) for k, v in model.store.buffers.items()}


def _restore_buffers(model: Model, saved: dict[str, Any]) -> None:
    for key, stats in saved.items():
        live = model.store.buffers[key]
        live.mean, live.var = stats.mean, stats.var


# multiples of machine epsilon allowed for rounding in one loss evaluation
ROUNDOFF_ULPS = 16


def gradient_check(
    loss_fn: Callable[[], Tensor],
    store: ParameterStore,
    h: float = 1e-5,
    subsample: int = 200,
    tolerance: float = 1e-5,
    floor: float = 1e-8,
    seed: int = 0,
    name: str = "gradcheck",
) -> CheckReport:
    """Compare reverse-mode gradients of `loss_fn` with central differences.

    Up to `subsample` coordinates per parameter tensor of `store` are perturbed
    (chosen with a seeded generator). The relative error of a coordinate is
    |numeric - analytic| / max(|analytic|, floor).

    A coordinate is skipped, and counted, when:
      - the perturbed loss is non-finite;
      - the perturbation moves any relu or max onto a different linear piece;
      - it fails but the disagreement is within the resolution of the finite
        difference itself: the rounding bound of the loss plus the truncation
        estimate |D(h) - D(2h)|.
    """
    with Tape() as tape:
        base = loss_fn()
    grads = backward(tape, base).arrays()
    signature = tape.kink_signature()
    f0 = abs(base.item())

    def evaluate(param: str, value: np.ndarray) -> tuple[float, list[np.ndarray]]:
        store.assign({param: value})
        with Tape() as t:
            try:
                out = loss_fn().item()
            except NumericError:
                out = math.nan
        return out, t.kink_signature()

    def central(param: str, original: np.ndarray, c: int, step: float) -> tuple[float, float, bool] | None:
        """(derivative, largest |f|, same pieces), or None when a perturbed loss is non-finite."""
        plus, minus = original.copy(), original.copy()
        plus.flat[c] += step
        minus.flat[c] -= step
        f_plus, sig_plus = evaluate(param, plus)
        f_minus, sig_minus = evaluate(param, minus)
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            return None
        same = _kinks_equal(signature, sig_plus) and _kinks_equal(signature, sig_minus)
        return (f_plus - f_minus) / (2.0 * step), max(abs(f_plus), abs(f_minus)), same

    rng = np.random.default_rng(seed)
    eps = float(np.finfo(np.float64).eps)
    worst = 0.0
    counterexample: dict[str, Any] | None = None
    checked = skipped_nonfinite = skipped_kink = skipped_noise = 0
    for spec in store.registry():
        original = store[spec.id].numpy()
        analytic = grads.get(spec.id, np.zeros_like(original))
        coords = np.sort(rng.choice(original.size, size=min(subsample, original.size), replace=False))
        for c in coords:
            measured = central(spec.id, original, int(c), h)
            if measured is None:
                skipped_nonfinite += 1
                continue
            numeric, magnitude, same = measured
            if not same:
                skipped_kink += 1
                continue
            g = float(analytic.flat[c])
            error = abs(numeric - g)
            rel = error / max(abs(g), floor)
            if rel > tolerance:
                resolution = ROUNDOFF_ULPS * eps * max(magnitude, f0) / h
                coarse = central(spec.id, original, int(c), 2.0 * h)
                if coarse is not None and coarse[2]:
                    resolution += abs(numeric - coarse[0])
                if error <= resolution:
                    skipped_noise += 1
                    continue
            checked += 1
            if rel > worst:
                worst = rel
                counterexample = {
                    "parameter": spec.id,
                    "coordinate": int(c),
                    "analytic": g,
                    "numeric": numeric,
                }
        store.assign({spec.id: original})

    passed = worst < tolerance
    if skipped_noise:
        logger.debug("%s: %d coordinates below finite-difference resolution", name, skipped_noise)
    return CheckReport(
        name=name,
        max_deviation=worst,
        tolerance=tolerance,
        passed=passed,
        counterexample=None if passed else counterexample,
        details={
            "checked": checked,
            "skipped_nonfinite": skipped_nonfinite,
            "skipped_kink": skipped_kink,
            "skipped_noise": skipped_noise,
            "h": h,
            "floor": floor,
        },
    )


def finite_diff_check(
    model: Model,
    batch: SetBatch,
    targets: np.ndarray,
    loss: str = "mse",
    h: float = 1e-5,
    subsample: int = 200,
    tolerance: float = 1e-5,
    floor: float = 1e-8,
    seed: int = 0,
    name: str = "gradcheck",
) -> CheckReport:
    """`gradient_check` over every parameter of a model; running statistics are restored afterwards."""
    saved = _snapshot_buffers(model)
    try:
        return gradient_check(
            lambda: compute_loss(model, batch, targets, loss),
            model.store,
            h=h,
            subsample=subsample,
            tolerance=tolerance,
            floor=floor,
            seed=seed,
            name=name,
        )
    finally:
        _restore_buffers(model, saved)



def random_permutations(batch: SetBatch, n_perms: int, seed: int = 0) -> list[np.ndarray]:
    """n_perms N x M index arrays, an independent element order per set."""
    rng = np.random.default_rng(seed)
    n, m, _ = batch.shape
    return [np.stack([rng.permutation(m) for _ in range(n)]) for _ in range(n_perms)]


def _worst_set(diff: np.ndarray) -> tuple[float, int]:
    per_set = np.abs(diff).reshape(diff.shape[0], -1).max(axis=1)
    n = int(np.argmax(per_set))
    return float(per_set[n]), n


def invariance_check(
    model: Model,
    batch: SetBatch,
    n_perms: int = 20,
    tolerance: float = 1e-9,
    seed: int = 0,
    permutations: Sequence[np.ndarray] | None = None,
    training: bool = True,
    name: str = "invariance",
) -> CheckReport:
    """max over permutations of |f(pi x) - f(x)|."""
    perms = list(permutations) if permutations is not None else random_permutations(batch, n_perms, seed)
    reference = model.forward(batch, training).data
    worst, counterexample = 0.0, None
    for trial, index in enumerate(perms):
        moved = model.forward(batch.take(index), training).data
        deviation, n = _worst_set(moved - reference)
        if deviation > worst or counterexample is None:
            worst = max(worst, deviation)
            counterexample = {
                "trial": trial,
                "set": n,
                "permutation": np.asarray(index)[n].tolist(),
                "deviation": deviation,
            }
    passed = worst < tolerance
    return CheckReport(
        name, worst, tolerance, passed,
        counterexample=None if passed else counterexample,
        details={"n_perms": len(perms)},
    )


def equivariance_check(
    block: Callable[[SetBatch], SetBatch],
    batch: SetBatch,
    n_perms: int = 20,
    tolerance: float = 1e-9,
    seed: int = 0,
    permutations: Sequence[np.ndarray] | None = None,
    name: str = "equivariance",
) -> CheckReport:
    """max over permutations of |B(pi x) - pi B(x)|."""
    perms = list(permutations) if permutations is not None else random_permutations(batch, n_perms, seed)
    reference = block(batch)
    worst, counterexample = 0.0, None
    for trial, index in enumerate(perms):
        moved = block(batch.take(index)).tensor.data
        expected = reference.take(index).tensor.data
        deviation, n = _worst_set(moved - expected)
        if deviation > worst or counterexample is None:
            worst = max(worst, deviation)
            counterexample = {
                "trial": trial,
                "set": n,
                "permutation": np.asarray(index)[n].tolist(),
                "deviation": deviation,
            }
    passed = worst < tolerance
    return CheckReport(
        name, worst, tolerance, passed,
        counterexample=None if passed else counterexample,
        details={"n_perms": len(perms)},
    )


@dataclass(frozen=True)
class ProfileEntry:
    layer_index: int
    parameter_id: str
    section: str
    grad_norm: float


@dataclass
class GradProfile:
    family: str
    depth: int
    seed: int
    entries: list[ProfileEntry]
    layer_norms: dict[int, float]
    encoder_layers: list[int]

    @property
    def first(self) -> float:
        return self.layer_norms[self.encoder_layers[0]]

    @property
    def last(self) -> float:
        return self.layer_norms[self.encoder_layers[-1]]

    @property
    def ratio(self) -> float:
        """First over last encoder layer gradient norm."""
        if self.last == 0.0:
            return math.inf if self.first > 0.0 else math.nan
        if math.isinf(self.first) and math.isinf(self.last):
            return math.nan
        return self.first / self.last

    def layer_rows(self) -> list[tuple[int, str, float]]:
        """(layer_index, section, grad_norm) in layer order."""
        sections: dict[int, str] = {}
        for e in self.entries:
            sections.setdefault(e.layer_index, e.section)
        return [(k, sections[k], self.layer_norms[k]) for k in sorted(self.layer_norms)]

    def to_dict(self) -> dict[str, Any]:
        return {
            "family": self.family,
            "depth": self.depth,
            "seed": self.seed,
            "entries": [asdict(e) for e in self.entries],
            "layers": [
                {"layer_index": k, "section": s, "grad_norm": g} for k, s, g in self.layer_rows()
            ],
            "first": self.first,
            "last": self.last,
            "ratio": self.ratio,
        }


def grad_profile(
    config: ModelConfig,
    batch: SetBatch,
    targets: np.ndarray,
    seed: int,
    loss: str = "mse",
) -> GradProfile:
    """Per-layer gradient norms of a freshly initialized model after one forward/backward."""
    model = build(config.model_copy(update={"seed": seed}))
    registry = model.parameter_registry()
    try:
        with Tape() as tape:
            value = compute_loss(model, batch, targets, loss)
        grads = backward(tape, value).arrays()
    except NumericError as e:
        logger.warning("non-finite forward pass (%s); recording infinite gradient norms", e)
        grads = {spec.id: np.full(spec.shape, np.inf) for spec in registry}

    entries = []
    for spec in registry:
        g = grads.get(spec.id)
        norm = 0.0 if g is None else float(np.linalg.norm(g.reshape(-1)))
        entries.append(ProfileEntry(spec.layer_index, spec.id, spec.section, norm if math.isfinite(norm) else math.inf))
    return GradProfile(
        family=model.config.family,
        depth=model.config.encoder_depth,
        seed=seed,
        entries=entries,
        layer_norms=layer_gradient_norms(model, grads),
        encoder_layers=model.encoder_layers(),
    )


async def profile_sweep(
    configs: Sequence[ModelConfig],
    batch: SetBatch,
    targets: np.ndarray,
    seeds: Sequence[int],
    threads: int = 1,
    loss: str = "mse",
) -> list[GradProfile]:
    """grad_profile for every (config, seed), at most `threads` at a time.

    Results come back in (config, seed) order whatever the completion order.
    """
    limiter = anyio.CapacityLimiter(max(1, threads))
    jobs = list(itertools.product(range(len(configs)), seeds))
    results: dict[int, GradProfile] = {}

    async def run(slot: int, config: ModelConfig, seed: int) -> None:
        fn = functools.partial(grad_profile, config, batch, targets, seed, loss)
        results[slot] = await anyio.to_thread.run_sync(fn, limiter=limiter)

    async with anyio.create_task_group() as tg:
        for slot, (i, seed) in enumerate(jobs):
            tg.start_soon(run, slot, configs[i], seed)
    return [results[slot] for slot in range(len(jobs))]


def run_profile_sweep(
    configs: Sequence[ModelConfig],
    batch: SetBatch,
    targets: np.ndarray,
    seeds: Sequence[int],
    threads: int = 1,
    loss: str = "mse",
) -> list[GradProfile]:
    return anyio.run(functools.partial(profile_sweep, configs, batch, targets, seeds, threads, loss))


def mean_ratio(profiles: Iterable[GradProfile]) -> float:
    ratios = [p.ratio for p in profiles]
    return float(np.mean(ratios)) if ratios else math.nan


COLLAPSE_BUCKETS: dict[str, tuple[float, float]] = {
    "(1, -1)": (1.0, -1.0),
    "(-1, 1)": (-1.0, 1.0),
    "(0, 0)": (0.0, 0.0),
}


@dataclass
class CollapseReport:
    activations: list[np.ndarray]
    bucket_counts: dict[str, int]
    off_bucket: int
    collisions: list[tuple[int, int]]

    def to_dict(self) -> dict[str, Any]:
        return {
            "activations": [a.tolist() for a in self.activations],
            "bucket_counts": self.bucket_counts,
            "off_bucket": self.off_bucket,
            "collisions": [list(p) for p in self.collisions],
        }


def ln_collapse_demo(
    shapes: Sequence[np.ndarray] | np.ndarray,
    weight: np.ndarray,
    tolerance: float = 1e-12,
) -> CollapseReport:
    """Push 2D point sets through x W and layer-norm standardization without epsilon.

    Every element lands on one of (1, -1), (-1, 1), (0, 0), so shapes with the
    same split of points around the diagonal become indistinguishable.
    """
    if isinstance(shapes, np.ndarray) and shapes.ndim == 2:
        shapes = [shapes]
    w = np.asarray(weight, dtype=np.float64)
    activations = []
    for points in shapes:
        z = np.asarray(points, dtype=np.float64) @ w
        batch = SetBatch(Tensor(z[None, :, :]))
        activations.append(standardize(batch, LAYER_NORM.standardize_dims, epsilon=0.0).tensor.data[0])

    counts = dict.fromkeys(COLLAPSE_BUCKETS, 0)
    off_bucket = 0
    for act in activations:
        for row in act:
            for key, target in COLLAPSE_BUCKETS.items():
                if np.abs(row - np.array(target)).max() <= tolerance:
                    counts[key] += 1
                    break
            else:
                off_bucket += 1

    def multiset(act: np.ndarray) -> list[tuple[float, ...]]:
        return sorted(tuple(np.round(r, 9) + 0.0) for r in act)

    collisions = [
        (i, j)
        for i, j in itertools.combinations(range(len(activations)), 2)
        if not (
            np.shape(shapes[i]) == np.shape(shapes[j]) and np.array_equal(shapes[i], shapes[j])
        )
        and multiset(activations[i]) == multiset(activations[j])
    ]
    return CollapseReport(activations, counts, off_bucket, collisions)


def ln_scale_invariance_check(
    trials: int = 100,
    seed: int = 0,
    batch_shape: tuple[int, int, int] = (2, 5, 4),
    tolerance: float = 1e-9,
) -> CheckReport:
    """max |LN(alpha x W) - LN(x W)| over random x, W and alpha > 0, epsilon = 0."""
    rng = np.random.default_rng(seed)
    d = batch_shape[2]
    gamma, beta = Tensor(np.ones(d)), Tensor(np.zeros(d))
    worst, counterexample = 0.0, None
    for trial in range(trials):
        x = rng.standard_normal(batch_shape)
        w = rng.standard_normal((d, d))
        alpha = float(rng.uniform(0.01, 100.0))
        z = x @ w
        base = layer_norm(SetBatch(Tensor(z)), gamma, beta, epsilon=0.0).tensor.data
        scaled = layer_norm(SetBatch(Tensor(alpha * z)), gamma, beta, epsilon=0.0).tensor.data
        deviation = float(np.abs(scaled - base).max())
        if deviation > worst:
            worst, counterexample = deviation, {"trial": trial, "alpha": alpha}
    passed = worst < tolerance
    return CheckReport(
        "ln_scale_invariance", worst, tolerance, passed,
        counterexample=None if passed else counterexample,
        details={"trials": trials},
    )


def prop1_sweep(trials: int = 32, seed: int = 0) -> list[TransformCertificate]:
    """certify_transform_setting for all 8 subsets of {N, M, D}."""
    return [certify_transform_setting(dims, trials=trials, seed=seed) for dims in all_transform_settings()]


def prop1_report(certificates: Sequence[TransformCertificate]) -> CheckReport:
    """Pass when exactly {} and {D} are both equivariant and batch-agnostic."""
    satisfying = {label(c.transform_dims) for c in certificates if c.equivariant and c.batch_agnostic}
    expected = {label(()), label("D")}
    passed = satisfying == expected
    return CheckReport(
        name="prop1",
        max_deviation=float(len(satisfying ^ expected)),
        tolerance=1.0,
        passed=passed,
        counterexample=None if passed else {"satisfying": sorted(satisfying)},
        details={
            "settings": [
                {"transform_dims": c.label, "equivariant": c.equivariant, "batch_agnostic": c.batch_agnostic}
                for c in certificates
            ],
            "satisfying": sorted(satisfying),
        },
    )
