"""Trainable aggregation: triplet loss, hand-written gradients, plain descent.

Gradients are reverse-mode and analytic, stage by stage through the
aggregation forward pass: triplet hinge, global normalization,
intra-normalization, residual pooling, the soft-count sigmoid chain (the
Gram matrix is symmetric, so its adjoint flows back through both index
positions), the assignment softmax, row normalization, and the pre-pool
affine map. A central-difference oracle over the flattened parameter vector
keeps the derivation honest.

The optimizer is plain full-batch gradient descent with a fixed learning
rate; the zero-guard regions of both normalizations are treated as constant
(zero gradient), and whitening is never trained (fit after the fact).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .aggregation import (
    INTRA_NORM_EPS,
    AggregationModel,
    AssignmentParams,
    BurstParams,
    ForwardCache,
    _forward_model,
)
from .errors import ConfigError, DataError, IoError, NumericalError, ShapeError
from .featureio import GlobalDescriptor, LocalFeatureSet, load_features
from .projection import INIT_TRAINED, PcaModel
from .rng import make_rng
from .vocabulary import Vocabulary

HINGE_EPS = 1e-12


@dataclass(frozen=True)
class TrainableModel:
    """An aggregation model plus which parameter groups descent may touch."""

    model: AggregationModel
    train_burst: bool = True
    train_centroids: bool = True
    train_assignment: bool = True
    train_projection: bool = False

    def __post_init__(self):
        if self.train_projection and self.model.prepool is None:
            raise ConfigError("cannot train the projection of a model that has none")

    @property
    def param_count(self) -> int:
        model = self.model
        count = 0
        if self.train_burst:
            count += 3
        if self.train_centroids:
            count += model.vocabulary.centroids.size
        if self.train_assignment:
            count += model.assignment.weights.size + model.assignment.biases.size
        if self.train_projection:
            count += model.prepool.rotation.size + model.prepool.mean.size
        return count


@dataclass(frozen=True)
class TripletBatch:
    """One anchor, one positive, several negatives, all as raw feature sets."""

    anchor: LocalFeatureSet
    positive: LocalFeatureSet
    negatives: tuple[LocalFeatureSet, ...]
    margin: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "negatives", tuple(self.negatives))
        if len(self.negatives) < 1:
            raise DataError("a triplet batch needs at least one negative")
        if not self.margin > 0:
            raise DataError(f"margin must be positive, got {self.margin}")
        dims = {self.anchor.dim, self.positive.dim} | {n.dim for n in self.negatives}
        if len(dims) != 1:
            raise ShapeError(f"inconsistent feature dimensions in triplet: {sorted(dims)}")


def _vec(descriptor: GlobalDescriptor | np.ndarray) -> np.ndarray:
    if isinstance(descriptor, GlobalDescriptor):
        return descriptor.vector
    return np.asarray(descriptor, dtype=np.float64).reshape(-1)


def triplet_loss(
    anchor_desc: GlobalDescriptor | np.ndarray,
    positive_desc: GlobalDescriptor | np.ndarray,
    negative_descs: Sequence[GlobalDescriptor | np.ndarray],
    margin: float,
) -> float:
    """Sum over negatives of max(0, ||a-p|| - ||a-n|| + margin)."""
    anchor = _vec(anchor_desc)
    positive = _vec(positive_desc)
    if anchor.shape != positive.shape:
        raise ShapeError(f"descriptor dims differ: {anchor.shape} vs {positive.shape}")
    d_ap = float(np.linalg.norm(anchor - positive))
    total = 0.0
    for negative_desc in negative_descs:
        negative = _vec(negative_desc)
        if negative.shape != anchor.shape:
            raise ShapeError(f"descriptor dims differ: {anchor.shape} vs {negative.shape}")
        d_an = float(np.linalg.norm(anchor - negative))
        total += max(0.0, d_ap - d_an + margin)
    return total


def flatten_params(trainable: TrainableModel) -> np.ndarray:
    """Trainable parameters as one vector: burst, centroids, assignment, projection."""
    model = trainable.model
    parts = []
    if trainable.train_burst:
        parts.append(np.array([model.burst.a, model.burst.b, model.burst.p]))
    if trainable.train_centroids:
        parts.append(model.vocabulary.centroids.ravel())
    if trainable.train_assignment:
        parts.append(model.assignment.weights.ravel())
        parts.append(model.assignment.biases)
    if trainable.train_projection:
        parts.append(model.prepool.rotation.ravel())
        parts.append(model.prepool.mean)
    if not parts:
        return np.empty(0)
    return np.concatenate(parts)


def unflatten_params(trainable: TrainableModel, vector: np.ndarray) -> TrainableModel:
    """Inverse of flatten_params; frozen groups pass through untouched."""
    vector = np.asarray(vector, dtype=np.float64).reshape(-1)
    if vector.size != trainable.param_count:
        raise ShapeError(
            f"parameter vector has {vector.size} entries, model expects "
            f"{trainable.param_count}"
        )
    model = trainable.model
    offset = 0

    def take(count: int, shape: tuple[int, ...]) -> np.ndarray:
        nonlocal offset
        chunk = vector[offset : offset + count].reshape(shape)
        offset += count
        return chunk

    burst = model.burst
    if trainable.train_burst:
        scalars = take(3, (3,))
        burst = BurstParams(
            a=float(scalars[0]), b=float(scalars[1]), p=float(scalars[2]),
            enabled=model.burst.enabled,
        )
    vocab = model.vocabulary
    if trainable.train_centroids:
        vocab = Vocabulary(
            centroids=take(vocab.centroids.size, vocab.centroids.shape),
            fitted_on_normalized=vocab.fitted_on_normalized,
            seed=vocab.seed,
            inertia=vocab.inertia,
        )
    assignment = model.assignment
    if trainable.train_assignment:
        assignment = AssignmentParams(
            weights=take(assignment.weights.size, assignment.weights.shape),
            biases=take(assignment.biases.size, assignment.biases.shape),
            sharpness_init=assignment.sharpness_init,
        )
    prepool = model.prepool
    if trainable.train_projection:
        prepool = PcaModel(
            rotation=take(prepool.rotation.size, prepool.rotation.shape),
            mean=take(prepool.mean.size, prepool.mean.shape),
            eigenvalues=prepool.eigenvalues,
            init_kind=INIT_TRAINED,
        )
    new_model = AggregationModel(
        vocabulary=vocab,
        assignment=assignment,
        burst=burst,
        prepool=prepool,
        whitening=model.whitening,
    )
    return replace(trainable, model=new_model)


@dataclass
class _GradAccum:
    da: float
    db: float
    dp: float
    dcentroids: np.ndarray
    dweights: np.ndarray
    dbiases: np.ndarray
    drotation: np.ndarray | None
    dmean: np.ndarray | None


def _zero_grads(trainable: TrainableModel) -> _GradAccum:
    model = trainable.model
    return _GradAccum(
        da=0.0, db=0.0, dp=0.0,
        dcentroids=np.zeros_like(model.vocabulary.centroids),
        dweights=np.zeros_like(model.assignment.weights),
        dbiases=np.zeros_like(model.assignment.biases),
        drotation=None if model.prepool is None else np.zeros_like(model.prepool.rotation),
        dmean=None if model.prepool is None else np.zeros_like(model.prepool.mean),
    )


def _check_finite(stage: str, *arrays: np.ndarray) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite gradient at stage: {stage}")


def _backward_cache(
    cache: ForwardCache,
    dy: np.ndarray,
    trainable: TrainableModel,
    grads: _GradAccum,
) -> None:
    """Accumulate d(loss)/d(params) for one image given d(loss)/d(descriptor)."""
    model = trainable.model
    burst = model.burst
    centroids = model.vocabulary.centroids
    weights = model.assignment.weights

    dflat = (dy - cache.y * float(cache.y @ dy)) / cache.g
    _check_finite("global normalization", dflat)
    dv_intra = dflat.reshape(cache.v_intra.shape)

    keep = cache.v_norms >= INTRA_NORM_EPS
    dots = np.einsum("kd,kd->k", cache.v_intra, dv_intra)
    safe_norms = np.where(keep, cache.v_norms, 1.0)
    dv_raw = np.where(
        keep[:, None], (dv_intra - cache.v_intra * dots[:, None]) / safe_norms[:, None], 0.0
    )
    _check_finite("intra normalization", dv_raw)

    dt = cache.xhat @ dv_raw.T - np.einsum("kd,kd->k", dv_raw, centroids)[None, :]
    grads.dcentroids += -cache.tcol[:, None] * dv_raw
    dxhat = cache.t @ dv_raw
    _check_finite("residual pooling", dt, dxhat)

    dalpha = dt * cache.u[:, None]
    if burst.enabled:
        du = (dt * cache.alpha).sum(axis=1)
        log_w = np.log(cache.w)
        dw = du * (-burst.p) * cache.u / cache.w
        grads.dp += float((du * (-log_w) * cache.u).sum())
        dz = dw[:, None] * cache.sig * (1.0 - cache.sig)
        grads.da += float((dz * cache.gram).sum())
        grads.db += float(dz.sum())
        dgram = burst.a * dz
        dxhat += (dgram + dgram.T) @ cache.xhat
        _check_finite("soft count", dxhat)

    inner = (dalpha * cache.alpha).sum(axis=1, keepdims=True)
    dlogits = cache.alpha * (dalpha - inner)
    grads.dweights += dlogits.T @ cache.xhat
    grads.dbiases += dlogits.sum(axis=0)
    dxhat += dlogits @ weights
    _check_finite("soft assignment", dxhat)

    if trainable.train_projection:
        prepool = model.prepool
        row_dots = np.einsum("nd,nd->n", cache.xhat, dxhat)
        dpre = (dxhat - cache.xhat * row_dots[:, None]) / cache.row_norms[:, None]
        centered = cache.x - prepool.mean
        grads.drotation += centered.T @ dpre
        grads.dmean += -(dpre @ prepool.rotation.T).sum(axis=0)
        _check_finite("pre-pool projection", grads.drotation, grads.dmean)


def _flatten_grads(trainable: TrainableModel, grads: _GradAccum) -> np.ndarray:
    parts = []
    if trainable.train_burst:
        parts.append(np.array([grads.da, grads.db, grads.dp]))
    if trainable.train_centroids:
        parts.append(grads.dcentroids.ravel())
    if trainable.train_assignment:
        parts.append(grads.dweights.ravel())
        parts.append(grads.dbiases)
    if trainable.train_projection:
        parts.append(grads.drotation.ravel())
        parts.append(grads.dmean)
    if not parts:
        return np.empty(0)
    return np.concatenate(parts)


def _batch_loss_and_grad(
    trainable: TrainableModel, batch: TripletBatch, grads: _GradAccum | None
) -> float:
    """Triplet loss on pre-whitening descriptors; optionally accumulate grads."""
    model = trainable.model
    cache_a = _forward_model(batch.anchor.features, model)
    cache_p = _forward_model(batch.positive.features, model)
    caches_n = [_forward_model(neg.features, model) for neg in batch.negatives]

    a, p = cache_a.y, cache_p.y
    diff_ap = a - p
    d_ap = float(np.linalg.norm(diff_ap))
    unit_ap = diff_ap / d_ap if d_ap > HINGE_EPS else np.zeros_like(diff_ap)

    loss = 0.0
    dy_a = np.zeros_like(a)
    dy_p = np.zeros_like(p)
    for cache_n in caches_n:
        diff_an = a - cache_n.y
        d_an = float(np.linalg.norm(diff_an))
        term = d_ap - d_an + batch.margin
        if term <= 0.0:
            continue
        loss += term
        if grads is not None:
            unit_an = diff_an / d_an if d_an > HINGE_EPS else np.zeros_like(diff_an)
            dy_a += unit_ap - unit_an
            dy_p += -unit_ap
            _backward_cache(cache_n, unit_an, trainable, grads)
    if grads is not None:
        if np.any(dy_a):
            _backward_cache(cache_a, dy_a, trainable, grads)
        if np.any(dy_p):
            _backward_cache(cache_p, dy_p, trainable, grads)
    return loss


def _loss_and_grad(
    trainable: TrainableModel, batches: Sequence[TripletBatch]
) -> tuple[float, np.ndarray]:
    grads = _zero_grads(trainable)
    total = 0.0
    for batch in batches:
        total += _batch_loss_and_grad(trainable, batch, grads)
    if not np.isfinite(total):
        raise NumericalError(f"non-finite training loss: {total}")
    return total, _flatten_grads(trainable, grads)


def batch_loss(trainable: TrainableModel, batch: TripletBatch) -> float:
    """Triplet loss of one batch under the current parameters (no gradients)."""
    return _batch_loss_and_grad(trainable, batch, None)


def backward(trainable: TrainableModel, batch: TripletBatch) -> np.ndarray:
    """Analytic gradient of the batch triplet loss, aligned with flatten_params."""
    return _loss_and_grad(trainable, [batch])[1]


def central_differences(
    fn: Callable[[np.ndarray], float], theta: np.ndarray, h: float
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one axis at a time."""
    if h == 0:
        raise ConfigError("finite-difference step h must be nonzero")
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        bumped = theta.copy()
        bumped[i] = theta[i] + h
        upper = fn(bumped)
        bumped[i] = theta[i] - h
        lower = fn(bumped)
        grad[i] = (upper - lower) / (2.0 * h)
    return grad


def finite_diff_grad(
    trainable: TrainableModel, batch: TripletBatch, h: float = 1e-5
) -> np.ndarray:
    """Finite-difference oracle for backward(); O(P) loss evaluations."""
    theta = flatten_params(trainable)
    return central_differences(
        lambda vec: batch_loss(unflatten_params(trainable, vec), batch), theta, h
    )


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    steps: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.steps < 0:
            raise ConfigError(f"step count must be nonnegative, got {self.steps}")


@dataclass(frozen=True)
class TrainResult:
    """Final model plus the loss trace: rows of (step, loss, a, b, p)."""

    model: TrainableModel
    trace: np.ndarray

    @property
    def initial_loss(self) -> float:
        return float(self.trace[0, 1])

    @property
    def final_loss(self) -> float:
        return float(self.trace[-1, 1])


def train(
    trainable: TrainableModel, batches: Sequence[TripletBatch], config: TrainConfig
) -> TrainResult:
    """Plain gradient descent over the summed triplet loss of all batches.

    Deterministic: batches are visited in the given order every step and the
    full-batch gradient is applied with a fixed learning rate. The trace has
    steps+1 rows; row s holds the loss at the parameters before update s,
    and the last row holds the final loss.
    """
    if not batches:
        raise DataError("training needs at least one triplet batch")
    current = trainable
    rows = []
    for step in range(config.steps):
        try:
            loss, grad = _loss_and_grad(current, batches)
        except NumericalError as exc:
            raise NumericalError(f"step {step}: {exc}") from exc
        burst = current.model.burst
        rows.append((float(step), loss, burst.a, burst.b, burst.p))
        if grad.size:
            theta = flatten_params(current) - config.lr * grad
            if not np.all(np.isfinite(theta)):
                raise NumericalError(f"step {step}: parameter update diverged")
            current = unflatten_params(current, theta)
    final_loss = sum(batch_loss(current, batch) for batch in batches)
    if not np.isfinite(final_loss):
        raise NumericalError(f"step {config.steps}: non-finite final loss")
    burst = current.model.burst
    rows.append((float(config.steps), final_loss, burst.a, burst.b, burst.p))
    return TrainResult(model=current, trace=np.asarray(rows, dtype=np.float64))


def gradient_check(trainable: TrainableModel, batch: TripletBatch, h: float = 1e-5) -> float:
    """Worst per-parameter relative error of backward() against the oracle."""
    analytic = backward(trainable, batch)
    numeric = finite_diff_grad(trainable, batch, h)
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / scale))


def _case_is_smooth(trainable: TrainableModel, batch: TripletBatch) -> bool:
    """Reject cases near hinge kinks or normalization zero-guards.

    Central differences step across those boundaries; the gradient contract
    only covers the smooth interior.
    """
    model = trainable.model
    caches = [_forward_model(fs.features, model) for fs in
              (batch.anchor, batch.positive, *batch.negatives)]
    for cache in caches:
        if np.min(cache.v_norms) < 1e-5 or cache.g < 1e-5:
            return False
    a, p = caches[0].y, caches[1].y
    d_ap = float(np.linalg.norm(a - p))
    if d_ap < 1e-4:
        return False
    n_active = 0
    for cache_n in caches[2:]:
        d_an = float(np.linalg.norm(a - cache_n.y))
        term = d_ap - d_an + batch.margin
        if d_an < 1e-4 or abs(term) < 1e-3:
            return False
        if term > 0:
            n_active += 1
    return n_active >= 1


def make_gradcheck_case(seed: int, with_projection: bool = True) -> tuple[TrainableModel, TripletBatch]:
    """Seeded random tiny model and triplet suitable for finite differences.

    Sizes stay small (N <= 6, D <= 5, C <= 3) so the O(P) oracle is cheap;
    resampled until the instance sits safely inside the smooth region.
    """
    rng = make_rng(seed)
    trainable = batch = None
    for _ in range(64):
        n = int(rng.integers(2, 7))
        d = int(rng.integers(3, 6))
        c = int(rng.integers(2, 4))
        use_projection = with_projection and bool(rng.integers(0, 2))
        d_prime = int(rng.integers(2, d + 1)) if use_projection else d
        vocab = Vocabulary(
            centroids=rng.standard_normal((c, d_prime)),
            fitted_on_normalized=False,
            seed=seed,
            inertia=1.0,
        )
        assignment = AssignmentParams(
            weights=rng.standard_normal((c, d_prime)),
            biases=0.1 * rng.standard_normal(c),
            sharpness_init=10.0,
        )
        burst = BurstParams(
            a=2.0 + rng.uniform(), b=-1.0 + rng.uniform(), p=0.8 + 0.4 * rng.uniform(),
            enabled=True,
        )
        prepool = None
        if use_projection:
            prepool = PcaModel(
                mean=0.1 * rng.standard_normal(d),
                rotation=rng.standard_normal((d, d_prime)),
                eigenvalues=np.zeros(d_prime),
                init_kind=INIT_TRAINED,
            )
        model = AggregationModel(
            vocabulary=vocab, assignment=assignment, burst=burst, prepool=prepool
        )
        trainable = TrainableModel(
            model=model,
            train_burst=True,
            train_centroids=True,
            train_assignment=True,
            train_projection=use_projection,
        )

        def image(name: str) -> LocalFeatureSet:
            return LocalFeatureSet(image_id=name, features=rng.standard_normal((n, d)))

        batch = TripletBatch(
            anchor=image("anchor"),
            positive=image("positive"),
            negatives=tuple(image(f"neg{i}") for i in range(int(rng.integers(1, 3)))),
            margin=0.2 + 0.2 * rng.uniform(),
        )
        if _case_is_smooth(trainable, batch):
            break
    return trainable, batch


def build_triplets(
    manifest,
    negatives_per_anchor: int,
    margin: float,
    seed: int,
    query_ids: set[str] | None = None,
) -> list[TripletBatch]:
    """Mine one triplet batch per query from a dataset manifest.

    Positive = the planar-nearest in-radius reference; negatives = a seeded
    sample (without replacement) of out-of-radius references. Queries with
    no positive or no negative are skipped; query_ids restricts the anchors.
    """
    from .retrieval import ground_truth_within_radius

    if negatives_per_anchor < 1:
        raise ConfigError(f"need at least 1 negative per anchor, got {negatives_per_anchor}")
    gt = ground_truth_within_radius(manifest)
    entries = {e.image_id: e for e in manifest.entries}
    ref_ids = sorted(e.image_id for e in manifest.references)
    rng = make_rng(seed)
    cache: dict[str, LocalFeatureSet] = {}

    def features_of(image_id: str) -> LocalFeatureSet:
        if image_id not in cache:
            cache[image_id] = load_features(entries[image_id].feature_path, image_id)
        return cache[image_id]

    batches = []
    for query in manifest.queries:
        if query_ids is not None and query.image_id not in query_ids:
            continue
        positives = gt[query.image_id]
        if not positives:
            continue
        positive_id = min(
            sorted(positives),
            key=lambda rid: (
                (entries[rid].x_m - query.x_m) ** 2 + (entries[rid].y_m - query.y_m) ** 2,
                rid,
            ),
        )
        negative_pool = [rid for rid in ref_ids if rid not in positives]
        if not negative_pool:
            continue
        count = min(negatives_per_anchor, len(negative_pool))
        picked = rng.choice(len(negative_pool), size=count, replace=False)
        batches.append(
            TripletBatch(
                anchor=features_of(query.image_id),
                positive=features_of(positive_id),
                negatives=tuple(features_of(negative_pool[i]) for i in sorted(picked)),
                margin=margin,
            )
        )
    if not batches:
        raise DataError("no query produced a usable triplet")
    return batches


def save_trace(trace: np.ndarray, path: str | Path) -> None:
    """Write a loss trace as CSV with header step,loss,a,b,p."""
    trace = np.asarray(trace, dtype=np.float64)
    try:
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["step", "loss", "a", "b", "p"])
            for row in trace:
                writer.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])
    except OSError as exc:
        raise IoError(f"cannot write trace {path}: {exc}") from exc
