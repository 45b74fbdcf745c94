"""Cluster vocabulary: k-means fitting, hard assignment, persistence."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DegenerateError, IoError, ShapeError
from .featureio import DTYPE_F64, LocalFeatureSet, read_matrix, write_matrix
from .rng import make_rng

DISTINCT_CENTROID_EPS = 1e-9


@dataclass(frozen=True)
class Vocabulary:
    """C cluster centroids in the (possibly projected) feature space."""

    centroids: np.ndarray
    fitted_on_normalized: bool
    seed: int
    inertia: float

    def __post_init__(self):
        cents = np.ascontiguousarray(self.centroids, dtype=np.float64)
        if cents.ndim != 2 or cents.shape[0] < 1 or cents.shape[1] < 1:
            raise ShapeError(f"centroids must be C x D with C,D >= 1, got {cents.shape}")
        if not np.all(np.isfinite(cents)):
            raise DataError("non-finite centroid values")
        if self.inertia < 0:
            raise DataError(f"inertia must be nonnegative, got {self.inertia}")
        cents.flags.writeable = False
        object.__setattr__(self, "centroids", cents)

    @property
    def c(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """All-pairs squared Euclidean distances, (M, C), clamped at zero."""
    d2 = (
        np.sum(points * points, axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + np.sum(centroids * centroids, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _plusplus_init(samples: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: D^2-weighted draws without replacement."""
    m = samples.shape[0]
    chosen = np.empty(c, dtype=np.int64)
    chosen[0] = rng.integers(m)
    d2 = _squared_distances(samples, samples[chosen[:1]])[:, 0]
    for k in range(1, c):
        total = d2.sum()
        if total <= 0.0:
            # All remaining points coincide with a centroid; fall back to uniform.
            chosen[k] = rng.integers(m)
        else:
            chosen[k] = rng.choice(m, p=d2 / total)
        d2 = np.minimum(d2, _squared_distances(samples, samples[chosen[k : k + 1]])[:, 0])
    return samples[chosen].copy()


def kmeans_fit(
    samples: np.ndarray,
    c: int,
    seed: int,
    max_iters: int = 100,
    tol: float = 1e-6,
    inertia_trace: list[float] | None = None,
) -> Vocabulary:
    """Lloyd's algorithm with k-means++ seeding, deterministic per seed.

    Stops when the largest centroid movement drops below `tol` or after
    `max_iters` iterations. An empty cluster is re-seeded to the point
    currently farthest from its assigned centroid. Results depend on sample
    row order (it shifts seed consumption), so callers fix both order and
    seed for reproducibility.
    """
    samples = np.ascontiguousarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ShapeError(f"samples must be M x D, got shape {samples.shape}")
    if not np.all(np.isfinite(samples)):
        raise DataError("non-finite sample values")
    m = samples.shape[0]
    if c < 1:
        raise DataError(f"cluster count must be >= 1, got {c}")
    if m < c:
        raise DataError(f"need at least {c} samples to fit {c} clusters, got {m}")

    rng = make_rng(seed)
    centroids = _plusplus_init(samples, c, rng)

    assignment = np.zeros(m, dtype=np.int64)
    for _ in range(max_iters):
        d2 = _squared_distances(samples, centroids)
        assignment = np.argmin(d2, axis=1)
        point_d2 = d2[np.arange(m), assignment]

        new_centroids = centroids.copy()
        counts = np.bincount(assignment, minlength=c)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assignment, samples)
        nonempty = counts > 0
        new_centroids[nonempty] = sums[nonempty] / counts[nonempty, None]

        if not np.all(nonempty):
            # Each empty cluster claims the current farthest point, once.
            claimable = point_d2.copy()
            for k in np.flatnonzero(~nonempty):
                far = int(np.argmax(claimable))
                new_centroids[k] = samples[far]
                claimable[far] = -np.inf

        movement = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if inertia_trace is not None:
            trace_d2 = _squared_distances(samples, centroids)
            inertia_trace.append(float(np.min(trace_d2, axis=1).sum()))
        if movement < tol:
            break

    d2 = _squared_distances(samples, centroids)
    inertia = float(np.min(d2, axis=1).sum())

    if c > 1:
        gaps = _squared_distances(centroids, centroids)
        np.fill_diagonal(gaps, np.inf)
        if np.min(gaps) < DISTINCT_CENTROID_EPS**2:
            raise DegenerateError("k-means produced (near-)identical centroids")

    normalized = bool(np.all(np.abs(np.linalg.norm(samples, axis=1) - 1.0) < 1e-5))
    return Vocabulary(
        centroids=centroids, fitted_on_normalized=normalized, seed=seed, inertia=inertia
    )


def assign_hard(features: LocalFeatureSet, vocab: Vocabulary) -> np.ndarray:
    """Index of the nearest centroid per row; ties break to the lowest index.

    Distances are computed from explicit difference vectors (not the dot-product
    expansion) so constructed exact ties resolve deterministically.
    """
    if features.dim != vocab.dim:
        raise ShapeError(f"feature dim {features.dim} != vocabulary dim {vocab.dim}")
    out = np.empty(features.n, dtype=np.int64)
    chunk = max(1, 8_388_608 // (vocab.c * vocab.dim))
    for start in range(0, features.n, chunk):
        block = features.features[start : start + chunk]
        diffs = block[:, None, :] - vocab.centroids[None, :, :]
        out[start : start + chunk] = np.argmin(np.einsum("ncd,ncd->nc", diffs, diffs), axis=1)
    return out


def save_vocabulary(vocab: Vocabulary, path: str | Path) -> None:
    """Persist centroids as VBFF f64 plus a JSON sidecar with the scalars."""
    path = Path(path)
    write_matrix(path, vocab.centroids, dtype_tag=DTYPE_F64)
    meta = {
        "c": vocab.c,
        "dim": vocab.dim,
        "seed": vocab.seed,
        "inertia": vocab.inertia,
        "fitted_on_normalized": vocab.fitted_on_normalized,
    }
    try:
        path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write vocabulary sidecar for {path}: {exc}") from exc


def load_vocabulary(path: str | Path) -> Vocabulary:
    """Inverse of save_vocabulary."""
    path = Path(path)
    centroids = read_matrix(path)
    try:
        meta = json.loads(path.with_suffix(".json").read_text())
    except OSError as exc:
        raise IoError(f"cannot read vocabulary sidecar for {path}: {exc}") from exc
    if centroids.shape != (meta["c"], meta["dim"]):
        raise ShapeError(
            f"{path}: centroid shape {centroids.shape} disagrees with sidecar "
            f"({meta['c']}, {meta['dim']})"
        )
    return Vocabulary(
        centroids=centroids,
        fitted_on_normalized=bool(meta["fitted_on_normalized"]),
        seed=int(meta["seed"]),
        inertia=float(meta["inertia"]),
    )
