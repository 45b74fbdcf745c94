"""Retrieval evaluation: manifests, metric ground truth, Recall@K, synthetic data.

Ground truth is planar: reference r is a positive for query q when their
Euclidean distance in meters is within the manifest radius (default 25).
Search is exhaustive over unit-norm global descriptors; queries with no
in-radius reference are excluded from the recall denominator and counted.

The synthetic benchmark builds places whose images mix one distinctive
feature with a block of near-identical "bursty" features drawn from a small
pool shared across places. Each image's burst sits in the same vocabulary
cell as distinctive content, so an undiscounted aggregate is dominated by
per-image burst noise while the discounted one recovers the place signal.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DegenerateError,
    IoError,
    ManifestError,
    ShapeError,
)
from .featureio import GlobalDescriptor, LocalFeatureSet, save_features
from .rng import make_rng

DEFAULT_RADIUS_M = 25.0
SPLIT_QUERY = "query"
SPLIT_REFERENCE = "reference"
_ENTRY_KEYS = {"image_id", "feature_path", "x_m", "y_m", "split"}


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    feature_path: str
    x_m: float
    y_m: float
    split: str

    def __post_init__(self):
        if self.split not in (SPLIT_QUERY, SPLIT_REFERENCE):
            raise ManifestError(f"{self.image_id}: unknown split {self.split!r}")
        if not (np.isfinite(self.x_m) and np.isfinite(self.y_m)):
            raise ManifestError(f"{self.image_id}: non-finite position")


@dataclass(frozen=True)
class DatasetManifest:
    """Image ids, feature paths, planar positions, and the positive radius."""

    entries: tuple[ManifestEntry, ...]
    radius_m: float = DEFAULT_RADIUS_M

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if not self.radius_m >= 0:
            raise ManifestError(f"radius must be nonnegative, got {self.radius_m}")
        ids = [e.image_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ManifestError(f"duplicate image ids: {dupes}")
        if not any(e.split == SPLIT_QUERY for e in self.entries):
            raise ManifestError("manifest has no query entries")
        if not any(e.split == SPLIT_REFERENCE for e in self.entries):
            raise ManifestError("manifest has no reference entries")

    @property
    def queries(self) -> tuple[ManifestEntry, ...]:
        return tuple(e for e in self.entries if e.split == SPLIT_QUERY)

    @property
    def references(self) -> tuple[ManifestEntry, ...]:
        return tuple(e for e in self.entries if e.split == SPLIT_REFERENCE)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read a JSONL manifest; relative feature paths resolve against its directory.

    A line carrying only radius_m sets the positive radius. Every feature
    path must exist at load time.
    """
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    radius = DEFAULT_RADIUS_M
    entries = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        if set(obj) == {"radius_m"}:
            radius = float(obj["radius_m"])
            continue
        unknown = set(obj) - _ENTRY_KEYS
        missing = _ENTRY_KEYS - set(obj)
        if unknown or missing:
            raise ManifestError(
                f"{path}:{lineno}: unknown keys {sorted(unknown)}, missing {sorted(missing)}"
            )
        resolved = Path(obj["feature_path"])
        if not resolved.is_absolute():
            resolved = path.parent / resolved
        if not resolved.is_file():
            raise ManifestError(f"{path}:{lineno}: feature file not found: {resolved}")
        entries.append(
            ManifestEntry(
                image_id=str(obj["image_id"]),
                feature_path=str(resolved),
                x_m=float(obj["x_m"]),
                y_m=float(obj["y_m"]),
                split=str(obj["split"]),
            )
        )
    return DatasetManifest(entries=tuple(entries), radius_m=radius)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write JSONL: one radius header line, then one entry per line."""
    path = Path(path)
    lines = [json.dumps({"radius_m": manifest.radius_m})]
    for entry in manifest.entries:
        feature_path = entry.feature_path
        try:
            feature_path = os.path.relpath(feature_path, path.parent)
        except ValueError:
            pass  # different drive or similar; keep it absolute
        lines.append(
            json.dumps(
                {
                    "image_id": entry.image_id,
                    "feature_path": feature_path,
                    "x_m": entry.x_m,
                    "y_m": entry.y_m,
                    "split": entry.split,
                },
                sort_keys=True,
            )
        )
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write manifest {path}: {exc}") from exc


def ground_truth_within_radius(manifest: DatasetManifest) -> dict[str, set[str]]:
    """Per-query set of reference ids within the manifest radius (planar)."""
    queries = manifest.queries
    references = manifest.references
    q_pos = np.array([(q.x_m, q.y_m) for q in queries])
    r_pos = np.array([(r.x_m, r.y_m) for r in references])
    diff = q_pos[:, None, :] - r_pos[None, :, :]
    within = np.sqrt(np.einsum("qrd,qrd->qr", diff, diff)) <= manifest.radius_m
    ref_ids = [r.image_id for r in references]
    return {
        q.image_id: {ref_ids[j] for j in np.flatnonzero(within[i])}
        for i, q in enumerate(queries)
    }


def rank_references(
    query_desc: GlobalDescriptor, reference_descs: list[GlobalDescriptor]
) -> list[tuple[str, float]]:
    """All references sorted by ascending Euclidean distance, ties by id."""
    ids = np.array([r.image_id for r in reference_descs])
    if len(reference_descs) == 0:
        return []
    dims = {r.dim for r in reference_descs} | {query_desc.dim}
    if len(dims) != 1:
        raise ShapeError(f"descriptor dims differ: {sorted(dims)}")
    stack = np.stack([r.vector for r in reference_descs])
    dists = np.linalg.norm(stack - query_desc.vector, axis=1)
    order = np.lexsort((ids, dists))
    return [(str(ids[j]), float(dists[j])) for j in order]


def recall_at_k(
    rankings: dict[str, list[tuple[str, float]]],
    ground_truth: dict[str, set[str]],
    ks: list[int],
) -> dict[int, float]:
    """Fraction of queries whose top-K holds at least one positive.

    Queries whose ground-truth set is empty are dropped from the
    denominator; every ranked query must appear in ground_truth.
    """
    for k in ks:
        if k < 1:
            raise ConfigError(f"recall cutoff must be >= 1, got {k}")
    missing = set(rankings) - set(ground_truth)
    if missing:
        raise ContractError(f"queries without ground truth: {sorted(missing)[:5]}")
    scored = {q: ranked for q, ranked in rankings.items() if ground_truth[q]}
    if not scored:
        raise DegenerateError("no query has any in-radius reference")
    recalls = {}
    for k in ks:
        hits = sum(
            1
            for q, ranked in scored.items()
            if any(ref_id in ground_truth[q] for ref_id, _ in ranked[:k])
        )
        recalls[int(k)] = hits / len(scored)
    return recalls


@dataclass(frozen=True)
class RetrievalResult:
    """Rankings, recalls, and bookkeeping for one evaluation run."""

    rankings: dict[str, list[tuple[str, float]]]
    recall_at: dict[int, float]
    excluded_queries: int
    config_hash: str
    radius_m: float


def evaluate(
    manifest: DatasetManifest,
    descriptors: dict[str, GlobalDescriptor],
    ks: list[int] = (1, 5),
) -> RetrievalResult:
    """Rank every query against every reference and score Recall@K."""
    needed = [e.image_id for e in manifest.entries]
    missing = [i for i in needed if i not in descriptors]
    if missing:
        raise DataError(f"descriptors missing for {len(missing)} images, e.g. {missing[:5]}")
    hashes = {descriptors[i].config_hash for i in needed}
    if len(hashes) != 1:
        raise DataError(f"descriptors come from {len(hashes)} different models")
    gt = ground_truth_within_radius(manifest)
    reference_descs = [descriptors[r.image_id] for r in manifest.references]
    rankings = {
        q.image_id: rank_references(descriptors[q.image_id], reference_descs)
        for q in manifest.queries
    }
    recalls = recall_at_k(rankings, gt, list(ks))
    excluded = sum(1 for q in manifest.queries if not gt[q.image_id])
    return RetrievalResult(
        rankings=rankings,
        recall_at=recalls,
        excluded_queries=excluded,
        config_hash=hashes.pop(),
        radius_m=manifest.radius_m,
    )


def report_dict(result: RetrievalResult) -> dict:
    return {
        "config_hash": result.config_hash,
        "radius_m": result.radius_m,
        "recalls": {str(k): result.recall_at[k] for k in sorted(result.recall_at)},
        "excluded_queries": result.excluded_queries,
    }


def write_report(result: RetrievalResult, path: str | Path) -> None:
    """Emit the JSON recall report."""
    try:
        Path(path).write_text(json.dumps(report_dict(result), sort_keys=True, indent=2) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write report {path}: {exc}") from exc


@dataclass(frozen=True)
class GenParams:
    """Knobs for the synthetic burst benchmark.

    Geometry puts places spacing_m apart with the query query_offset_m from
    its own reference, so each query has exactly one in-radius reference.
    Each image carries one distinctive feature (a wide perturbation of its
    burst pool's base direction, shared between query and reference up to
    distinct_noise) plus burst_size near-copies of a pool base; the pool is
    shared across places and the per-image burst offset makes two images'
    bursts agree in cluster but not in residual direction.
    """

    n_places: int = 64
    n_distractors: int = 4
    burst_size: int = 16
    d: int = 32
    n_pool: int = 8
    mu_spread: float = 3.0
    distinct_noise: float = 0.05
    burst_offset: float = 0.4
    burst_noise: float = 0.01
    spacing_m: float = 100.0
    query_offset_m: float = 5.0
    radius_m: float = DEFAULT_RADIUS_M

    def __post_init__(self):
        if self.n_places < 2:
            raise ConfigError(f"need at least 2 places, got {self.n_places}")
        if self.n_distractors < 0:
            raise ConfigError(f"distractor count must be >= 0, got {self.n_distractors}")
        if self.burst_size < 0:
            raise ConfigError(f"burst size must be >= 0, got {self.burst_size}")
        if self.d < 2:
            raise ConfigError(f"feature dim must be >= 2, got {self.d}")
        if self.n_pool < 2:
            raise ConfigError(f"pool size must be >= 2, got {self.n_pool}")
        if not 0 < self.query_offset_m < self.radius_m:
            raise ConfigError("query offset must sit inside the positive radius")
        if self.spacing_m < 2 * self.radius_m:
            raise ConfigError("place spacing must be at least twice the radius")


def _unit(vec: np.ndarray) -> np.ndarray:
    return vec / np.linalg.norm(vec)


def generate_burst_benchmark(
    out_dir: str | Path, seed: int, params: GenParams = GenParams()
) -> DatasetManifest:
    """Write feature files plus manifest.jsonl under out_dir; returns the manifest.

    Deterministic per (seed, params): identical calls produce byte-identical
    files.
    """
    out_dir = Path(out_dir)
    feature_dir = out_dir / "features"
    feature_dir.mkdir(parents=True, exist_ok=True)
    rng = make_rng(seed)

    pool = np.stack([_unit(rng.standard_normal(params.d)) for _ in range(params.n_pool)])

    def burst_block(pool_id: int) -> np.ndarray:
        offset = rng.standard_normal(params.d) * params.burst_offset
        base = pool[pool_id] + offset
        rows = base + rng.standard_normal((params.burst_size, params.d)) * params.burst_noise
        return rows / np.linalg.norm(rows, axis=1, keepdims=True)

    def image_rows(mu: np.ndarray, pool_id: int) -> np.ndarray:
        distinct = _unit(mu + rng.standard_normal(params.d) * params.distinct_noise)
        if params.burst_size == 0:
            return distinct[None, :]
        return np.vstack([distinct[None, :], burst_block(pool_id)])

    entries = []

    def emit(image_id: str, rows: np.ndarray, x: float, y: float, split: str) -> None:
        path = feature_dir / f"{image_id}.vbff"
        save_features(LocalFeatureSet(image_id=image_id, features=rows), path)
        entries.append(
            ManifestEntry(
                image_id=image_id, feature_path=str(path), x_m=x, y_m=y, split=split
            )
        )

    for j in range(params.n_places):
        query_pool = j % params.n_pool
        ref_pool = (query_pool + 1) % params.n_pool
        mu = _unit(pool[query_pool] + rng.standard_normal(params.d) * params.mu_spread)
        x = j * params.spacing_m
        emit(f"q{j:03d}", image_rows(mu, query_pool), x, params.query_offset_m, SPLIT_QUERY)
        emit(f"r{j:03d}", image_rows(mu, ref_pool), x, 0.0, SPLIT_REFERENCE)

    for j in range(params.n_distractors):
        d_pool = j % params.n_pool
        mu = _unit(pool[d_pool] + rng.standard_normal(params.d) * params.mu_spread)
        x = j * params.spacing_m + params.spacing_m / 2.0
        emit(f"d{j:03d}", image_rows(mu, (d_pool + 1) % params.n_pool), x, 0.0, SPLIT_REFERENCE)

    manifest = DatasetManifest(entries=tuple(entries), radius_m=params.radius_m)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
