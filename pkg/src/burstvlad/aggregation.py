"""Burst-aware VLAD aggregation.

Local features are softly assigned to vocabulary clusters, each feature's
residual against its cluster centroids is down-weighted by a soft count of
how many near-duplicates it has in the same image, and the per-cluster
residual sums are intra-normalized, flattened, and globally normalized into
one unit-length global descriptor.

The soft count for feature i is

    w_i = sum_j sigmoid(a * d_ij + b)

over the full cosine Gram matrix (self term included, which keeps every
w_i >= sigmoid(a + b) > 0). The aggregation then uses per-feature weight
alpha_ik / w_i^p, so p = 0 or disabling the discount recovers vanilla
soft-assignment VLAD exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
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
from .featureio import (
    DTYPE_F64,
    UNIT_NORM_TOL,
    GlobalDescriptor,
    LocalFeatureSet,
    normalize_rows,
    read_matrix,
    write_matrix,
)
from .projection import PcaModel, WhiteningModel, load_pca_model, load_whitening_model, \
    save_pca_model, save_whitening_model, whiten_vector
from .vocabulary import Vocabulary

DEFAULT_A = 10.0
DEFAULT_B = -5.0
DEFAULT_P = 1.0
DEFAULT_SHARPNESS = 100.0

# Soft counts below this would underflow the discount's log path.
FLOOR_EPS = 1e-12
# Cluster blocks with norm below this stay zero instead of being normalized.
INTRA_NORM_EPS = 1e-12


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function, elementwise.

    Written as 0.5 * (1 + tanh(z / 2)): tanh saturates cleanly at both ends,
    so no branch on the sign of z is needed, and one transcendental pass is
    what keeps the N x N soft-count evaluation cheap.
    """
    out = np.asarray(np.multiply(z, 0.5, dtype=np.float64))
    np.tanh(out, out=out)
    out += 1.0
    out *= 0.5
    return out


@dataclass(frozen=True)
class BurstParams:
    """Soft-count discount knobs: slope a, offset b, count exponent p."""

    a: float = DEFAULT_A
    b: float = DEFAULT_B
    p: float = DEFAULT_P
    enabled: bool = True

    def __post_init__(self):
        vals = (float(self.a), float(self.b), float(self.p))
        if not all(np.isfinite(v) for v in vals):
            raise DataError(f"burst parameters must be finite, got a={self.a} b={self.b} p={self.p}")
        object.__setattr__(self, "a", vals[0])
        object.__setattr__(self, "b", vals[1])
        object.__setattr__(self, "p", vals[2])
        # Self-similarity term bounds w_i from below; keep that bound usable.
        if self.enabled and float(sigmoid(np.array([self.a + self.b]))[0]) < FLOOR_EPS:
            raise ConfigError(
                f"sigmoid(a + b) = sigmoid({self.a + self.b}) underflows the soft-count floor"
            )


@dataclass(frozen=True)
class AssignmentParams:
    """Per-cluster linear filters for the learnable soft assignment."""

    weights: np.ndarray
    biases: np.ndarray
    sharpness_init: float = DEFAULT_SHARPNESS

    def __post_init__(self):
        weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        biases = np.ascontiguousarray(self.biases, dtype=np.float64).reshape(-1)
        if weights.ndim != 2 or weights.shape[0] != biases.shape[0]:
            raise ShapeError(
                f"weights must be C x D' with one bias per cluster, got {weights.shape} "
                f"and {biases.shape}"
            )
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(biases))):
            raise DataError("non-finite assignment parameters")
        if not self.sharpness_init > 0:
            raise ConfigError(f"sharpness must be positive, got {self.sharpness_init}")
        weights.flags.writeable = False
        biases.flags.writeable = False
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)

    @property
    def c(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


def _hash_arrays(meta: dict, arrays: list[np.ndarray]) -> str:
    digest = hashlib.sha256()
    digest.update(json.dumps(meta, sort_keys=True).encode())
    for arr in arrays:
        digest.update(b"\x00")
        digest.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return digest.hexdigest()


@dataclass(frozen=True)
class AggregationModel:
    """Everything one descriptor needs: vocabulary, assignment, discount, projections."""

    vocabulary: Vocabulary
    assignment: AssignmentParams
    burst: BurstParams
    prepool: PcaModel | None = None
    whitening: WhiteningModel | None = None
    config_hash: str = field(init=False, default="")

    def __post_init__(self):
        if self.vocabulary.c < 2:
            raise ConfigError(f"need at least 2 clusters, got {self.vocabulary.c}")
        if (self.assignment.c, self.assignment.dim) != (self.vocabulary.c, self.vocabulary.dim):
            raise ShapeError(
                f"assignment is {self.assignment.c} x {self.assignment.dim} but vocabulary "
                f"is {self.vocabulary.c} x {self.vocabulary.dim}"
            )
        if self.prepool is not None and self.prepool.out_dim != self.vocabulary.dim:
            raise ShapeError(
                f"projection emits dim {self.prepool.out_dim} but vocabulary expects "
                f"{self.vocabulary.dim}"
            )
        if self.whitening is not None:
            flat = self.vocabulary.c * self.vocabulary.dim
            if self.whitening.in_dim != flat:
                raise ShapeError(
                    f"whitening input dim {self.whitening.in_dim} != flattened length {flat}"
                )
        object.__setattr__(self, "config_hash", self._compute_hash())

    def _compute_hash(self) -> str:
        meta = {
            "a": self.burst.a,
            "b": self.burst.b,
            "p": self.burst.p,
            "burst_enabled": self.burst.enabled,
            "c": self.vocabulary.c,
            "dim": self.vocabulary.dim,
            "sharpness_init": self.assignment.sharpness_init,
            "prepool": None
            if self.prepool is None
            else {
                "kind": self.prepool.init_kind,
                "in_dim": self.prepool.in_dim,
                "out_dim": self.prepool.out_dim,
            },
            "whitening": None
            if self.whitening is None
            else {
                "epsilon": self.whitening.epsilon,
                "in_dim": self.whitening.in_dim,
                "out_dim": self.whitening.out_dim,
            },
        }
        arrays = [self.vocabulary.centroids, self.assignment.weights, self.assignment.biases]
        if self.prepool is not None:
            arrays += [self.prepool.mean, self.prepool.rotation]
        if self.whitening is not None:
            arrays += [self.whitening.mean, self.whitening.rotation, self.whitening.eigenvalues]
        return _hash_arrays(meta, arrays)

    @property
    def c(self) -> int:
        return self.vocabulary.c

    @property
    def dim(self) -> int:
        return self.vocabulary.dim

    @property
    def in_dim(self) -> int:
        """Dimension aggregate() expects from raw input features."""
        return self.prepool.in_dim if self.prepool is not None else self.vocabulary.dim

    @property
    def out_dim(self) -> int:
        if self.whitening is not None:
            return self.whitening.out_dim
        return self.vocabulary.c * self.vocabulary.dim


def init_assignment_from_vocab(vocab: Vocabulary, s: float = DEFAULT_SHARPNESS) -> AssignmentParams:
    """Assignment filters whose init softmax ranks clusters by distance.

    weights_k = 2 s c_k and bias_k = -s ||c_k||^2 make the logit equal
    -s ||x - c_k||^2 plus an x-only term, so the initial argmax matches hard
    assignment; s controls how sparse the initial softmax is.
    """
    if not s > 0:
        raise ConfigError(f"sharpness must be positive, got {s}")
    centroids = vocab.centroids
    return AssignmentParams(
        weights=2.0 * s * centroids,
        biases=-s * np.einsum("kd,kd->k", centroids, centroids),
        sharpness_init=float(s),
    )


def _rows_of(features: LocalFeatureSet | np.ndarray) -> np.ndarray:
    if isinstance(features, LocalFeatureSet):
        return features.features
    rows = np.asarray(features, dtype=np.float64)
    if rows.ndim != 2:
        raise ShapeError(f"features must be N x D, got {rows.shape}")
    return rows


def soft_assign(features: LocalFeatureSet | np.ndarray, params: AssignmentParams) -> np.ndarray:
    """Row-stochastic N x C softmax of the per-cluster affine logits."""
    rows = _rows_of(features)
    if rows.shape[1] != params.dim:
        raise ShapeError(f"feature dim {rows.shape[1]} != assignment dim {params.dim}")
    logits = rows @ params.weights.T + params.biases
    return _softmax_rows(logits)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=1, keepdims=True)


def soft_count(features: LocalFeatureSet | np.ndarray, burst: BurstParams) -> np.ndarray:
    """Per-feature soft duplicate count over the full cosine Gram matrix.

    Requires unit-normalized rows so the Gram entries are cosine
    similarities; the LocalFeatureSet normalized flag (or the row norms of a
    bare array) is checked, not assumed.
    """
    if not burst.enabled:
        raise ContractError("soft count requested but the burst discount is disabled")
    if isinstance(features, LocalFeatureSet):
        if not features.normalized:
            raise ContractError("soft count needs L2-normalized features (normalized flag unset)")
        rows = features.features
    else:
        rows = _rows_of(features)
        if np.any(np.abs(np.linalg.norm(rows, axis=1) - 1.0) > UNIT_NORM_TOL):
            raise ContractError("soft count needs L2-normalized feature rows")
    gram = rows @ rows.T
    return sigmoid(burst.a * gram + burst.b).sum(axis=1)


@dataclass
class ForwardCache:
    """Every intermediate of one aggregation forward pass.

    Kept so the training module can replay the exact arithmetic in reverse;
    gram/sig/w/u are None-equivalents (w = u = ones) when the discount is off.
    """

    x: np.ndarray            # raw input rows, N x D
    pre_norm: np.ndarray     # rows after optional affine projection, before normalization
    row_norms: np.ndarray    # length N
    xhat: np.ndarray         # unit rows the aggregation sees, N x D'
    logits: np.ndarray       # N x C
    alpha: np.ndarray        # N x C softmax
    gram: np.ndarray | None  # N x N cosine similarities
    sig: np.ndarray | None   # sigmoid(a * gram + b)
    w: np.ndarray            # soft counts (ones when disabled)
    u: np.ndarray            # w^(-p) (ones when disabled)
    t: np.ndarray            # alpha * u[:, None]
    tcol: np.ndarray         # per-cluster total weight, length C
    v_raw: np.ndarray        # C x D' residual sums
    v_norms: np.ndarray      # length C
    v_intra: np.ndarray      # C x D' after per-cluster normalization
    g: float                 # norm of the flattened blocks
    y: np.ndarray            # final unit descriptor (pre-whitening), length C*D'


def _forward(
    x: np.ndarray,
    centroids: np.ndarray,
    weights: np.ndarray,
    biases: np.ndarray,
    burst: BurstParams,
    prepool: PcaModel | None,
) -> ForwardCache:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if prepool is not None:
        if x.shape[1] != prepool.in_dim:
            raise ShapeError(f"feature dim {x.shape[1]} != projection input dim {prepool.in_dim}")
        # x - 0 is x bit-for-bit, so skip the subtraction pass for centered
        # projections (random ones always are).
        centered = x - prepool.mean if prepool.mean.any() else x
        pre_norm = centered @ prepool.rotation
    else:
        pre_norm = x
    if pre_norm.shape[1] != centroids.shape[1]:
        raise ShapeError(
            f"feature dim {pre_norm.shape[1]} != vocabulary dim {centroids.shape[1]}"
        )
    row_norms = np.linalg.norm(pre_norm, axis=1)
    if np.any(row_norms < INTRA_NORM_EPS):
        raise DataError("feature row is (or projects to) a zero vector")
    xhat = pre_norm / row_norms[:, None]

    logits = xhat @ weights.T + biases
    alpha = _softmax_rows(logits)

    if burst.enabled:
        gram = xhat @ xhat.T
        z = burst.a * gram
        z += burst.b
        sig = sigmoid(z)
        w = sig.sum(axis=1)
        u = np.exp(-burst.p * np.log(w))
    else:
        gram = None
        sig = None
        w = np.ones(xhat.shape[0])
        u = np.ones(xhat.shape[0])

    t = alpha * u[:, None]
    tcol = t.sum(axis=0)
    v_raw = t.T @ xhat - tcol[:, None] * centroids

    v_norms = np.linalg.norm(v_raw, axis=1)
    keep = v_norms >= INTRA_NORM_EPS
    v_intra = np.where(keep[:, None], v_raw / np.where(keep, v_norms, 1.0)[:, None], 0.0)

    flat = v_intra.reshape(-1)
    g = float(np.linalg.norm(flat))
    if g < INTRA_NORM_EPS:
        raise DegenerateError("every cluster block aggregated to zero")
    y = flat / g
    return ForwardCache(
        x=x, pre_norm=pre_norm, row_norms=row_norms, xhat=xhat, logits=logits, alpha=alpha,
        gram=gram, sig=sig, w=w, u=u, t=t, tcol=tcol, v_raw=v_raw, v_norms=v_norms,
        v_intra=v_intra, g=g, y=y,
    )


def _forward_model(x: np.ndarray, model: AggregationModel) -> ForwardCache:
    return _forward(
        x,
        model.vocabulary.centroids,
        model.assignment.weights,
        model.assignment.biases,
        model.burst,
        model.prepool,
    )


def aggregate(features: LocalFeatureSet, model: AggregationModel) -> GlobalDescriptor:
    """One image's features to one unit-norm global descriptor.

    Pipeline: optional pre-pool projection, row normalization, soft
    assignment, soft-count discount (skipped when disabled), per-cluster
    residual sums, intra-normalization, flatten, global normalization,
    optional whitening. Pure and independent of feature row order.
    """
    cache = _forward_model(features.features, model)
    y = cache.y
    if model.whitening is not None:
        y = whiten_vector(y, model.whitening)
    return GlobalDescriptor(image_id=features.image_id, vector=y, config_hash=model.config_hash)


def aggregate_blocks(features: LocalFeatureSet, model: AggregationModel) -> np.ndarray:
    """The C x D' intra-normalized cluster blocks, before flattening.

    This is aggregate() stopped right before the global normalization; the
    per-cluster margin analysis consumes these blocks.
    """
    return _forward_model(features.features, model).v_intra


@dataclass(frozen=True)
class MarginAnalysis:
    """Per-cluster triplet margins and their descending rank (1 = largest)."""

    margins: np.ndarray
    ranks: np.ndarray

    @property
    def c(self) -> int:
        return self.margins.shape[0]


def cluster_margin_analysis(
    query_blocks: np.ndarray,
    positive_blocks: np.ndarray,
    negative_blocks: np.ndarray,
) -> MarginAnalysis:
    """How much each cluster block separates positive from negative.

    m_k = ||q_k - n_k|| - ||q_k - p_k|| per cluster; large m_k means cluster
    k pushes the negative away harder than it pulls the positive. Ranks are
    descending by margin, ties broken by lower cluster index.
    """
    blocks = [np.asarray(b, dtype=np.float64) for b in (query_blocks, positive_blocks, negative_blocks)]
    shapes = {b.shape for b in blocks}
    if len(shapes) != 1 or blocks[0].ndim != 2:
        raise ShapeError(f"block shapes differ or are not C x D': {[b.shape for b in blocks]}")
    q, p, n = blocks
    margins = np.linalg.norm(q - n, axis=1) - np.linalg.norm(q - p, axis=1)
    order = np.argsort(-margins, kind="stable")
    ranks = np.empty(margins.shape[0], dtype=np.int64)
    ranks[order] = np.arange(1, margins.shape[0] + 1)
    return MarginAnalysis(margins=margins, ranks=ranks)


def rank_shift(baseline: MarginAnalysis, discounted: MarginAnalysis) -> int:
    """Cluster whose margin rank improved most from baseline to discounted.

    Returns argmax_k of (baseline rank - discounted rank); ties go to the
    lowest cluster index.
    """
    if baseline.c != discounted.c:
        raise ShapeError(f"cluster counts differ: {baseline.c} vs {discounted.c}")
    return int(np.argmax(baseline.ranks - discounted.ranks))


_CENTROIDS_FILE = "centroids.vbff"
_WEIGHTS_FILE = "assign_weights.vbff"
_BIASES_FILE = "assign_biases.vbff"
_PREPOOL_DIR = "prepool"
_WHITENING_DIR = "whitening"
_META_FILE = "meta.json"


def save_bundle(model: AggregationModel, path: str | Path) -> None:
    """Persist a model as a directory of f64 matrices plus one meta.json."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_matrix(path / _CENTROIDS_FILE, model.vocabulary.centroids, dtype_tag=DTYPE_F64)
    write_matrix(path / _WEIGHTS_FILE, model.assignment.weights, dtype_tag=DTYPE_F64)
    write_matrix(path / _BIASES_FILE, model.assignment.biases.reshape(1, -1), dtype_tag=DTYPE_F64)
    if model.prepool is not None:
        save_pca_model(model.prepool, path / _PREPOOL_DIR)
    if model.whitening is not None:
        save_whitening_model(model.whitening, path / _WHITENING_DIR)
    meta = {
        "a": model.burst.a,
        "b": model.burst.b,
        "p": model.burst.p,
        "burst_enabled": model.burst.enabled,
        "sharpness_init": model.assignment.sharpness_init,
        "config_hash": model.config_hash,
        "has_prepool": model.prepool is not None,
        "has_whitening": model.whitening is not None,
        "vocab": {
            "seed": model.vocabulary.seed,
            "inertia": model.vocabulary.inertia,
            "fitted_on_normalized": model.vocabulary.fitted_on_normalized,
        },
    }
    try:
        (path / _META_FILE).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path / _META_FILE}: {exc}") from exc


def load_bundle(path: str | Path) -> AggregationModel:
    """Load a bundle directory; the stored hash must match the rebuilt model."""
    path = Path(path)
    try:
        meta = json.loads((path / _META_FILE).read_text())
    except OSError as exc:
        raise IoError(f"cannot read {path / _META_FILE}: {exc}") from exc
    except ValueError as exc:
        raise ManifestError(f"{path / _META_FILE}: invalid JSON: {exc}") from exc
    vocab_meta = meta["vocab"]
    model = AggregationModel(
        vocabulary=Vocabulary(
            centroids=read_matrix(path / _CENTROIDS_FILE),
            fitted_on_normalized=bool(vocab_meta["fitted_on_normalized"]),
            seed=int(vocab_meta["seed"]),
            inertia=float(vocab_meta["inertia"]),
        ),
        assignment=AssignmentParams(
            weights=read_matrix(path / _WEIGHTS_FILE),
            biases=read_matrix(path / _BIASES_FILE)[0],
            sharpness_init=float(meta["sharpness_init"]),
        ),
        burst=BurstParams(
            a=float(meta["a"]), b=float(meta["b"]), p=float(meta["p"]),
            enabled=bool(meta["burst_enabled"]),
        ),
        prepool=load_pca_model(path / _PREPOOL_DIR) if meta["has_prepool"] else None,
        whitening=load_whitening_model(path / _WHITENING_DIR) if meta["has_whitening"] else None,
    )
    if model.config_hash != meta["config_hash"]:
        raise ManifestError(
            f"{path}: stored config hash {meta['config_hash'][:12]}... does not match "
            f"the loaded parameters"
        )
    return model
