"""Linear projections: pre-pool dimension reduction and post-pool whitening.

PCA uses the symmetric eigendecomposition of the population covariance
(normalized by M, not M-1) so the mean reconstruction error equals the sum
of discarded eigenvalues exactly. Eigenvector signs follow one convention:
the largest-magnitude component of each column is made positive, so ports
can match rotations bit-for-bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DegenerateError, IoError, ShapeError
from .featureio import DTYPE_F64, GlobalDescriptor, LocalFeatureSet, read_matrix, write_matrix
from .rng import make_rng

INIT_PCA = "pca"
INIT_RANDOM_LINEAR = "random_linear"
# Rotation updated by gradient steps; orthonormality no longer guaranteed.
INIT_TRAINED = "trained"
_INIT_KINDS = (INIT_PCA, INIT_RANDOM_LINEAR, INIT_TRAINED)

PROJECTED_ZERO_EPS = 1e-12


@dataclass(frozen=True)
class PcaModel:
    """Affine projection x' = (x - mean) @ rotation, D -> D'."""

    mean: np.ndarray
    rotation: np.ndarray
    eigenvalues: np.ndarray
    init_kind: str = INIT_PCA

    def __post_init__(self):
        mean = np.ascontiguousarray(self.mean, dtype=np.float64).reshape(-1)
        rot = np.ascontiguousarray(self.rotation, dtype=np.float64)
        eig = np.ascontiguousarray(self.eigenvalues, dtype=np.float64).reshape(-1)
        if rot.ndim != 2 or rot.shape[0] != mean.shape[0] or rot.shape[1] != eig.shape[0]:
            raise ShapeError(
                f"inconsistent projection shapes: mean {mean.shape}, rotation {rot.shape}, "
                f"eigenvalues {eig.shape}"
            )
        if self.init_kind not in _INIT_KINDS:
            raise DataError(f"unknown init kind {self.init_kind!r}")
        if np.any(eig < 0) or np.any(np.diff(eig) > 0):
            raise DataError("eigenvalues must be nonnegative and sorted descending")
        if self.init_kind == INIT_PCA:
            gram = rot.T @ rot
            if np.max(np.abs(gram - np.eye(rot.shape[1]))) > 1e-6:
                raise DataError("PCA rotation columns are not orthonormal")
        for arr in (mean, rot, eig):
            arr.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "eigenvalues", eig)

    @property
    def in_dim(self) -> int:
        return self.rotation.shape[0]

    @property
    def out_dim(self) -> int:
        return self.rotation.shape[1]


@dataclass(frozen=True)
class WhiteningModel:
    """Post-aggregation PCA whitening of global descriptors."""

    mean: np.ndarray
    rotation: np.ndarray
    eigenvalues: np.ndarray
    epsilon: float

    def __post_init__(self):
        mean = np.ascontiguousarray(self.mean, dtype=np.float64).reshape(-1)
        rot = np.ascontiguousarray(self.rotation, dtype=np.float64)
        eig = np.ascontiguousarray(self.eigenvalues, dtype=np.float64).reshape(-1)
        if rot.ndim != 2 or rot.shape[0] != mean.shape[0] or rot.shape[1] != eig.shape[0]:
            raise ShapeError(
                f"inconsistent whitening shapes: mean {mean.shape}, rotation {rot.shape}, "
                f"eigenvalues {eig.shape}"
            )
        if rot.shape[1] > rot.shape[0]:
            raise ShapeError(f"whitened dim {rot.shape[1]} exceeds input dim {rot.shape[0]}")
        if np.any(eig + self.epsilon <= 0):
            raise DataError("eigenvalues + epsilon must be positive")
        for arr in (mean, rot, eig):
            arr.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "eigenvalues", eig)

    @property
    def in_dim(self) -> int:
        return self.rotation.shape[0]

    @property
    def out_dim(self) -> int:
        return self.rotation.shape[1]


def _pca_core(samples: np.ndarray, out_dim: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    samples = np.ascontiguousarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ShapeError(f"samples must be M x D, got {samples.shape}")
    m, d = samples.shape
    if out_dim < 1 or out_dim > d:
        raise DataError(f"out_dim must satisfy 1 <= out_dim <= {d}, got {out_dim}")
    if m <= out_dim:
        raise DataError(f"need more than {out_dim} samples to fit {out_dim} components, got {m}")
    if not np.all(np.isfinite(samples)):
        raise DataError("non-finite sample values")

    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / m
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.maximum(eigvals[order], 0.0)
    eigvecs = eigvecs[:, order]

    rank_tol = eigvals[0] * max(m, d) * np.finfo(np.float64).eps if eigvals[0] > 0 else 0.0
    rank = int(np.sum(eigvals > rank_tol))
    if rank < out_dim:
        raise DegenerateError(
            f"samples support rank {rank}, cannot extract {out_dim} components"
        )

    rotation = eigvecs[:, :out_dim]
    peak = np.argmax(np.abs(rotation), axis=0)
    flip = rotation[peak, np.arange(out_dim)] < 0
    rotation = np.where(flip[None, :], -rotation, rotation)
    return mean, np.ascontiguousarray(rotation), eigvals[:out_dim]


def fit_pca(samples: np.ndarray, out_dim: int) -> PcaModel:
    """Fit mean and top-`out_dim` principal directions of the samples."""
    mean, rotation, eigenvalues = _pca_core(samples, out_dim)
    return PcaModel(mean=mean, rotation=rotation, eigenvalues=eigenvalues, init_kind=INIT_PCA)


def make_random_projection(d: int, out_dim: int, seed: int) -> PcaModel:
    """Seeded random linear projection: zero mean, N(0, 1/d) entries.

    The 1/sqrt(d) scale puts expected column norms at 1; exists as the
    randomly-initialized baseline against PCA initialization.
    """
    if out_dim < 1 or out_dim > d:
        raise DataError(f"out_dim must satisfy 1 <= out_dim <= {d}, got {out_dim}")
    rng = make_rng(seed)
    rotation = rng.standard_normal((d, out_dim)) / np.sqrt(d)
    return PcaModel(
        mean=np.zeros(d),
        rotation=rotation,
        eigenvalues=np.zeros(out_dim),
        init_kind=INIT_RANDOM_LINEAR,
    )


def project_prepool(features: LocalFeatureSet, model: PcaModel) -> LocalFeatureSet:
    """Apply x' = (x - mean) @ rotation, then unit-normalize each row.

    Normalizing in the projected space keeps feature similarities cosine-valued
    downstream. A row that projects to (near-)zero is rejected.
    """
    if features.dim != model.in_dim:
        raise ShapeError(f"feature dim {features.dim} != projection input dim {model.in_dim}")
    projected = (features.features - model.mean) @ model.rotation
    norms = np.linalg.norm(projected, axis=1)
    if np.any(norms < PROJECTED_ZERO_EPS):
        raise DataError(f"{features.image_id}: row projects to zero vector")
    return LocalFeatureSet(
        image_id=features.image_id,
        features=projected / norms[:, None],
        normalized=True,
    )


def project_rows(matrix: np.ndarray, model: PcaModel) -> np.ndarray:
    """Array-level project_prepool (affine map + row normalization)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape[1] != model.in_dim:
        raise ShapeError(f"row dim {matrix.shape[1]} != projection input dim {model.in_dim}")
    projected = (matrix - model.mean) @ model.rotation
    norms = np.linalg.norm(projected, axis=1)
    if np.any(norms < PROJECTED_ZERO_EPS):
        raise DataError("row projects to zero vector")
    return projected / norms[:, None]


def fit_whitening(descriptors: np.ndarray, out_dim: int, epsilon: float = 1e-8) -> WhiteningModel:
    """PCA on global descriptors with per-component 1/sqrt(eigenvalue+epsilon) scaling."""
    if epsilon < 0:
        raise DataError(f"epsilon must be nonnegative, got {epsilon}")
    mean, rotation, eigenvalues = _pca_core(descriptors, out_dim)
    return WhiteningModel(mean=mean, rotation=rotation, eigenvalues=eigenvalues, epsilon=epsilon)


def whiten_vector(vector: np.ndarray, model: WhiteningModel) -> np.ndarray:
    """Whitened, re-unit-normalized copy of one descriptor vector."""
    vector = np.asarray(vector, dtype=np.float64).reshape(-1)
    if vector.shape[0] != model.in_dim:
        raise ShapeError(f"descriptor dim {vector.shape[0]} != whitening input dim {model.in_dim}")
    scaled = ((vector - model.mean) @ model.rotation) / np.sqrt(model.eigenvalues + model.epsilon)
    norm = float(np.linalg.norm(scaled))
    if norm < PROJECTED_ZERO_EPS:
        raise DegenerateError("descriptor whitens to zero vector")
    return scaled / norm


def apply_whitening(descriptor: GlobalDescriptor, model: WhiteningModel) -> GlobalDescriptor:
    """Whiten a global descriptor; output is re-normalized to unit length."""
    return GlobalDescriptor(
        image_id=descriptor.image_id,
        vector=whiten_vector(descriptor.vector, model),
        config_hash=descriptor.config_hash,
    )


def _save_linear(path: Path, mean: np.ndarray, rotation: np.ndarray, meta: dict) -> None:
    path.mkdir(parents=True, exist_ok=True)
    write_matrix(path / "rotation.vbff", rotation, dtype_tag=DTYPE_F64)
    write_matrix(path / "mean.vbff", mean.reshape(1, -1), dtype_tag=DTYPE_F64)
    try:
        (path / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}/meta.json: {exc}") from exc


def save_pca_model(model: PcaModel, path: str | Path) -> None:
    """Persist a projection as a directory of VBFF matrices plus meta.json."""
    meta = {
        "kind": model.init_kind,
        "in_dim": model.in_dim,
        "out_dim": model.out_dim,
        "eigenvalues": model.eigenvalues.tolist(),
    }
    _save_linear(Path(path), model.mean, model.rotation, meta)


def load_pca_model(path: str | Path) -> PcaModel:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except OSError as exc:
        raise IoError(f"cannot read {path}/meta.json: {exc}") from exc
    return PcaModel(
        mean=read_matrix(path / "mean.vbff")[0],
        rotation=read_matrix(path / "rotation.vbff"),
        eigenvalues=np.asarray(meta["eigenvalues"], dtype=np.float64),
        init_kind=meta["kind"],
    )


def save_whitening_model(model: WhiteningModel, path: str | Path) -> None:
    meta = {
        "kind": "whitening",
        "in_dim": model.in_dim,
        "out_dim": model.out_dim,
        "epsilon": model.epsilon,
        "eigenvalues": model.eigenvalues.tolist(),
    }
    _save_linear(Path(path), model.mean, model.rotation, meta)


def load_whitening_model(path: str | Path) -> WhiteningModel:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except OSError as exc:
        raise IoError(f"cannot read {path}/meta.json: {exc}") from exc
    return WhiteningModel(
        mean=read_matrix(path / "mean.vbff")[0],
        rotation=read_matrix(path / "rotation.vbff"),
        eigenvalues=np.asarray(meta["eigenvalues"], dtype=np.float64),
        epsilon=float(meta["epsilon"]),
    )
