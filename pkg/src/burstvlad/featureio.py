"""Local-feature and descriptor file I/O.

VBFF container layout (little-endian):

- bytes 0-3   magic ``b"VBFF"``
- bytes 4-7   version, u32, currently 1
- bytes 8-15  row count N, u64
- bytes 16-19 column count D, u32
- bytes 20-23 dtype tag, u32: 1 = float32, 2 = float64
- bytes 24-   N*D values, row-major

Local-feature files are always written with tag 1 (extractors emit f32);
model matrices and global descriptors use tag 2 so that save/load round-trips
are bit-exact at working precision. Values are widened losslessly to float64
on read.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .errors import DataError, FormatError, IoError, ShapeError, TruncatedError
from .rng import make_rng

if TYPE_CHECKING:
    from .retrieval import DatasetManifest

MAGIC = b"VBFF"
VERSION = 1
_HEADER = struct.Struct("<4sIQII")
DTYPE_F32 = 1
DTYPE_F64 = 2
_TAG_TO_DTYPE = {DTYPE_F32: np.dtype("<f4"), DTYPE_F64: np.dtype("<f8")}

ZERO_ROW_EPS = 1e-12
UNIT_NORM_TOL = 1e-5


def write_matrix(path: str | Path, matrix: np.ndarray, dtype_tag: int = DTYPE_F32) -> None:
    """Write a 2-D array as a VBFF file with the given dtype tag."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {matrix.shape}")
    if dtype_tag not in _TAG_TO_DTYPE:
        raise FormatError(f"unknown dtype tag {dtype_tag}")
    payload = np.ascontiguousarray(matrix, dtype=_TAG_TO_DTYPE[dtype_tag])
    header = _HEADER.pack(MAGIC, VERSION, matrix.shape[0], matrix.shape[1], dtype_tag)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_matrix(path: str | Path) -> np.ndarray:
    """Read a VBFF file into a float64 matrix (f32 payloads widen losslessly)."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than header")
    magic, version, n, d, tag = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if tag not in _TAG_TO_DTYPE:
        raise FormatError(f"{path}: unknown dtype tag {tag}")
    dtype = _TAG_TO_DTYPE[tag]
    expected = n * d * dtype.itemsize
    body = raw[_HEADER.size:]
    if len(body) != expected:
        raise TruncatedError(
            f"{path}: header promises {n}x{d} ({expected} bytes), payload has {len(body)}"
        )
    values = np.frombuffer(body, dtype=dtype).reshape(n, d)
    return values.astype(np.float64)


def peek_shape(path: str | Path) -> tuple[int, int]:
    """Read only the header and return (N, D); cheap way to count rows."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read(_HEADER.size)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than header")
    magic, version, n, d, tag = _HEADER.unpack_from(raw)
    if magic != MAGIC or version != VERSION or tag not in _TAG_TO_DTYPE:
        raise FormatError(f"{path}: not a readable VBFF header")
    return int(n), int(d)


@dataclass(frozen=True)
class LocalFeatureSet:
    """One image's N local descriptors of dimension D, row-major float64."""

    image_id: str
    features: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise ShapeError(f"features must be N x D with N,D >= 1, got {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise DataError(f"{self.image_id}: non-finite feature values")
        if self.normalized:
            norms = np.linalg.norm(feats, axis=1)
            if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
                raise DataError(f"{self.image_id}: normalized flag set but rows are not unit-L2")
        feats.flags.writeable = False
        object.__setattr__(self, "features", feats)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class GlobalDescriptor:
    """Single fixed-length retrieval vector for one image, unit L2 norm."""

    image_id: str
    vector: np.ndarray
    config_hash: str

    def __post_init__(self):
        vec = np.ascontiguousarray(self.vector, dtype=np.float64).reshape(-1)
        if vec.size < 1:
            raise ShapeError("descriptor vector is empty")
        if not np.all(np.isfinite(vec)):
            raise DataError(f"{self.image_id}: non-finite descriptor values")
        norm = float(np.linalg.norm(vec))
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise DataError(f"{self.image_id}: descriptor norm {norm} is not unit")
        vec.flags.writeable = False
        object.__setattr__(self, "vector", vec)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


def load_features(path: str | Path, image_id: str | None = None) -> LocalFeatureSet:
    """Load a local-feature file; rejects non-finite values and all-zero rows."""
    feats = read_matrix(path)
    if not np.all(np.isfinite(feats)):
        raise DataError(f"{path}: non-finite feature values")
    if np.any(np.all(feats == 0.0, axis=1)):
        raise DataError(f"{path}: all-zero feature row (corrupt extractor output)")
    if image_id is None:
        image_id = Path(path).stem
    return LocalFeatureSet(image_id=image_id, features=feats, normalized=False)


def save_features(feature_set: LocalFeatureSet, path: str | Path) -> None:
    """Write a feature set as a VBFF f32 file; load_features inverts it bit-exactly."""
    write_matrix(path, feature_set.features, dtype_tag=DTYPE_F32)


def save_descriptor(descriptor: GlobalDescriptor, path: str | Path) -> None:
    """Write a global descriptor (VBFF f64, N=1) plus a .json sidecar with id/hash."""
    path = Path(path)
    write_matrix(path, descriptor.vector.reshape(1, -1), dtype_tag=DTYPE_F64)
    sidecar = {"image_id": descriptor.image_id, "config_hash": descriptor.config_hash}
    try:
        path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write descriptor sidecar for {path}: {exc}") from exc


def load_descriptor(path: str | Path) -> GlobalDescriptor:
    """Read a global descriptor written by save_descriptor."""
    path = Path(path)
    matrix = read_matrix(path)
    if matrix.shape[0] != 1:
        raise FormatError(f"{path}: descriptor container must have N=1, got {matrix.shape[0]}")
    try:
        sidecar = json.loads(path.with_suffix(".json").read_text())
    except OSError as exc:
        raise IoError(f"cannot read descriptor sidecar for {path}: {exc}") from exc
    return GlobalDescriptor(
        image_id=sidecar["image_id"], vector=matrix[0], config_hash=sidecar["config_hash"]
    )


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """Divide each row by its L2 norm; rows with norm < 1e-12 raise DataError."""
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms < ZERO_ROW_EPS):
        raise DataError("row with (near-)zero L2 norm cannot be normalized")
    return matrix / norms[:, None]


def l2_normalize_rows(feature_set: LocalFeatureSet) -> LocalFeatureSet:
    """Unit-normalize every row; idempotent and direction-preserving."""
    return LocalFeatureSet(
        image_id=feature_set.image_id,
        features=normalize_rows(feature_set.features),
        normalized=True,
    )


def sample_features(manifest: "DatasetManifest", count: int, seed: int) -> np.ndarray:
    """Sample `count` feature rows without replacement across all manifest images.

    Stratified: each image gets a quota proportional to its row count
    (floor of the exact share); the remainder is distributed one row at a
    time over a seeded shuffle of the images, skipping exhausted ones.
    Per-image rows are picked by a seeded permutation, so the exhaustive
    case returns all rows in seeded order. Deterministic for a fixed
    (manifest, count, seed).
    """
    if count < 1:
        raise DataError(f"sample count must be >= 1, got {count}")
    sets = [load_features(entry.feature_path, entry.image_id) for entry in manifest.entries]
    dims = {s.dim for s in sets}
    if len(dims) > 1:
        raise ShapeError(f"inconsistent feature dimensions across images: {sorted(dims)}")
    sizes = np.array([s.n for s in sets], dtype=np.int64)
    total = int(sizes.sum())
    if total < count:
        raise DataError(f"requested {count} features but only {total} available")

    quotas = (count * sizes) // total
    rng = make_rng(seed)
    order = rng.permutation(len(sets))
    remainder = count - int(quotas.sum())
    while remainder > 0:
        for idx in order:
            if remainder == 0:
                break
            if quotas[idx] < sizes[idx]:
                quotas[idx] += 1
                remainder -= 1

    chunks = []
    for feature_set, quota in zip(sets, quotas):
        picked = rng.permutation(feature_set.n)[: int(quota)]
        if len(picked):
            chunks.append(feature_set.features[picked])
    return np.concatenate(chunks, axis=0)
