"""Tests for the VBFF container, feature/descriptor types, and sampling."""

import struct

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from burstvlad.errors import (
    DataError,
    FormatError,
    IoError,
    ShapeError,
    TruncatedError,
)
from burstvlad.featureio import (
    DTYPE_F32,
    DTYPE_F64,
    GlobalDescriptor,
    LocalFeatureSet,
    l2_normalize_rows,
    load_descriptor,
    load_features,
    normalize_rows,
    peek_shape,
    read_matrix,
    sample_features,
    save_descriptor,
    save_features,
    write_matrix,
)
from burstvlad.retrieval import DatasetManifest, ManifestEntry
from burstvlad.rng import make_rng


class TestVbffContainer:
    """Binary layout and round-trip behavior of the VBFF matrix file."""

    def test_header_layout_2x3(self, tmp_path):
        """A 2x3 f32 file starts with magic, version 1, N=2 u64, D=3 u32, tag 1."""
        path = tmp_path / "m.vbff"
        write_matrix(path, np.arange(6, dtype=np.float32).reshape(2, 3))
        raw = path.read_bytes()
        magic, version, n, d, tag = struct.unpack_from("<4sIQII", raw)
        assert magic == b"VBFF"
        assert version == 1
        assert (n, d, tag) == (2, 3, DTYPE_F32)
        payload = np.frombuffer(raw[24:], dtype="<f4").reshape(2, 3)
        assert_array_equal(payload, np.arange(6, dtype=np.float32).reshape(2, 3))

    def test_1x1_file_is_28_bytes(self, tmp_path):
        """24-byte header plus one f32 value."""
        path = tmp_path / "one.vbff"
        write_matrix(path, np.array([[0.5]]))
        assert path.stat().st_size == 28

    def test_f32_round_trip_bit_exact(self, tmp_path):
        rng = make_rng(0)
        original = rng.standard_normal((7, 5)).astype(np.float32)
        path = tmp_path / "rt.vbff"
        write_matrix(path, original, dtype_tag=DTYPE_F32)
        loaded = read_matrix(path)
        assert loaded.dtype == np.float64
        assert_array_equal(loaded.astype(np.float32), original)
        # Writing the widened copy back reproduces the file byte for byte.
        path2 = tmp_path / "rt2.vbff"
        write_matrix(path2, loaded, dtype_tag=DTYPE_F32)
        assert path.read_bytes() == path2.read_bytes()

    def test_f64_round_trip_exact(self, tmp_path):
        rng = make_rng(1)
        original = rng.standard_normal((6, 4))
        path = tmp_path / "rt64.vbff"
        write_matrix(path, original, dtype_tag=DTYPE_F64)
        assert_array_equal(read_matrix(path), original)

    def test_truncated_payload(self, tmp_path):
        """Header promising 4 rows over a 3-row payload names both sizes."""
        path = tmp_path / "full.vbff"
        write_matrix(path, np.ones((4, 3), dtype=np.float32))
        bad = tmp_path / "cut.vbff"
        bad.write_bytes(path.read_bytes()[: 24 + 3 * 3 * 4])
        with pytest.raises(TruncatedError, match="header promises"):
            read_matrix(bad)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.vbff"
        write_matrix(path, np.ones((1, 1)))
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="magic"):
            read_matrix(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "v9.vbff"
        path.write_bytes(struct.pack("<4sIQII", b"VBFF", 9, 1, 1, 1) + b"\x00" * 4)
        with pytest.raises(FormatError, match="version"):
            read_matrix(path)

    def test_bad_dtype_tag(self, tmp_path):
        path = tmp_path / "t7.vbff"
        path.write_bytes(struct.pack("<4sIQII", b"VBFF", 1, 1, 1, 7) + b"\x00" * 4)
        with pytest.raises(FormatError, match="tag"):
            read_matrix(path)

    def test_short_file(self, tmp_path):
        path = tmp_path / "short.vbff"
        path.write_bytes(b"VBFF")
        with pytest.raises(FormatError, match="shorter than header"):
            read_matrix(path)

    def test_write_rejects_non_2d(self, tmp_path):
        with pytest.raises(ShapeError):
            write_matrix(tmp_path / "x.vbff", np.ones(3))

    def test_write_rejects_unknown_tag(self, tmp_path):
        with pytest.raises(FormatError, match="tag"):
            write_matrix(tmp_path / "x.vbff", np.ones((1, 1)), dtype_tag=5)

    def test_missing_directory_is_io_error(self, tmp_path):
        with pytest.raises(IoError):
            write_matrix(tmp_path / "no" / "dir" / "x.vbff", np.ones((1, 1)))
        with pytest.raises(IoError):
            read_matrix(tmp_path / "absent.vbff")

    def test_peek_shape(self, tmp_path):
        path = tmp_path / "peek.vbff"
        write_matrix(path, np.zeros((11, 7), dtype=np.float32))
        assert peek_shape(path) == (11, 7)

    def test_peek_shape_rejects_garbage(self, tmp_path):
        path = tmp_path / "noise.bin"
        path.write_bytes(b"\xff" * 64)
        with pytest.raises(FormatError):
            peek_shape(path)


class TestLocalFeatureSet:
    def test_properties(self):
        fs = LocalFeatureSet(image_id="img", features=np.ones((4, 3)))
        assert fs.n == 4
        assert fs.dim == 3
        assert not fs.normalized

    def test_rejects_empty(self):
        with pytest.raises(ShapeError):
            LocalFeatureSet(image_id="bad", features=np.empty((0, 3)))
        with pytest.raises(ShapeError):
            LocalFeatureSet(image_id="bad", features=np.ones(3))

    def test_rejects_non_finite(self):
        feats = np.ones((2, 2))
        feats[1, 1] = np.nan
        with pytest.raises(DataError, match="non-finite"):
            LocalFeatureSet(image_id="bad", features=feats)

    def test_normalized_flag_is_checked(self):
        with pytest.raises(DataError, match="unit"):
            LocalFeatureSet(image_id="bad", features=np.full((2, 2), 3.0), normalized=True)

    def test_features_are_frozen(self):
        fs = LocalFeatureSet(image_id="img", features=np.ones((2, 2)))
        with pytest.raises(ValueError):
            fs.features[0, 0] = 7.0


class TestGlobalDescriptor:
    def test_accepts_unit_vector(self):
        vec = np.array([0.6, 0.8])
        desc = GlobalDescriptor(image_id="img", vector=vec, config_hash="h")
        assert desc.dim == 2
        with pytest.raises(ValueError):
            desc.vector[0] = 0.0

    def test_rejects_non_unit_norm(self):
        with pytest.raises(DataError, match="norm"):
            GlobalDescriptor(image_id="img", vector=np.array([0.5, 0.5]), config_hash="h")

    def test_rejects_empty_and_non_finite(self):
        with pytest.raises(ShapeError):
            GlobalDescriptor(image_id="img", vector=np.empty(0), config_hash="h")
        with pytest.raises(DataError):
            GlobalDescriptor(image_id="img", vector=np.array([np.inf]), config_hash="h")


class TestNormalizeRows:
    def test_three_four_five(self):
        assert_allclose(normalize_rows(np.array([[3.0, 4.0]])), [[0.6, 0.8]], rtol=0, atol=0)

    def test_zero_row_rejected(self):
        with pytest.raises(DataError):
            normalize_rows(np.array([[0.0, 0.0]]))

    def test_idempotent_and_direction_preserving(self):
        rng = make_rng(4)
        rows = rng.standard_normal((20, 6)) * 10
        once = normalize_rows(rows)
        twice = normalize_rows(once)
        assert_allclose(twice, once, atol=1e-7)
        cosines = np.einsum("nd,nd->n", rows, once) / np.linalg.norm(rows, axis=1)
        assert_allclose(cosines, 1.0, atol=1e-7)

    def test_l2_normalize_rows_sets_flag(self):
        fs = LocalFeatureSet(image_id="img", features=np.array([[3.0, 4.0], [0.0, 2.0]]))
        out = l2_normalize_rows(fs)
        assert out.normalized
        assert out.image_id == "img"
        assert_allclose(np.linalg.norm(out.features, axis=1), 1.0, atol=1e-12)


class TestFeatureFiles:
    def test_save_load_round_trip(self, tmp_path):
        rng = make_rng(5)
        fs = LocalFeatureSet(
            image_id="img", features=rng.standard_normal((8, 4)).astype(np.float32)
        )
        path = tmp_path / "img.vbff"
        save_features(fs, path)
        loaded = load_features(path)
        assert loaded.image_id == "img"  # defaults to the file stem
        assert_array_equal(loaded.features, fs.features)

    def test_explicit_image_id_wins(self, tmp_path):
        path = tmp_path / "stem.vbff"
        save_features(LocalFeatureSet(image_id="x", features=np.ones((1, 2))), path)
        assert load_features(path, image_id="custom").image_id == "custom"

    def test_rejects_zero_row(self, tmp_path):
        path = tmp_path / "zero.vbff"
        write_matrix(path, np.array([[1.0, 0.0], [0.0, 0.0]]))
        with pytest.raises(DataError, match="all-zero"):
            load_features(path)

    def test_rejects_non_finite(self, tmp_path):
        path = tmp_path / "inf.vbff"
        write_matrix(path, np.array([[1.0, np.inf]]), dtype_tag=DTYPE_F64)
        with pytest.raises(DataError, match="non-finite"):
            load_features(path)


class TestDescriptorFiles:
    def test_round_trip_with_sidecar(self, tmp_path):
        vec = np.array([0.0, 1.0, 0.0])
        desc = GlobalDescriptor(image_id="img7", vector=vec, config_hash="abc123")
        path = tmp_path / "img7.vbff"
        save_descriptor(desc, path)
        loaded = load_descriptor(path)
        assert loaded.image_id == "img7"
        assert loaded.config_hash == "abc123"
        assert_array_equal(loaded.vector, vec)

    def test_multi_row_container_rejected(self, tmp_path):
        path = tmp_path / "two.vbff"
        write_matrix(path, np.eye(2), dtype_tag=DTYPE_F64)
        path.with_suffix(".json").write_text('{"image_id": "x", "config_hash": "h"}')
        with pytest.raises(FormatError, match="N=1"):
            load_descriptor(path)

    def test_missing_sidecar(self, tmp_path):
        path = tmp_path / "lone.vbff"
        write_matrix(path, np.array([[1.0]]), dtype_tag=DTYPE_F64)
        with pytest.raises(IoError):
            load_descriptor(path)


def _manifest_of_sizes(tmp_path, sizes, dim=4, marker_axis=0):
    """One reference image per size; row feature[marker_axis] tags its image."""
    entries = []
    rng = make_rng(99)
    for idx, size in enumerate(sizes):
        rows = rng.standard_normal((size, dim))
        rows[:, marker_axis] = float(idx + 1)
        path = tmp_path / f"img{idx}.vbff"
        write_matrix(path, rows, dtype_tag=DTYPE_F64)
        entries.append(
            ManifestEntry(
                image_id=f"img{idx}", feature_path=str(path),
                x_m=float(idx), y_m=0.0,
                split="query" if idx == 0 else "reference",
            )
        )
    return DatasetManifest(entries=tuple(entries))


class TestSampleFeatures:
    def test_exhaustive_single_image(self, tmp_path):
        manifest = _manifest_of_sizes(tmp_path, [10, 1])
        sample = sample_features(manifest, 11, seed=0)
        assert sample.shape == (11, 4)
        assert np.sum(sample[:, 0] == 1.0) == 10

    def test_determinism(self, tmp_path):
        manifest = _manifest_of_sizes(tmp_path, [12, 8, 5])
        assert_array_equal(
            sample_features(manifest, 10, seed=3), sample_features(manifest, 10, seed=3)
        )

    def test_proportional_quotas_exhaustive(self, tmp_path):
        """Three images of sizes 30/15/5 at count=50: quotas are 30, 15, 5."""
        manifest = _manifest_of_sizes(tmp_path, [30, 15, 5])
        sample = sample_features(manifest, 50, seed=0)
        markers = sample[:, 0]
        assert [int(np.sum(markers == m)) for m in (1.0, 2.0, 3.0)] == [30, 15, 5]

    def test_proportional_quotas_with_remainder(self, tmp_path):
        """count=25 over 30/15/5: floors are 15/7/2, one leftover row assigned."""
        manifest = _manifest_of_sizes(tmp_path, [30, 15, 5])
        sample = sample_features(manifest, 25, seed=0)
        markers = sample[:, 0]
        counts = [int(np.sum(markers == m)) for m in (1.0, 2.0, 3.0)]
        assert sum(counts) == 25
        for count, base in zip(counts, (15, 7, 2)):
            assert base <= count <= base + 1

    def test_insufficient_features(self, tmp_path):
        manifest = _manifest_of_sizes(tmp_path, [3, 2])
        with pytest.raises(DataError, match="only 5 available"):
            sample_features(manifest, 6, seed=0)

    def test_bad_count(self, tmp_path):
        manifest = _manifest_of_sizes(tmp_path, [3, 2])
        with pytest.raises(DataError):
            sample_features(manifest, 0, seed=0)

    def test_mixed_dims_rejected(self, tmp_path):
        manifest = _manifest_of_sizes(tmp_path, [3, 2])
        extra = tmp_path / "odd.vbff"
        write_matrix(extra, np.ones((2, 7)), dtype_tag=DTYPE_F64)
        entries = manifest.entries + (
            ManifestEntry(image_id="odd", feature_path=str(extra), x_m=9.0, y_m=0.0,
                          split="reference"),
        )
        with pytest.raises(ShapeError, match="dimensions"):
            sample_features(DatasetManifest(entries=entries), 4, seed=0)
