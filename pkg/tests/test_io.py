"""File formats: volumes, priors, JSON artifacts, and the error taxonomy."""

import gzip
import struct

import numpy as np
import pytest

from conftest import make_rng

from scarseg import (
    LabelVolume,
    PriorMap,
    ScalarVolume,
    VolumeGrid,
    read_prior,
    read_volume,
    write_prior,
    write_volume,
)
from scarseg.io import (
    HEADER_SIZE,
    MAGIC_OFFSET,
    VOX_OFFSET,
    MagicMismatchError,
    TruncatedFileError,
    UnsupportedDtypeError,
    VolumeFormatError,
    read_json,
    read_trace,
    write_json,
    write_shell_text,
    write_trace,
)
from scarseg.surface import SurfaceShell


@pytest.fixture
def grid():
    return VolumeGrid((4, 3, 5), spacing=(1.0, 1.25, 2.0), origin=(-3.0, 0.5, 10.0))


def float32_scalar(grid, seed=0):
    rng = make_rng(seed)
    values = rng.uniform(-50, 150, grid.n_voxels).astype(np.float32).astype(np.float64)
    return ScalarVolume(grid, values, background=40.0)


class TestVolumeRoundTrips:
    def test_scalar(self, grid, tmp_path):
        vol = float32_scalar(grid)
        write_volume(vol, tmp_path / "img.nii")
        back = read_volume(tmp_path / "img.nii")
        assert isinstance(back, ScalarVolume)
        assert back.grid == grid
        np.testing.assert_array_equal(back.values, vol.values)

    def test_small_labels_use_uint8(self, grid, tmp_path):
        rng = make_rng(1)
        vol = LabelVolume(grid, rng.integers(0, 4, grid.n_voxels).astype(np.int32))
        path = tmp_path / "seg.nii"
        write_volume(vol, path)
        raw = path.read_bytes()
        (code,) = struct.unpack_from("<h", raw, 70)
        assert code == 2  # uint8
        back = read_volume(path)
        assert isinstance(back, LabelVolume)
        np.testing.assert_array_equal(back.labels, vol.labels)

    def test_wide_labels_use_int16(self, grid, tmp_path):
        values = np.zeros(grid.n_voxels, dtype=np.int32)
        values[0] = 300
        path = tmp_path / "seg.nii"
        write_volume(LabelVolume(grid, values), path)
        (code,) = struct.unpack_from("<h", path.read_bytes(), 70)
        assert code == 4  # int16
        np.testing.assert_array_equal(read_volume(path).labels, values)

    def test_labels_beyond_int16_raise(self, grid):
        values = np.zeros(grid.n_voxels, dtype=np.int32)
        values[0] = 70000
        with pytest.raises(UnsupportedDtypeError):
            write_volume(LabelVolume(grid, values), "unused.nii")

    def test_unwritable_type_raises(self, tmp_path):
        with pytest.raises(TypeError):
            write_volume({"not": "a volume"}, tmp_path / "x.nii")

    def test_kind_coercion(self, grid, tmp_path):
        labels = LabelVolume(grid, np.arange(grid.n_voxels, dtype=np.int32) % 3)
        write_volume(labels, tmp_path / "seg.nii")
        as_scalar = read_volume(tmp_path / "seg.nii", kind="scalar")
        assert isinstance(as_scalar, ScalarVolume)
        np.testing.assert_array_equal(as_scalar.values, labels.labels.astype(float))

        whole = ScalarVolume(grid, (np.arange(grid.n_voxels) % 5).astype(float))
        write_volume(whole, tmp_path / "w.nii")
        as_label = read_volume(tmp_path / "w.nii", kind="label")
        assert isinstance(as_label, LabelVolume)

        frac = ScalarVolume(grid, np.full(grid.n_voxels, 0.5))
        write_volume(frac, tmp_path / "f.nii")
        with pytest.raises(VolumeFormatError):
            read_volume(tmp_path / "f.nii", kind="label")

    def test_gzip_round_trip_and_determinism(self, grid, tmp_path):
        vol = float32_scalar(grid, seed=2)
        a, b = tmp_path / "a.nii.gz", tmp_path / "b.nii.gz"
        write_volume(vol, a)
        write_volume(vol, b)
        assert a.read_bytes() == b.read_bytes()
        assert a.read_bytes()[:2] == b"\x1f\x8b"
        np.testing.assert_array_equal(read_volume(a).values, vol.values)

    def test_gzip_detected_by_content_not_name(self, grid, tmp_path):
        vol = float32_scalar(grid, seed=3)
        write_volume(vol, tmp_path / "a.nii.gz")
        renamed = tmp_path / "plain.nii"
        renamed.write_bytes((tmp_path / "a.nii.gz").read_bytes())
        np.testing.assert_array_equal(read_volume(renamed).values, vol.values)


class TestPriorRoundTrips:
    def make_prior(self, grid, n_labels=2, seed=4):
        rng = make_rng(seed)
        raw = rng.uniform(0.05, 1.0, (n_labels, grid.n_voxels)).astype(np.float32)
        channels = (raw / raw.sum(axis=0)).astype(np.float32).astype(np.float64)
        names = ("background", "wall") if n_labels == 2 \
            else tuple(f"label_{k}" for k in range(n_labels))
        return PriorMap(grid, channels, names)

    def test_two_channel(self, grid, tmp_path):
        prior = self.make_prior(grid)
        write_prior(prior, tmp_path / "prior.nii")
        back = read_prior(tmp_path / "prior.nii")
        assert back.grid == grid
        assert back.names == ("background", "wall")
        np.testing.assert_allclose(back.channels, prior.channels, atol=1e-7)

    def test_three_channel_names(self, grid, tmp_path):
        prior = self.make_prior(grid, n_labels=3)
        write_prior(prior, tmp_path / "prior.nii.gz")
        back = read_prior(tmp_path / "prior.nii.gz")
        assert back.names == ("label_0", "label_1", "label_2")
        np.testing.assert_allclose(back.channels, prior.channels, atol=1e-7)

    def test_prior_requires_four_dimensional_file(self, grid, tmp_path):
        write_volume(float32_scalar(grid), tmp_path / "img.nii")
        with pytest.raises(VolumeFormatError):
            read_prior(tmp_path / "img.nii")

    def test_volume_reader_rejects_four_dimensional_file(self, grid, tmp_path):
        write_prior(self.make_prior(grid), tmp_path / "prior.nii")
        with pytest.raises(VolumeFormatError):
            read_volume(tmp_path / "prior.nii")


class TestJsonVolumeFallback:
    def test_scalar_exact_with_background(self, grid, tmp_path):
        rng = make_rng(6)
        vol = ScalarVolume(grid, rng.normal(0, 1, grid.n_voxels), background=5.5)
        write_volume(vol, tmp_path / "v.json")
        back = read_volume(tmp_path / "v.json")
        np.testing.assert_array_equal(back.values, vol.values)  # float64 exact
        assert back.background == 5.5

    def test_label(self, grid, tmp_path):
        vol = LabelVolume(grid, np.arange(grid.n_voxels, dtype=np.int32) % 7)
        write_volume(vol, tmp_path / "l.json")
        back = read_volume(tmp_path / "l.json")
        assert isinstance(back, LabelVolume)
        np.testing.assert_array_equal(back.labels, vol.labels)

    def test_prior_keeps_names(self, grid, tmp_path):
        rng = make_rng(7)
        raw = rng.uniform(0.1, 1.0, (3, grid.n_voxels))
        prior = PriorMap(grid, raw / raw.sum(axis=0), ("bg", "myo", "cavity"))
        write_prior(prior, tmp_path / "p.json")
        back = read_prior(tmp_path / "p.json")
        assert back.names == ("bg", "myo", "cavity")
        np.testing.assert_array_equal(back.channels, prior.channels)

    def test_json_errors(self, grid, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(VolumeFormatError):
            read_volume(bad)
        bad.write_text('{"format": "something-else"}')
        with pytest.raises(MagicMismatchError):
            read_volume(bad)
        write_volume(float32_scalar(grid), tmp_path / "v.json")
        doc = read_json(tmp_path / "v.json")
        doc["dims"] = [100, 100, 100]
        write_json(doc, tmp_path / "v.json")
        with pytest.raises(TruncatedFileError):
            read_volume(tmp_path / "v.json")
        with pytest.raises(VolumeFormatError):
            read_prior(tmp_path / "v.json")  # scalar payload is not a prior


def valid_file_bytes(grid) -> bytearray:
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "v.nii"
        write_volume(float32_scalar(grid), p)
        return bytearray(p.read_bytes())


class TestErrorTaxonomy:
    def test_hierarchy(self):
        for exc in (MagicMismatchError, TruncatedFileError, UnsupportedDtypeError):
            assert issubclass(exc, VolumeFormatError)
        assert issubclass(VolumeFormatError, ValueError)

    def test_short_file(self, tmp_path):
        path = tmp_path / "short.nii"
        path.write_bytes(b"\x00" * 100)
        with pytest.raises(TruncatedFileError):
            read_volume(path)

    def test_bad_magic(self, grid, tmp_path):
        raw = valid_file_bytes(grid)
        raw[MAGIC_OFFSET:MAGIC_OFFSET + 4] = b"abcd"
        path = tmp_path / "v.nii"
        path.write_bytes(bytes(raw))
        with pytest.raises(MagicMismatchError):
            read_volume(path)

    def test_bad_header_size_field(self, grid, tmp_path):
        raw = valid_file_bytes(grid)
        struct.pack_into("<i", raw, 0, 999)
        path = tmp_path / "v.nii"
        path.write_bytes(bytes(raw))
        with pytest.raises(VolumeFormatError):
            read_volume(path)

    def test_unsupported_dtype_code(self, grid, tmp_path):
        raw = valid_file_bytes(grid)
        struct.pack_into("<h", raw, 70, 64)  # float64, outside the subset
        path = tmp_path / "v.nii"
        path.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedDtypeError):
            read_volume(path)

    def test_truncated_payload(self, grid, tmp_path):
        raw = valid_file_bytes(grid)
        path = tmp_path / "v.nii"
        path.write_bytes(bytes(raw[: VOX_OFFSET + 10]))
        with pytest.raises(TruncatedFileError):
            read_volume(path)

    def test_unsupported_dimensionality(self, grid, tmp_path):
        raw = valid_file_bytes(grid)
        struct.pack_into("<h", raw, 40, 5)
        path = tmp_path / "v.nii"
        path.write_bytes(bytes(raw))
        with pytest.raises(VolumeFormatError):
            read_volume(path)

    def test_oblique_geometry_rejected(self, grid, tmp_path):
        raw = valid_file_bytes(grid)
        struct.pack_into("<f", raw, 284, 0.5)  # sform row 0, column 1
        path = tmp_path / "v.nii"
        path.write_bytes(bytes(raw))
        with pytest.raises(VolumeFormatError):
            read_volume(path)

    def test_nonpositive_spacing_rejected(self, grid, tmp_path):
        raw = valid_file_bytes(grid)
        struct.pack_into("<f", raw, 280, -1.0)  # sform row 0, column 0
        path = tmp_path / "v.nii"
        path.write_bytes(bytes(raw))
        with pytest.raises(VolumeFormatError):
            read_volume(path)

    def test_gzip_of_garbage_still_reports_format_error(self, tmp_path):
        path = tmp_path / "g.nii.gz"
        path.write_bytes(gzip.compress(b"\x00" * 64))
        with pytest.raises(TruncatedFileError):
            read_volume(path)


class TestJsonArtifacts:
    def test_json_round_trip_sorted(self, tmp_path):
        doc = {"b": 2, "a": [1, 2, 3], "nested": {"z": 1.5, "y": None}}
        path = tmp_path / "doc.json"
        write_json(doc, path)
        text = path.read_text()
        assert text.index('"a"') < text.index('"b"')
        assert text.endswith("\n")
        assert read_json(path) == doc

    def test_trace_round_trip(self, tmp_path):
        trace = [
            {"phase": "init", "block": 0, "ll": -123.456},
            {"phase": "em", "block": 0, "ll": -100.0, "stepped": True},
        ]
        path = tmp_path / "trace.jsonl"
        write_trace(trace, path)
        assert len(path.read_text().splitlines()) == 2
        assert read_trace(path) == trace

    def test_empty_trace(self, tmp_path):
        path = tmp_path / "trace.jsonl"
        write_trace([], path)
        assert path.read_text() == ""
        assert read_trace(path) == []

    def test_shell_text(self, tmp_path):
        grid = VolumeGrid((4, 4, 4))
        shell = SurfaceShell(
            grid, [0, 5], np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 0.0]]),
            [False, True],
        )
        path = tmp_path / "shell.txt"
        write_shell_text(shell, path)
        lines = path.read_text().splitlines()
        assert lines == ["0.000000 0.000000 0.000000 0", "1.000000 1.000000 0.000000 1"]
