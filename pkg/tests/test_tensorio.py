import json

import numpy as np
import pytest

from panfusion.tensorio import (HEADER, ImageTensor, ManifestError,
                                TensorFormatError, DatasetManifest,
                                ManifestEntry, load_manifest, read_tensor,
                                save_manifest, write_tensor)


class TestImageTensor:
    def test_casts_to_float32(self):
        t = ImageTensor(np.zeros((2, 4, 4), dtype=np.float64))
        assert t.data.dtype == np.float32
        assert (t.bands, t.height, t.width) == (2, 4, 4)

    def test_rejects_wrong_ndim(self):
        with pytest.raises(TensorFormatError):
            ImageTensor(np.zeros((4, 4), dtype=np.float32))

    def test_rejects_nan(self):
        bad = np.zeros((1, 2, 2), dtype=np.float32)
        bad[0, 0, 0] = np.nan
        with pytest.raises(TensorFormatError, match="non-finite"):
            ImageTensor(bad)

    def test_rejects_flat_range_hint(self):
        with pytest.raises(TensorFormatError, match="range_hint"):
            ImageTensor(np.zeros((1, 2, 2), dtype=np.float32), range_hint=(1.0, 1.0))


class TestRoundTrip:
    def test_bitwise_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        for trial in range(10):
            shape = tuple(rng.integers(1, 9, size=3))
            data = rng.standard_normal(shape).astype(np.float32)
            path = tmp_path / f"t{trial}.ten"
            write_tensor(path, ImageTensor(data, range_hint=(-10.0, 10.0)))
            back = read_tensor(path, range_hint=(-10.0, 10.0))
            assert back.data.shape == shape
            assert back.data.tobytes() == data.tobytes()

    def test_file_size_is_header_plus_payload(self, tmp_path):
        data = np.zeros((3, 5, 7), dtype=np.float32)
        path = tmp_path / "t.ten"
        write_tensor(path, data)
        assert path.stat().st_size == HEADER.size + 4 * 3 * 5 * 7

    def test_accepts_bare_array(self, tmp_path):
        path = tmp_path / "bare.ten"
        write_tensor(path, np.ones((1, 2, 2), dtype=np.float32))
        assert read_tensor(path).data.sum() == 4.0


class TestReadErrors:
    def _write(self, tmp_path, data):
        path = tmp_path / "x.ten"
        write_tensor(path, ImageTensor(data))
        return path

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "short.ten"
        path.write_bytes(b"TEN1\x00")
        with pytest.raises(TensorFormatError, match="truncated header"):
            read_tensor(path)

    def test_bad_magic(self, tmp_path):
        path = self._write(tmp_path, np.zeros((1, 2, 2), dtype=np.float32))
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(TensorFormatError, match="bad magic"):
            read_tensor(path)

    def test_unsupported_dtype_code(self, tmp_path):
        path = self._write(tmp_path, np.zeros((1, 2, 2), dtype=np.float32))
        raw = bytearray(path.read_bytes())
        raw[4] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(TensorFormatError, match="dtype code"):
            read_tensor(path)

    def test_truncated_payload(self, tmp_path):
        path = self._write(tmp_path, np.zeros((1, 4, 4), dtype=np.float32))
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(TensorFormatError, match="truncated payload"):
            read_tensor(path)

    def test_trailing_bytes(self, tmp_path):
        path = self._write(tmp_path, np.zeros((1, 2, 2), dtype=np.float32))
        path.write_bytes(path.read_bytes() + b"\x00\x00")
        with pytest.raises(TensorFormatError, match="trailing"):
            read_tensor(path)

    def test_nonfinite_payload(self, tmp_path):
        path = self._write(tmp_path, np.zeros((1, 1, 1), dtype=np.float32))
        raw = bytearray(path.read_bytes())
        raw[HEADER.size:] = np.array([np.inf], dtype="<f4").tobytes()
        path.write_bytes(bytes(raw))
        with pytest.raises(TensorFormatError, match="non-finite"):
            read_tensor(path)

    def test_degenerate_dims(self, tmp_path):
        path = tmp_path / "zero.ten"
        path.write_bytes(HEADER.pack(b"TEN1", 0, 3, 0, 2, 2))
        with pytest.raises(TensorFormatError, match="degenerate"):
            read_tensor(path)


def _write_entry(root, idx, bands=3, size=8, ratio=4, with_gt=True):
    rng = np.random.default_rng(idx)
    names = {}
    shapes = {"pan": (1, size, size), "lrms": (bands, size, size),
              "ms": (bands, size // ratio, size // ratio)}
    if with_gt:
        shapes["gt"] = (bands, size, size)
    for key, shape in shapes.items():
        path = root / f"{idx:04d}_{key}.ten"
        write_tensor(path, rng.random(shape, dtype=np.float32))
        names[key] = path
    return ManifestEntry(**names)


class TestManifest:
    def test_save_load_roundtrip(self, tmp_path):
        entries = [_write_entry(tmp_path, i) for i in range(3)]
        manifest = DatasetManifest(split="train", scale_ratio=4,
                                   entries=entries, root=tmp_path)
        path = tmp_path / "manifest.json"
        save_manifest(manifest, path)
        back = load_manifest(path)
        assert back.split == "train"
        assert back.scale_ratio == 4
        assert len(back.entries) == 3
        assert back.entries[0].gt is not None

    def test_gt_optional(self, tmp_path):
        entries = [_write_entry(tmp_path, 0, with_gt=False)]
        manifest = DatasetManifest("test", 4, entries, tmp_path)
        path = tmp_path / "manifest.json"
        save_manifest(manifest, path)
        assert load_manifest(path).entries[0].gt is None

    def test_missing_file_reported_with_entry_index(self, tmp_path):
        entries = [_write_entry(tmp_path, 0), _write_entry(tmp_path, 1)]
        entries[1].ms.unlink()
        manifest = DatasetManifest("train", 4, entries, tmp_path)
        path = tmp_path / "manifest.json"
        save_manifest(manifest, path)
        with pytest.raises(ManifestError, match="entry 1"):
            load_manifest(path)
        # validation can be skipped for tooling that only needs the paths
        assert len(load_manifest(path, validate=False).entries) == 2

    def test_ratio_mismatch_rejected(self, tmp_path):
        entries = [_write_entry(tmp_path, 0, ratio=4)]
        manifest = DatasetManifest("train", 2, entries, tmp_path)
        path = tmp_path / "manifest.json"
        save_manifest(manifest, path)
        with pytest.raises(ManifestError, match="not"):
            load_manifest(path)

    def test_multiband_pan_rejected(self, tmp_path):
        entry = _write_entry(tmp_path, 0)
        write_tensor(entry.pan, np.zeros((2, 8, 8), dtype=np.float32))
        manifest = DatasetManifest("train", 4, [entry], tmp_path)
        path = tmp_path / "manifest.json"
        save_manifest(manifest, path)
        with pytest.raises(ManifestError, match="pan"):
            load_manifest(path)

    def test_bad_split_rejected(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps(
            {"split": "holdout", "scale_ratio": 4, "entries": []}))
        with pytest.raises(ManifestError, match="split"):
            load_manifest(path)

    def test_garbage_json_rejected(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text("{nope")
        with pytest.raises(ManifestError, match="JSON"):
            load_manifest(path)
