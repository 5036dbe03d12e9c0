"""Dataset/checkpoint IO tests: round trips, split protocol, error reporting."""

import numpy as np
import pytest

from roadfuse import dataio
from roadfuse.dataio import (
    DataError,
    Manifest,
    Sample,
    SampleRecord,
    load_checkpoint,
    read_dataset,
    save_checkpoint,
    split_by_segment,
)
from roadfuse.tensor import Tensor


def make_manifest(segment_sizes, classes=("A", "B"), split=None):
    records = []
    i = 0
    for seg, size in enumerate(segment_sizes):
        label = classes[seg % len(classes)]
        for _ in range(size):
            sid = f"s{i:04d}"
            records.append(SampleRecord(sample_id=sid, segment_id=f"seg{seg}",
                                        label=label, condition="day",
                                        image_path=f"images/{sid}.ppm",
                                        imu_path=f"imu/{sid}.csv", split=split))
            i += 1
    return Manifest(classes=list(classes), records=records)


def make_samples(manifest, rng):
    samples = []
    for rec in manifest.records:
        samples.append(Sample(sample_id=rec.sample_id, segment_id=rec.segment_id,
                              label=rec.label, condition=rec.condition,
                              image=rng.random((3, 8, 8)).astype(np.float32),
                              imu=rng.normal(size=(4, 12)).astype(np.float32)))
    return samples


class TestRoundTrip:
    def test_dataset_roundtrip(self, tmp_path):
        manifest = make_manifest([3, 3])
        rng = np.random.default_rng(0)
        samples = make_samples(manifest, rng)
        dataio.write_dataset(tmp_path, manifest, samples)
        ds = read_dataset(tmp_path)
        assert ds.classes == ["A", "B"]
        for rec, original in zip(ds.manifest.records, samples):
            loaded = ds.load(rec)
            # images survive 8-bit quantization; CSV decimal repr is exact
            assert np.abs(loaded.image - original.image).max() <= 1 / 255 + 1e-7
            np.testing.assert_array_equal(loaded.imu, original.imu)
            assert loaded.label == original.label
            assert loaded.segment_id == original.segment_id
            assert loaded.condition == original.condition

    def test_missing_file_named_in_error(self, tmp_path):
        manifest = make_manifest([2])
        samples = make_samples(manifest, np.random.default_rng(1))
        dataio.write_dataset(tmp_path, manifest, samples)
        victim = tmp_path / "images" / "s0001.ppm"
        victim.unlink()
        with pytest.raises(DataError, match="s0001.ppm"):
            read_dataset(tmp_path)

    def test_empty_dataset(self, tmp_path):
        manifest = Manifest(classes=["A", "B"], records=[])
        dataio.write_dataset(tmp_path, manifest, [])
        ds = read_dataset(tmp_path)
        assert ds.manifest.records == []

    def test_malformed_csv_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("t,ch0,ch1\n0,1.0,2.0\n1,3.0\n")
        with pytest.raises(DataError, match="bad.csv:3"):
            dataio.read_imu_csv(path)

    def test_label_outside_class_set(self):
        rec = SampleRecord(sample_id="s0", segment_id="g0", label="Lava",
                           condition="day", image_path="x.ppm", imu_path="x.csv")
        with pytest.raises(DataError, match="Lava"):
            Manifest(classes=["A"], records=[rec])

    def test_ppm_quantization_extremes(self, tmp_path):
        img = np.zeros((3, 4, 4), dtype=np.float32)
        img[0] = 1.0
        dataio.write_ppm(tmp_path / "x.ppm", img)
        back = dataio.read_ppm(tmp_path / "x.ppm")
        np.testing.assert_allclose(back, img, atol=1e-7)


class TestSplitBySegment:
    def test_ten_equal_segments(self):
        manifest = make_manifest([5] * 10)
        out = split_by_segment(manifest, (0.7, 0.2, 0.1), seed=3)
        by_split = {name: set() for name in dataio.SPLITS}
        for rec in out.records:
            by_split[rec.split].add(rec.segment_id)
        assert (len(by_split["train"]), len(by_split["val"]), len(by_split["test"])) == (7, 2, 1)

    def test_partition_property(self):
        rng = np.random.default_rng(4)
        for trial in range(200):
            sizes = rng.integers(1, 9, size=rng.integers(3, 12)).tolist()
            manifest = make_manifest(sizes)
            out = split_by_segment(manifest, seed=trial)
            seg_splits = {}
            for rec in out.records:
                seg_splits.setdefault(rec.segment_id, set()).add(rec.split)
            assert all(len(s) == 1 for s in seg_splits.values())
            assert sum(len(out.split_records(s)) for s in dataio.SPLITS) == len(out.records)

    def test_greedy_fraction_bound_enumerated(self):
        # achieved fractions stay within (largest segment)/n of targets
        rng = np.random.default_rng(5)
        for trial in range(100):
            sizes = rng.integers(1, 12, size=rng.integers(3, 10)).tolist()
            n = sum(sizes)
            manifest = make_manifest(sizes)
            out = split_by_segment(manifest, (0.7, 0.2, 0.1), seed=trial)
            bound = max(sizes) / n + 1e-9
            for frac, split in zip((0.7, 0.2, 0.1), dataio.SPLITS):
                achieved = len(out.split_records(split)) / n
                assert abs(achieved - frac) <= bound, (sizes, trial)

    def test_deterministic(self):
        manifest = make_manifest([2, 3, 4, 5, 1])
        a = split_by_segment(manifest, seed=6)
        b = split_by_segment(manifest, seed=6)
        assert [r.split for r in a.records] == [r.split for r in b.records]

    def test_too_few_segments(self):
        with pytest.raises(DataError):
            split_by_segment(make_manifest([4, 4]))

    def test_bad_fractions(self):
        with pytest.raises(DataError):
            split_by_segment(make_manifest([1] * 5), fractions=(0.5, 0.2, 0.1))


class TestCheckpoint:
    def _params(self, rng, dtype=np.float32):
        return {
            "enc.w": Tensor(rng.normal(size=(4, 3)).astype(dtype), requires_grad=True),
            "enc.b": Tensor(rng.normal(size=3).astype(dtype), requires_grad=True),
            "cls.w": Tensor(rng.normal(size=(3, 2)).astype(dtype), requires_grad=True),
        }

    def test_bit_exact_roundtrip(self, tmp_path):
        params = self._params(np.random.default_rng(7))
        config = {"mode": "fused", "d_latent": 4}
        path = tmp_path / "model.rsfc"
        save_checkpoint(path, params, config)
        loaded, loaded_config = load_checkpoint(path)
        assert loaded_config == config
        assert set(loaded) == set(params)
        for name in params:
            assert loaded[name].data.tobytes() == params[name].data.tobytes()
            assert loaded[name].data.dtype == params[name].data.dtype

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bogus.rsfc"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(DataError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        params = self._params(np.random.default_rng(8))
        path = tmp_path / "model.rsfc"
        save_checkpoint(path, params, {})
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(DataError, match="truncated"):
            load_checkpoint(path)

    def test_shape_conflict_names_tensor(self, tmp_path):
        rng = np.random.default_rng(9)
        params = self._params(rng)
        path = tmp_path / "model.rsfc"
        save_checkpoint(path, params, {})
        loaded, _ = load_checkpoint(path)
        expected = dict(params)
        expected["cls.w"] = Tensor(rng.normal(size=(5, 2)).astype(np.float32))
        with pytest.raises(DataError, match="cls.w"):
            dataio.check_config_echo(loaded, expected)

    def test_float64_tensors_roundtrip(self, tmp_path):
        params = self._params(np.random.default_rng(10), dtype=np.float64)
        path = tmp_path / "model64.rsfc"
        save_checkpoint(path, params, {})
        loaded, _ = load_checkpoint(path)
        for name in params:
            assert loaded[name].data.tobytes() == params[name].data.tobytes()
