"""Synthetic anomaly generation and the SCDS dataset format."""

import numpy as np
import pytest

import ksparse.synthdata as sd
from ksparse.errors import ConfigError, FileFormatError
from ksparse.model import partition_patches


def _small_spec(**kw):
    defaults = dict(n_images=40, seed=5)
    defaults.update(kw)
    return sd.SynthSpec(**defaults)


class TestGeneration:
    def test_deterministic_per_seed(self):
        a = sd.generate(_small_spec())
        b = sd.generate(_small_spec())
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.image, sb.image)
            np.testing.assert_array_equal(sa.anomaly_mask, sb.anomaly_mask)

    def test_different_seed_differs(self):
        a = sd.generate(_small_spec(seed=5))
        b = sd.generate(_small_spec(seed=6))
        assert not np.array_equal(a[1].image, b[1].image)

    def test_class_balance(self):
        samples = sd.generate(_small_spec(n_images=100))
        assert sum(s.label for s in samples) == 50

    def test_label_iff_mask(self):
        for s in sd.generate(_small_spec()):
            assert (s.label == 1) == (s.anomaly_mask.size > 0)

    def test_mask_within_footprint(self):
        spec = _small_spec(n_images=200)
        for s in sd.generate(spec):
            if s.label:
                assert 1 <= s.anomaly_mask.size <= spec.max_footprint
                assert np.all(np.diff(s.anomaly_mask) > 0)
                assert s.anomaly_mask.max() < spec.n_patches

    def test_pixels_clamped(self):
        for s in sd.generate(_small_spec(amplitude=2.0, amplitude_jitter=0.0)):
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0

    def test_zero_amplitude_still_records_masks(self):
        samples = sd.generate(_small_spec(n_images=200, amplitude=0.0, amplitude_jitter=0.0))
        pos = [s for s in samples if s.label == 1]
        neg = [s for s in samples if s.label == 0]
        assert all(s.anomaly_mask.size > 0 for s in pos)
        # with no blob the two classes are statistically indistinguishable
        mean_gap = abs(np.mean([s.image.mean() for s in pos])
                       - np.mean([s.image.mean() for s in neg]))
        assert mean_gap < 0.01

    def test_mask_patches_brighter_by_half_amplitude(self):
        """Direct measurement: mean inside mask patches - outside >= A/2."""
        spec = _small_spec(n_images=400)
        inside, outside = [], []
        for s in sd.generate(spec):
            if s.label == 0:
                continue
            grid = partition_patches(s.image, spec.patch)
            sel = np.zeros(spec.n_patches, dtype=bool)
            sel[s.anomaly_mask] = True
            inside.append(grid.patches[sel].mean())
            outside.append(grid.patches[~sel].mean())
        margin = np.mean(inside) - np.mean(outside)
        assert margin >= spec.amplitude / 2, margin

    def test_radius_exceeding_bounds_rejected(self):
        with pytest.raises(ConfigError, match="exceeds image bounds"):
            sd.SynthSpec(height=16, width=16, radius_range=(6.0, 8.0), max_footprint=1000000)

    def test_footprint_budget_enforced(self):
        with pytest.raises(ConfigError, match="footprint"):
            sd.SynthSpec(radius_range=(6.0, 8.5), max_footprint=4)


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        samples = sd.generate(_small_spec())
        path = tmp_path / "data.scds"
        sd.save_dataset(samples, str(path), patch=8)
        loaded, header = sd.load_dataset(str(path))
        assert header["n"] == len(samples) and header["L"] == 64
        for a, b in zip(samples, loaded):
            np.testing.assert_array_equal(a.image, b.image)
            assert a.label == b.label
            np.testing.assert_array_equal(a.anomaly_mask, b.anomaly_mask)

    def test_double_round_trip_bytes_identical(self, tmp_path):
        samples = sd.generate(_small_spec())
        p1, p2 = tmp_path / "a.scds", tmp_path / "b.scds"
        sd.save_dataset(samples, str(p1), patch=8)
        loaded, _ = sd.load_dataset(str(p1))
        sd.save_dataset(loaded, str(p2), patch=8)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.scds"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(FileFormatError, match="bad magic"):
            sd.load_dataset(str(path))

    def test_future_version_rejected(self, tmp_path):
        samples = sd.generate(_small_spec(n_images=2))
        path = tmp_path / "v.scds"
        sd.save_dataset(samples, str(path), patch=8)
        raw = bytearray(path.read_bytes())
        raw[4:6] = (99).to_bytes(2, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(FileFormatError, match="version 99"):
            sd.load_dataset(str(path))

    def test_truncation_reports_expected_vs_actual(self, tmp_path):
        samples = sd.generate(_small_spec(n_images=2))
        path = tmp_path / "t.scds"
        sd.save_dataset(samples, str(path), patch=8)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 100])
        with pytest.raises(FileFormatError, match=r"expected \d+ bytes.*got \d+"):
            sd.load_dataset(str(path))

    def test_trailing_bytes_rejected(self, tmp_path):
        samples = sd.generate(_small_spec(n_images=2))
        path = tmp_path / "x.scds"
        sd.save_dataset(samples, str(path), patch=8)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FileFormatError, match="trailing"):
            sd.load_dataset(str(path))


class TestSpecParsing:
    def test_round_trippable_keys(self):
        spec = sd.parse_synth_spec("n_images = 8\nradius_min = 6.5\nradius_max = 7.5\nseed = 3")
        assert spec.n_images == 8 and spec.radius_range == (6.5, 7.5) and spec.seed == 3

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="line 2: unknown key"):
            sd.parse_synth_spec("n_images = 8\nblobs = 2")

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="line 1: bad value"):
            sd.parse_synth_spec("n_images = lots")
