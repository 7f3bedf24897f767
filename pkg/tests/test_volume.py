import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxalign.errors import BadFactor, BadRange, BadVolumeFile, ShapeMismatch
from voxalign.geom import RigidTransform, axis_angle, invert
from voxalign.volume import (
    HEADER_SIZE,
    BinaryMask3,
    Volume3,
    binarize,
    dice,
    downsample,
    read_volume,
    resample_rigid,
    threshold_normalize,
    write_volume,
)


def blob_volume(n=24, spacing=0.2, sigma=0.25):
    """Smooth (band-limited) phantom: two anisotropic Gaussian blobs."""
    ax = (np.arange(n) - (n - 1) / 2) / (n / 2)
    z, y, x = np.meshgrid(ax, ax, ax, indexing="ij")
    a = np.exp(-((z - 0.15) ** 2 / sigma**2 + y**2 / (0.6 * sigma) ** 2 + (x + 0.1) ** 2 / sigma**2) / 2)
    b = 0.6 * np.exp(-((z + 0.2) ** 2 + (y - 0.2) ** 2 + (x - 0.2) ** 2) / (2 * (0.7 * sigma) ** 2))
    return Volume3(a + b, np.full(3, spacing))


class TestThresholdNormalize:
    def test_threshold_maps_to_zero(self):
        v = Volume3(np.full((2, 2, 2), 2000.0))
        assert threshold_normalize(v, 2000, 5000).data.max() == 0

    def test_max_maps_to_one(self):
        v = Volume3(np.full((2, 2, 2), 5000.0))
        assert np.all(threshold_normalize(v, 2000, 5000).data == 1)

    def test_below_threshold_clamped(self):
        v = Volume3(np.full((2, 2, 2), 1000.0))
        assert np.all(threshold_normalize(v, 2000, 5000).data == 0)

    def test_bad_range(self):
        with pytest.raises(BadRange):
            threshold_normalize(Volume3(np.zeros((2, 2, 2))), 10, 10)

    def test_range_and_monotone(self):
        x = np.linspace(0, 6000, 64).reshape(4, 4, 4)
        out = threshold_normalize(Volume3(x), 2000, 5000).data
        assert out.min() >= 0 and out.max() <= 1
        assert np.all(np.diff(out.reshape(-1)) >= 0)

    def test_idempotent_on_unit_range(self):
        rng = np.random.default_rng(0)
        v = threshold_normalize(Volume3(rng.uniform(0, 7000, (5, 5, 5))), 2000, 7000)
        np.testing.assert_array_equal(threshold_normalize(v, 0, 1).data, v.data)


class TestResample:
    def test_identity_exact(self):
        v = blob_volume(12)
        np.testing.assert_array_equal(resample_rigid(v, RigidTransform.identity()).data, v.data)

    @pytest.mark.parametrize("axis", [0, 1, 2])
    @pytest.mark.parametrize("steps", [1, -2])
    def test_integer_shift_is_array_shift(self, axis, steps):
        rng = np.random.default_rng(axis)
        v = Volume3(rng.random((8, 9, 10)), spacing=[0.32, 0.25, 0.1])
        t = np.zeros(3)
        t[axis] = steps * v.spacing[axis]
        out = resample_rigid(v, RigidTransform(np.eye(3), t)).data
        # oracle: np.roll then fill the vacated slab
        expected = np.roll(v.data, steps, axis=axis)
        idx = [slice(None)] * 3
        idx[axis] = slice(0, steps) if steps > 0 else slice(steps, None)
        expected[tuple(idx)] = 0.0
        np.testing.assert_array_equal(out, expected)

    def test_fill_value(self):
        v = Volume3(np.ones((4, 4, 4)))
        out = resample_rigid(v, RigidTransform(np.eye(3), [1.0, 0, 0]), fill=-7.0).data
        assert np.all(out[0] == -7.0)
        assert np.all(out[1:] == 1.0)

    def test_round_trip_smooth_phantom(self):
        v = blob_volume(24)
        T = RigidTransform(axis_angle([1, 2, -1], 0.9), [0.3, -0.2, 0.1])
        back = resample_rigid(resample_rigid(v, T), invert(T)).data
        # interior: voxels within the inscribed ball, so no sample leaves the grid
        ax = np.arange(24) - 11.5
        z, y, x = np.meshgrid(ax, ax, ax, indexing="ij")
        interior = np.sqrt(z**2 + y**2 + x**2) < 8
        err = np.abs(back - v.data)[interior]
        # two trilinear passes blur the peak slightly; the bulk is near exact
        assert np.mean(err) < 0.01
        assert np.max(err) < 0.1

    def test_rotation_moves_points_as_transform(self):
        # a single bright voxel lands where T sends its centre
        n = 11
        data = np.zeros((n, n, n))
        data[7, 5, 5] = 1.0
        v = Volume3(data, spacing=[1.0, 1.0, 1.0])
        T = RigidTransform(axis_angle([0, 0, 1], np.pi / 2))
        out = resample_rigid(v, T).data
        p = v.origin + np.array([7, 5, 5]) * v.spacing
        q = T.R @ (p - v.center) + v.center
        idx = tuple(np.round((q - v.origin) / v.spacing).astype(int))
        assert out[idx] == pytest.approx(1.0)
        assert out.sum() == pytest.approx(1.0)

    def test_worker_partition_independent(self):
        v = blob_volume(16)
        T = RigidTransform(axis_angle([1, 0, 1], 2.0), [0.1, 0.0, -0.3])
        ref = resample_rigid(v, T, workers=1).data
        for w in (2, 3, 7):
            np.testing.assert_array_equal(resample_rigid(v, T, workers=w).data, ref)

    def test_out_shape(self):
        v = blob_volume(12)
        out = resample_rigid(v, RigidTransform.identity(), out_shape=(6, 8, 10))
        assert out.shape == (6, 8, 10)
        np.testing.assert_allclose(out.center, v.center)


class TestDownsample:
    def test_factor_one(self):
        v = blob_volume(8)
        np.testing.assert_array_equal(downsample(v, 1).data, v.data)

    def test_constant_preserved(self):
        v = Volume3(np.full((16, 16, 16), 0.37))
        out = downsample(v, 8)
        assert out.shape == (2, 2, 2)
        np.testing.assert_allclose(out.data, 0.37, atol=1e-6)
        assert abs(out.data.mean() - v.data.mean()) < 1e-6

    def test_resolution_arithmetic(self):
        # 512^3 at 10 um -> 64^3 at 80 um; checked on the header only to keep memory low
        v = Volume3(np.zeros((512, 8, 8), dtype=np.float32), spacing=[0.01] * 3)
        out = downsample(v, 8)
        assert out.shape[0] == 64
        np.testing.assert_allclose(out.spacing, 0.08)
        np.testing.assert_allclose(out.center, v.center)

    def test_box_average(self):
        data = np.arange(8.0).reshape(2, 2, 2)
        assert downsample(Volume3(data), 2).data.item() == pytest.approx(3.5)

    @pytest.mark.parametrize("factor", [0, 3, 2.0])
    def test_bad_factor(self, factor):
        with pytest.raises(BadFactor):
            downsample(Volume3(np.zeros((4, 4, 4))), factor)


class TestMasks:
    def test_binarize_zero(self):
        assert binarize(Volume3(np.zeros((3, 3, 3))), 0.5).data.sum() == 0

    def test_binarize_tau_zero(self):
        v = Volume3(np.random.default_rng(0).random((4, 4, 4)))
        assert np.all(binarize(v, 0.0).data == 1)

    def test_binarize_monotone(self):
        v = Volume3(np.random.default_rng(1).random((6, 6, 6)))
        for lo, hi in [(0.1, 0.2), (0.3, 0.9), (0.5, 0.51)]:
            a, b = binarize(v, lo).data, binarize(v, hi).data
            assert np.all(b <= a)

    def test_dice_identical(self):
        m = BinaryMask3(np.random.default_rng(2).random((5, 5, 5)) > 0.5)
        assert dice(m, m) == 1.0

    def test_dice_disjoint(self):
        a = np.zeros((4, 4, 4), np.uint8)
        b = np.zeros((4, 4, 4), np.uint8)
        a[0] = 1
        b[1] = 1
        assert dice(BinaryMask3(a), BinaryMask3(b)) == 0.0

    def test_dice_half(self):
        # |A| = |B| = 4, |A & B| = 2 -> 2*2/8
        a = np.zeros((2, 2, 3), np.uint8)
        b = np.zeros((2, 2, 3), np.uint8)
        a.reshape(-1)[[0, 1, 2, 3]] = 1
        b.reshape(-1)[[2, 3, 4, 5]] = 1
        assert dice(BinaryMask3(a), BinaryMask3(b)) == 0.5

    def test_dice_empty_convention(self):
        z = BinaryMask3(np.zeros((2, 2, 2)))
        assert dice(z, z) == 1.0

    def test_dice_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            dice(BinaryMask3(np.zeros((2, 2, 2))), BinaryMask3(np.zeros((2, 2, 3))))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.95))
    def test_dice_symmetric(self, seed, p):
        rng = np.random.default_rng(seed)
        a = BinaryMask3(rng.random((4, 5, 6)) < p)
        b = BinaryMask3(rng.random((4, 5, 6)) < p)
        assert dice(a, b) == dice(b, a)
        assert 0.0 <= dice(a, b) <= 1.0


class TestVolumeFile:
    def test_round_trip(self, tmp_path):
        v = Volume3(np.random.default_rng(0).random((3, 4, 5)).astype(np.float32), [0.1, 0.2, 0.3], [1, -2, 3])
        write_volume(v, tmp_path / "a.vol")
        raw = (tmp_path / "a.vol").read_bytes()
        assert raw[:4] == b"VOL3"
        assert len(raw) == HEADER_SIZE + 4 * 60
        w = read_volume(tmp_path / "a.vol")
        np.testing.assert_array_equal(w.data, v.data)
        np.testing.assert_allclose(w.spacing, v.spacing, rtol=1e-7)
        np.testing.assert_allclose(w.origin, v.origin, rtol=1e-7)

    def test_header_layout(self, tmp_path):
        import struct

        write_volume(Volume3(np.zeros((2, 3, 4), np.float32), [0.5, 0.25, 2.0]), tmp_path / "h.vol")
        raw = (tmp_path / "h.vol").read_bytes()
        assert struct.unpack_from("<I3I", raw, 4) == (1, 2, 3, 4)
        assert struct.unpack_from("<3f", raw, 20) == (0.5, 0.25, 2.0)
        assert raw[44:64] == b"\0" * 20
        # C order, d slowest
        v = Volume3(np.arange(24, dtype=np.float32).reshape(2, 3, 4))
        write_volume(v, tmp_path / "c.vol")
        payload = np.frombuffer((tmp_path / "c.vol").read_bytes()[64:], "<f4")
        np.testing.assert_array_equal(payload, np.arange(24))

    def test_rejects_bad_magic_and_version(self, tmp_path):
        write_volume(Volume3(np.zeros((2, 2, 2), np.float32)), tmp_path / "a.vol")
        raw = bytearray((tmp_path / "a.vol").read_bytes())
        bad = bytes(raw)
        (tmp_path / "m.vol").write_bytes(b"XXXX" + bad[4:])
        with pytest.raises(BadVolumeFile):
            read_volume(tmp_path / "m.vol")
        raw[4] = 9
        (tmp_path / "v.vol").write_bytes(bytes(raw))
        with pytest.raises(BadVolumeFile):
            read_volume(tmp_path / "v.vol")
        (tmp_path / "t.vol").write_bytes(bad[:-4])
        with pytest.raises(BadVolumeFile):
            read_volume(tmp_path / "t.vol")
