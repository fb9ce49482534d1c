"""Volume I/O, normalization, patch sampling, tiling and merging."""

import struct

import numpy as np
import pytest
from scipy.stats import chisquare

from mr2ct.volume import (MagicMismatchError, MissingVolumeFileError,
                          NonFiniteVoxelError, DegenerateVolumeError,
                          PatchPlacementError, PatchSpec, TruncatedVolumeError,
                          Volume, VolumeError, VolumeTooSmallError,
                          denormalize, load_volume, merge_patches, normalize,
                          sample_patch_pairs, save_volume, tile_centers)


def _write_raw(path, dims, spacing, payload, magic=b"VOL3"):
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<3I", *dims))
        fh.write(struct.pack("<3f", *spacing))
        fh.write(payload)


class TestVol3Format:
    def test_2x2x2_identity(self, tmp_path):
        p = tmp_path / "v.vol3"
        _write_raw(p, (2, 2, 2), (1, 1, 1),
                   np.arange(8, dtype="<f4").tobytes())
        vol = load_volume(p)
        assert vol.dims == (2, 2, 2)
        # payload is x-fastest: flat index x + 2y + 4z
        np.testing.assert_array_equal(vol.voxels.ravel(order="F"), np.arange(8))

    def test_magic_mismatch(self, tmp_path):
        p = tmp_path / "v.vol3"
        _write_raw(p, (1, 1, 1), (1, 1, 1), b"\x00" * 4, magic=b"XXXX")
        with pytest.raises(MagicMismatchError):
            load_volume(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingVolumeFileError):
            load_volume(tmp_path / "nope.vol3")

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "v.vol3"
        _write_raw(p, (2, 2, 2), (1, 1, 1), b"\x00" * 8)
        with pytest.raises(TruncatedVolumeError):
            load_volume(p)

    def test_nan_voxel(self, tmp_path):
        p = tmp_path / "v.vol3"
        payload = np.array([0, np.nan], dtype="<f4").tobytes()
        _write_raw(p, (2, 1, 1), (1, 1, 1), payload)
        with pytest.raises(NonFiniteVoxelError):
            load_volume(p)

    def test_round_trip_bitwise(self, tmp_path, rng):
        vol = Volume(rng.normal(size=(5, 7, 3)).astype(np.float32),
                     spacing=(1.0, 1.5, 3.0))
        p = tmp_path / "v.vol3"
        save_volume(p, vol)
        back = load_volume(p)
        np.testing.assert_array_equal(back.voxels, vol.voxels)
        assert back.spacing == pytest.approx(vol.spacing)

    def test_double_round_trip_identical_bytes(self, tmp_path, rng):
        vol = Volume(rng.normal(size=(4, 4, 4)).astype(np.float32))
        a, b = tmp_path / "a.vol3", tmp_path / "b.vol3"
        save_volume(a, vol)
        save_volume(b, load_volume(a))
        assert a.read_bytes() == b.read_bytes()


class TestNormalize:
    def test_min_max_two_values(self):
        vox = np.array([0.0, 10.0] * 4, dtype=np.float32).reshape(2, 2, 2)
        out, params = normalize(Volume(vox), "min-max")
        assert set(np.unique(out.voxels)) == {0.0, 1.0}
        assert (params.offset, params.scale) == (0.0, 10.0)

    def test_zero_mean_unit_var(self, rng):
        vol = Volume(rng.normal(3.0, 2.0, size=(6, 6, 6)).astype(np.float32))
        out, _ = normalize(vol, "zero-mean-unit-var")
        assert abs(out.voxels.mean()) <= 1e-5
        assert abs(out.voxels.var() - 1.0) <= 1e-4

    @pytest.mark.parametrize("mode", ["zero-mean-unit-var", "min-max"])
    def test_inverse_composition(self, mode, rng):
        vol = Volume(rng.uniform(-50, 150, size=(5, 6, 7)).astype(np.float32))
        out, params = normalize(vol, mode)
        back = denormalize(out, params)
        np.testing.assert_allclose(back.voxels, vol.voxels, atol=1e-4)

    def test_constant_volume_degenerate(self):
        vol = Volume(np.full((3, 3, 3), 5.0, dtype=np.float32))
        with pytest.raises(DegenerateVolumeError):
            normalize(vol, "zero-mean-unit-var")
        with pytest.raises(DegenerateVolumeError):
            normalize(vol, "min-max")

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            normalize(Volume(np.zeros((3, 3, 3), np.float32)), "robust")


class TestPatchSpec:
    def test_invariants(self):
        with pytest.raises(VolumeError):
            PatchSpec(16, 32, 8)          # output > input
        with pytest.raises(VolumeError):
            PatchSpec(31, 16, 8)          # difference odd
        with pytest.raises(VolumeError):
            PatchSpec(32, 16, 17)         # stride > output leaves gaps
        assert PatchSpec().pad == 8


class TestSamplePatchPairs:
    def test_single_valid_center(self, rng):
        vox = rng.normal(size=(32, 32, 32)).astype(np.float32)
        mr, ct = Volume(vox), Volume(vox * 2)
        pairs = sample_patch_pairs(mr, ct, PatchSpec(), 3, seed=0)
        assert len(pairs) == 3
        assert all(p.center == (16, 16, 16) for p in pairs)
        np.testing.assert_array_equal(pairs[0].mr_patch[0], vox)
        np.testing.assert_array_equal(pairs[0].ct_patch, (vox * 2)[8:24, 8:24, 8:24])

    def test_determinism(self, rng):
        vox = rng.normal(size=(40, 44, 48)).astype(np.float32)
        mr, ct = Volume(vox), Volume(vox)
        a = sample_patch_pairs(mr, ct, PatchSpec(), 20, seed=5)
        b = sample_patch_pairs(mr, ct, PatchSpec(), 20, seed=5)
        assert [p.center for p in a] == [p.center for p in b]

    def test_center_distribution_uniform(self, rng):
        vox = rng.normal(size=(64, 64, 64)).astype(np.float32)
        mr, ct = Volume(vox), Volume(vox)
        pairs = sample_patch_pairs(mr, ct, PatchSpec(), 10000, seed=3)
        centers = np.array([p.center for p in pairs])
        for axis in range(3):
            vals = centers[:, axis]
            assert vals.min() >= 16 and vals.max() <= 48
            counts = np.bincount(vals - 16, minlength=33)
            assert chisquare(counts).pvalue > 0.01

    def test_context_becomes_channel_2(self, rng):
        vox = rng.normal(size=(36, 36, 36)).astype(np.float32)
        ctx = Volume(vox + 7)
        pairs = sample_patch_pairs(Volume(vox), Volume(vox), PatchSpec(), 4,
                                   seed=1, context=ctx)
        for p in pairs:
            assert p.mr_patch.shape == (2, 32, 32, 32)
            np.testing.assert_array_equal(p.mr_patch[1], p.mr_patch[0] + 7)

    def test_too_small(self):
        vol = Volume(np.zeros((31, 40, 40), np.float32))
        with pytest.raises(VolumeTooSmallError):
            sample_patch_pairs(vol, vol, PatchSpec(), 1, seed=0)

    def test_dim_mismatch(self):
        a = Volume(np.zeros((40, 40, 40), np.float32))
        b = Volume(np.zeros((40, 40, 41), np.float32))
        with pytest.raises(VolumeError):
            sample_patch_pairs(a, b, PatchSpec(), 1, seed=0)


def _coverage_mask(dims, spec):
    mask = np.zeros(dims, dtype=bool)
    h = spec.output_size // 2
    for c in tile_centers(dims, spec):
        x, y, z = (v - h for v in c)
        mask[x:x + spec.output_size, y:y + spec.output_size,
             z:z + spec.output_size] = True
    return mask


class TestTileCenters:
    def test_single_center(self):
        assert tile_centers((32, 32, 32), PatchSpec()) == [(16, 16, 16)]

    def test_clamped_axis(self):
        centers = tile_centers((48, 32, 32), PatchSpec())
        assert sorted({c[0] for c in centers}) == [16, 24, 32]
        assert sorted({c[1] for c in centers}) == [16]

    @pytest.mark.parametrize("dims", [(32, 32, 32), (48, 48, 48), (64, 40, 33),
                                      (153, 193, 50)])
    def test_full_coverage_brute_force(self, dims):
        spec = PatchSpec()
        mask = _coverage_mask(dims, spec)
        expected = np.zeros(dims, dtype=bool)
        pad = spec.pad
        expected[pad:dims[0] - pad, pad:dims[1] - pad, pad:dims[2] - pad] = True
        np.testing.assert_array_equal(mask, expected)

    def test_centers_strictly_increasing(self):
        centers = tile_centers((153, 193, 50), PatchSpec())
        xs = sorted({c[0] for c in centers})
        assert xs == sorted(set(xs)) and all(b > a for a, b in zip(xs, xs[1:]))

    def test_too_small(self):
        with pytest.raises(VolumeTooSmallError):
            tile_centers((31, 32, 32), PatchSpec())


class TestMergePatches:
    def test_single_patch_identity(self, rng):
        patch = rng.normal(size=(16, 16, 16)).astype(np.float32)
        out, mask = merge_patches([((8, 8, 8), patch)], (16, 16, 16))
        np.testing.assert_allclose(out.voxels, patch, atol=1e-6)
        assert mask.all()

    def test_mean_of_two(self):
        a = np.full((16, 16, 16), 2.0, np.float32)
        b = np.full((16, 16, 16), 6.0, np.float32)
        out, mask = merge_patches([((8, 8, 8), a), ((8, 8, 8), b)], (16, 16, 16))
        np.testing.assert_allclose(out.voxels, 4.0)
        assert mask.all()

    def test_uncovered_voxels_zero(self):
        patch = np.ones((16, 16, 16), np.float32)
        out, mask = merge_patches([((8, 8, 8), patch)], (32, 32, 32))
        assert not mask[20, 20, 20]
        assert out.voxels[20, 20, 20] == 0.0

    @pytest.mark.parametrize("dims", [(32, 32, 32), (48, 40, 36), (153, 193, 50)])
    def test_ground_truth_round_trip(self, dims, rng):
        spec = PatchSpec()
        truth = rng.normal(size=dims).astype(np.float32)
        h = spec.output_size // 2
        preds = []
        for c in tile_centers(dims, spec):
            x, y, z = (v - h for v in c)
            preds.append((c, truth[x:x + 16, y:y + 16, z:z + 16]))
        out, mask = merge_patches(preds, dims)
        np.testing.assert_allclose(out.voxels[mask], truth[mask], atol=1e-6)
        np.testing.assert_array_equal(mask, _coverage_mask(dims, spec))

    def test_out_of_bounds(self):
        patch = np.zeros((16, 16, 16), np.float32)
        with pytest.raises(PatchPlacementError):
            merge_patches([((4, 8, 8), patch)], (16, 16, 16))
