"""Volumetric data handling: VOL3 file I/O, intensity normalization, random
training-patch sampling, deterministic inference tiling and overlap-averaged
reconstruction.

Voxel arrays have shape (nx, ny, nz) and the VOL3 payload is laid out
x-fastest, so serialization uses Fortran raveling.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass

import numpy as np

VOL3_MAGIC = b"VOL3"


class VolumeError(Exception):
    pass


class MissingVolumeFileError(VolumeError):
    pass


class MagicMismatchError(VolumeError):
    pass


class TruncatedVolumeError(VolumeError):
    pass


class NonFiniteVoxelError(VolumeError):
    pass


class DegenerateVolumeError(VolumeError):
    pass


class VolumeTooSmallError(VolumeError):
    pass


class PatchPlacementError(VolumeError):
    pass


@dataclass
class Volume:
    """Dense 3D scalar grid with physical voxel spacing (mm)."""
    voxels: np.ndarray          # float32, shape (nx, ny, nz)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise VolumeError(f"volume must be rank 3, got {self.voxels.ndim}")
        if any(s <= 0 for s in self.spacing):
            raise VolumeError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape


def save_volume(path, vol: Volume) -> None:
    with open(path, "wb") as fh:
        fh.write(VOL3_MAGIC)
        fh.write(struct.pack("<3I", *vol.dims))
        fh.write(struct.pack("<3f", *vol.spacing))
        fh.write(np.asarray(vol.voxels, dtype="<f4").ravel(order="F").tobytes())


def load_volume(path) -> Volume:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError as exc:
        raise MissingVolumeFileError(str(path)) from exc
    if len(blob) < 4 or blob[:4] != VOL3_MAGIC:
        raise MagicMismatchError(f"{path}: expected magic {VOL3_MAGIC!r}, got {blob[:4]!r}")
    if len(blob) < 28:
        raise TruncatedVolumeError(f"{path}: header truncated ({len(blob)} bytes)")
    dims = struct.unpack("<3I", blob[4:16])
    spacing = struct.unpack("<3f", blob[16:28])
    n = dims[0] * dims[1] * dims[2]
    payload = blob[28:]
    if len(payload) < 4 * n:
        raise TruncatedVolumeError(
            f"{path}: payload has {len(payload)} bytes, expected {4 * n}")
    voxels = np.frombuffer(payload[:4 * n], dtype="<f4").reshape(dims, order="F")
    if not np.isfinite(voxels).all():
        raise NonFiniteVoxelError(f"{path}: non-finite voxel values")
    return Volume(voxels.copy(), spacing)


# ---------------------------------------------------------------------------
# intensity normalization


@dataclass
class NormParams:
    """Affine normalization v_norm = (v - offset) / scale, exactly invertible."""
    mode: str
    offset: float
    scale: float

    def apply(self, vol: Volume) -> Volume:
        out = (vol.voxels.astype(np.float64) - self.offset) / self.scale
        return Volume(out.astype(np.float32), vol.spacing)

    def invert(self, vol: Volume) -> Volume:
        out = vol.voxels.astype(np.float64) * self.scale + self.offset
        return Volume(out.astype(np.float32), vol.spacing)


def normalize(vol: Volume, mode: str) -> tuple[Volume, NormParams]:
    """mode 'zero-mean-unit-var' or 'min-max' (onto [0, 1])."""
    vx = vol.voxels.astype(np.float64)
    if mode == "zero-mean-unit-var":
        std = float(vx.std())
        if std == 0.0:
            raise DegenerateVolumeError("constant volume has no variance to normalize")
        params = NormParams(mode, float(vx.mean()), std)
    elif mode == "min-max":
        lo, hi = float(vx.min()), float(vx.max())
        if hi == lo:
            raise DegenerateVolumeError("constant volume has no intensity range")
        params = NormParams(mode, lo, hi - lo)
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    out = params.apply(vol)
    if not np.isfinite(out.voxels).all():
        raise NonFiniteVoxelError("normalization produced non-finite voxels")
    return out, params


def denormalize(vol: Volume, params: NormParams) -> Volume:
    return params.invert(vol)


# ---------------------------------------------------------------------------
# patch geometry


@dataclass
class PatchSpec:
    """Input/output patch sizes and the inference tiling step, all in voxels.

    The output region is centered inside the input region, so the size
    difference must be even; stride <= output_size guarantees gap-free tiling.
    """
    input_size: int = 32
    output_size: int = 16
    stride: int = 8

    def __post_init__(self):
        if self.input_size <= 0 or self.output_size <= 0 or self.stride <= 0:
            raise VolumeError("patch sizes and stride must be positive")
        if self.output_size > self.input_size:
            raise VolumeError("output_size must not exceed input_size")
        if (self.input_size - self.output_size) % 2:
            raise VolumeError("input_size - output_size must be even")
        if self.stride > self.output_size:
            raise VolumeError("stride must not exceed output_size (would leave gaps)")

    @property
    def pad(self) -> int:
        """Border width on each side that no output region can reach."""
        return (self.input_size - self.output_size) // 2


@dataclass
class PatchPair:
    mr_patch: np.ndarray   # [channels, in, in, in]
    ct_patch: np.ndarray   # [out, out, out]
    center: tuple[int, int, int]


def _center_range(dim: int, input_size: int) -> tuple[int, int]:
    """Inclusive range of valid patch centers along one axis."""
    lo = input_size // 2
    hi = dim - (input_size - input_size // 2)
    return lo, hi


def _crop(voxels: np.ndarray, center, size: int) -> np.ndarray:
    h = size // 2
    x, y, z = (c - h for c in center)
    return voxels[x:x + size, y:y + size, z:z + size]


def sample_patch_pairs(mr: Volume, ct: Volume, spec: PatchSpec, count: int,
                       seed, context: Volume | None = None) -> list[PatchPair]:
    """Draw `count` centered MR/CT patch pairs with uniformly random centers.

    Deterministic given the seed.  When `context` is given, its crop at the
    same center becomes channel 2 of the MR patch.
    """
    if mr.dims != ct.dims:
        raise VolumeError(f"MR dims {mr.dims} != CT dims {ct.dims}")
    if context is not None and context.dims != mr.dims:
        raise VolumeError(f"context dims {context.dims} != MR dims {mr.dims}")
    if any(d < spec.input_size for d in mr.dims):
        raise VolumeTooSmallError(
            f"volume dims {mr.dims} smaller than input patch {spec.input_size}")
    rng = np.random.default_rng(seed)
    ranges = [_center_range(d, spec.input_size) for d in mr.dims]
    centers = np.column_stack(
        [rng.integers(lo, hi, size=count, endpoint=True) for lo, hi in ranges])
    pairs = []
    for c in centers:
        c = tuple(int(v) for v in c)
        channels = [_crop(mr.voxels, c, spec.input_size)]
        if context is not None:
            channels.append(_crop(context.voxels, c, spec.input_size))
        pairs.append(PatchPair(
            mr_patch=np.stack(channels),
            ct_patch=_crop(ct.voxels, c, spec.output_size).copy(),
            center=c))
    return pairs


def tile_centers(dims, spec: PatchSpec) -> list[tuple[int, int, int]]:
    """Deterministic inference tiling: stride-spaced centers per axis, with the
    last center clamped to the maximal valid position."""
    if any(d < spec.input_size for d in dims):
        raise VolumeTooSmallError(
            f"volume dims {tuple(dims)} smaller than input patch {spec.input_size}")
    per_axis = []
    for d in dims:
        lo, hi = _center_range(d, spec.input_size)
        cs = list(range(lo, hi + 1, spec.stride))
        if cs[-1] != hi:
            cs.append(hi)
        per_axis.append(cs)
    return [c for c in itertools.product(*per_axis)]


def merge_patches(predictions, dims, spacing=(1.0, 1.0, 1.0)) -> tuple[Volume, np.ndarray]:
    """Average overlapping output patches into a volume.

    `predictions` is an iterable of (center, cubic array).  Returns the merged
    volume and a boolean coverage mask; uncovered voxels are zero.
    """
    acc = np.zeros(tuple(dims), dtype=np.float64)
    cnt = np.zeros(tuple(dims), dtype=np.int32)
    for center, patch in predictions:
        patch = np.asarray(patch)
        size = patch.shape[0]
        h = size // 2
        start = tuple(c - h for c in center)
        if any(s < 0 for s in start) or any(s + size > d for s, d in zip(start, dims)):
            raise PatchPlacementError(
                f"patch of size {size} at center {tuple(center)} exceeds dims {tuple(dims)}")
        x, y, z = start
        acc[x:x + size, y:y + size, z:z + size] += patch
        cnt[x:x + size, y:y + size, z:z + size] += 1
    mask = cnt > 0
    out = np.zeros(tuple(dims), dtype=np.float64)
    np.divide(acc, cnt, out=out, where=mask)
    return Volume(out.astype(np.float32), spacing), mask
