"""Procedural paired MR-like / CT-like volumes.

A subject is a random arrangement of axis-aligned ellipsoids of distinct
tissue classes painted over a background (later ellipsoids overwrite earlier
ones).  The integer class map drives both modalities:

* CT intensity is piecewise constant per class: class c maps to
  1000 * c / n_ellipsoids (background 0), so boundaries stay sharp.
* MR intensity is a per-class base value on a descending ramp from 0.9
  (background) to 0.2 (highest class), plus a smooth global sinusoidal
  texture scaled by texture_amplitude, plus Gaussian noise.

Because CT is a pure function of the class map and the class map is
recoverable from MR base values, the MR -> CT mapping is learnable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from .volume import Volume, save_volume

CT_PEAK = 1000.0
MR_BASE_HI = 0.9
MR_BASE_LO = 0.2


class PhantomError(Exception):
    pass


@dataclass
class PhantomConfig:
    dims: tuple[int, int, int] = (48, 48, 48)
    n_ellipsoids: int = 6
    texture_amplitude: float = 0.2
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or any(d < 33 for d in self.dims):
            raise PhantomError(f"dims must be 3 axes of >= 33 voxels, got {self.dims}")
        if self.n_ellipsoids < 1:
            raise PhantomError("need at least one ellipsoid")
        if not (0 <= self.texture_amplitude < 1):
            raise PhantomError("texture_amplitude must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise PhantomError("noise_sigma must be >= 0")


def class_intensity_tables(n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """(ct_values, mr_bases), both indexed by class 0..n_classes."""
    ct = CT_PEAK * np.arange(n_classes + 1, dtype=np.float64) / n_classes
    mr = np.linspace(MR_BASE_HI, MR_BASE_LO, n_classes + 1)
    return ct, mr


def _class_map(cfg: PhantomConfig, rng) -> np.ndarray:
    nx, ny, nz = cfg.dims
    gx, gy, gz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                             indexing="ij")
    classes = np.zeros(cfg.dims, dtype=np.int32)
    for i in range(cfg.n_ellipsoids):
        center = rng.uniform(0.25, 0.75, size=3) * cfg.dims
        semi = rng.uniform(0.12, 0.30, size=3) * cfg.dims
        inside = (((gx - center[0]) / semi[0]) ** 2
                  + ((gy - center[1]) / semi[1]) ** 2
                  + ((gz - center[2]) / semi[2]) ** 2) <= 1.0
        classes[inside] = i + 1
    return classes


def _texture_field(dims, rng) -> np.ndarray:
    """Smooth field in roughly [-1, 1]: product-of-sines modes, random
    frequencies and phases."""
    nx, ny, nz = dims
    ax = [np.arange(n, dtype=np.float64) / n for n in dims]
    field = np.zeros(dims, dtype=np.float64)
    n_modes = 3
    for _ in range(n_modes):
        freq = rng.uniform(1.5, 4.0, size=3)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        sx = np.sin(2 * np.pi * freq[0] * ax[0] + phase[0])
        sy = np.sin(2 * np.pi * freq[1] * ax[1] + phase[1])
        sz = np.sin(2 * np.pi * freq[2] * ax[2] + phase[2])
        field += sx[:, None, None] * sy[None, :, None] * sz[None, None, :]
    return field / n_modes


def generate_pair(cfg: PhantomConfig) -> tuple[Volume, Volume]:
    """Deterministic (MR, CT) pair for the given config."""
    rng = np.random.default_rng(cfg.seed)
    classes = _class_map(cfg, rng)
    ct_table, mr_table = class_intensity_tables(cfg.n_ellipsoids)
    ct = ct_table[classes]
    mr = mr_table[classes]
    if cfg.texture_amplitude > 0:
        mr = mr + cfg.texture_amplitude * _texture_field(cfg.dims, rng)
    else:
        _texture_field(cfg.dims, rng)  # keep the rng stream aligned
    if cfg.noise_sigma > 0:
        mr = mr + rng.normal(0.0, cfg.noise_sigma, size=cfg.dims)
    return (Volume(mr.astype(np.float32)), Volume(ct.astype(np.float32)))


def subject_seed(base_seed: int, k: int) -> int:
    """Deterministic per-subject seed derived from the dataset seed."""
    return int(np.random.SeedSequence([base_seed, k]).generate_state(1)[0])


@dataclass
class PhantomDataset:
    pairs: list[tuple[Volume, Volume]]
    train_indices: list[int]
    test_indices: list[int]


def generate_dataset(cfg: PhantomConfig, n_subjects: int) -> PhantomDataset:
    """n_subjects independent pairs; the last subject is held out."""
    if n_subjects < 2:
        raise PhantomError(f"need at least 2 subjects for a split, got {n_subjects}")
    pairs = [generate_pair(replace(cfg, seed=subject_seed(cfg.seed, k)))
             for k in range(n_subjects)]
    return PhantomDataset(pairs, list(range(n_subjects - 1)), [n_subjects - 1])


def write_dataset(out_dir, ds: PhantomDataset) -> None:
    """Emit subj_<k>_mr.vol3 / subj_<k>_ct.vol3 plus a manifest of the split."""
    os.makedirs(out_dir, exist_ok=True)
    for k, (mr, ct) in enumerate(ds.pairs):
        save_volume(os.path.join(out_dir, f"subj_{k}_mr.vol3"), mr)
        save_volume(os.path.join(out_dir, f"subj_{k}_ct.vol3"), ct)
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        for k in range(len(ds.pairs)):
            role = "train" if k in ds.train_indices else "test"
            fh.write(f"subj_{k} {role}\n")


def read_manifest(data_dir) -> tuple[list[int], list[int]]:
    train, test = [], []
    path = os.path.join(data_dir, "manifest.txt")
    if not os.path.exists(path):
        raise PhantomError(f"no manifest.txt in {data_dir}")
    with open(path) as fh:
        for line in fh:
            name, role = line.split()
            k = int(name.removeprefix("subj_"))
            (train if role == "train" else test).append(k)
    return train, test
