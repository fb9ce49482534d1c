"""Auto-context cascade: stage 0 maps MR patches to CT patches; every later
stage additionally sees the previous stage's merged full-volume estimate,
cropped at the same input-size region, as a second channel.

Normalization convention: MR is normalized zero-mean/unit-variance per
volume, CT is min-max scaled with parameters pooled over the training CTs;
the cascade carries the CT parameters so estimates can be denormalized.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from . import networks
from .autodiff import Tape, Tensor
from .networks import GeneratorNet, build_discriminator, build_generator
from .training import TrainConfig, make_patch_sampler, train_stage
from .volume import (NormParams, PatchSpec, Volume, merge_patches, normalize,
                     tile_centers)


class CascadeError(Exception):
    pass


@dataclass
class Cascade:
    stages: list[GeneratorNet]
    spec: PatchSpec
    ct_norm: NormParams
    mr_norm_mode: str = "zero-mean-unit-var"

    def __post_init__(self):
        if not self.stages:
            raise CascadeError("cascade must have at least one stage")
        if self.stages[0].in_channels != 1:
            raise CascadeError("stage 0 must take a single input channel")
        for k, g in enumerate(self.stages[1:], start=1):
            if g.in_channels != 2:
                raise CascadeError(f"stage {k} must take two input channels")


def derive_seed(*entropy) -> int:
    """Stable scalar seed derived from a tuple of integers."""
    return int(np.random.SeedSequence(list(entropy)).generate_state(1)[0])


def _infer_stage(gen: GeneratorNet, spec: PatchSpec, mr_n: Volume,
                 context: Volume | None, chunk: int = 9):
    """Tiled single-stage inference in normalized space."""
    centers = tile_centers(mr_n.dims, spec)
    half_in = spec.input_size // 2
    preds = []
    for lo in range(0, len(centers), chunk):
        batch = centers[lo:lo + chunk]
        xs = np.empty((len(batch), gen.in_channels) + (spec.input_size,) * 3,
                      dtype=np.float32)
        for row, c in enumerate(batch):
            x, y, z = (v - half_in for v in c)
            s = np.index_exp[x:x + spec.input_size, y:y + spec.input_size,
                             z:z + spec.input_size]
            xs[row, 0] = mr_n.voxels[s]
            if context is not None:
                xs[row, 1] = context.voxels[s]
        tape = Tape()
        out = gen.forward(Tensor(xs, tape), "infer").data
        tape.release()
        if out.shape[2:] != (spec.output_size,) * 3:
            raise CascadeError(
                f"generator output {out.shape[2:]} != spec output size "
                f"{spec.output_size}; patch spec and channel plan disagree")
        preds.extend((c, out[row, 0]) for row, c in enumerate(batch))
    return merge_patches(preds, mr_n.dims, mr_n.spacing)


def infer_cascade_normalized(stages, spec: PatchSpec, mr_n: Volume):
    """Chained tiled inference; returns (estimate, mask) in normalized space."""
    context = None
    est = mask = None
    for gen in stages:
        est, mask = _infer_stage(gen, spec, mr_n, context)
        context = est  # uncovered voxels are already zero
    return est, mask


def infer_cascade(cascade: Cascade, mr: Volume):
    """Full-pipeline inference: normalize MR, run all stages, denormalize."""
    if any(d < cascade.spec.input_size for d in mr.dims):
        raise CascadeError(
            f"MR dims {mr.dims} smaller than patch input {cascade.spec.input_size}")
    mr_n, _ = normalize(mr, cascade.mr_norm_mode)
    est_n, mask = infer_cascade_normalized(cascade.stages, cascade.spec, mr_n)
    est = cascade.ct_norm.invert(est_n)
    est.voxels[~mask] = 0.0
    return est, mask


def pooled_ct_norm(ct_volumes) -> NormParams:
    """Min-max parameters over the pooled training CT intensities."""
    lo = min(float(v.voxels.min()) for v in ct_volumes)
    hi = max(float(v.voxels.max()) for v in ct_volumes)
    if hi == lo:
        raise CascadeError("training CTs have zero pooled intensity range")
    return NormParams("min-max", lo, hi - lo)


def train_cascade(subjects, n_stages: int, cfg: TrainConfig,
                  spec: PatchSpec | None = None, channel_plan=None,
                  out_dir=None, resume: bool = True) -> Cascade:
    """Train an n_stages cascade on (MR, CT) subject pairs.

    When out_dir is given, per-stage CSV logs and training-state checkpoints
    land there and interrupted runs resume from the latest state.
    """
    if n_stages < 1:
        raise CascadeError("n_stages must be >= 1")
    spec = spec or PatchSpec()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    mrs_n = [normalize(mr, "zero-mean-unit-var")[0] for mr, _ in subjects]
    ct_norm = pooled_ct_norm([ct for _, ct in subjects])
    cts_n = [ct_norm.apply(ct) for _, ct in subjects]

    stages: list[GeneratorNet] = []
    for k in range(n_stages):
        in_channels = 1 if k == 0 else 2
        gen = build_generator(in_channels, channel_plan,
                              seed=derive_seed(cfg.seed, 1, k))
        disc = build_discriminator(seed=derive_seed(cfg.seed, 2, k))
        if k == 0:
            contexts = [None] * len(subjects)
        else:
            contexts = [infer_cascade_normalized(stages, spec, mr_n)[0]
                        for mr_n in mrs_n]
        sampler = make_patch_sampler(
            [(mr_n, ct_n, ctx) for mr_n, ct_n, ctx in zip(mrs_n, cts_n, contexts)],
            spec)
        stage_cfg = replace(cfg, seed=derive_seed(cfg.seed, 3, k))
        log_path = state_path = None
        if out_dir is not None:
            log_path = os.path.join(out_dir, f"stage_{k}_log.csv")
            state_path = os.path.join(out_dir, f"stage_{k}_state.ckpt")
        train_stage(gen, disc, sampler, stage_cfg, log_path=log_path,
                    checkpoint_path=state_path, resume=resume)
        stages.append(gen)

    cascade = Cascade(stages, spec, ct_norm)
    if out_dir is not None:
        save_cascade(out_dir, cascade)
    return cascade


# --- persistence ------------------------------------------------------------

def save_cascade(dir_path, cascade: Cascade) -> None:
    os.makedirs(dir_path, exist_ok=True)
    for k, gen in enumerate(cascade.stages):
        networks.save_network(gen, os.path.join(dir_path, f"stage_{k}.ckpt"),
                              os.path.join(dir_path, f"stage_{k}.meta"))
    meta = {
        "n_stages": len(cascade.stages),
        "spec": {"input_size": cascade.spec.input_size,
                 "output_size": cascade.spec.output_size,
                 "stride": cascade.spec.stride},
        "mr_norm_mode": cascade.mr_norm_mode,
        "ct_norm": {"mode": cascade.ct_norm.mode,
                    "offset": cascade.ct_norm.offset,
                    "scale": cascade.ct_norm.scale},
    }
    with open(os.path.join(dir_path, "cascade.meta"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_cascade(dir_path) -> Cascade:
    meta_path = os.path.join(dir_path, "cascade.meta")
    if not os.path.exists(meta_path):
        raise CascadeError(f"no cascade.meta in {dir_path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    stages = []
    for k in range(meta["n_stages"]):
        net = networks.load_network(os.path.join(dir_path, f"stage_{k}.ckpt"),
                                    os.path.join(dir_path, f"stage_{k}.meta"))
        if not isinstance(net, GeneratorNet):
            raise CascadeError(f"stage_{k} is not a generator checkpoint")
        stages.append(net)
    return Cascade(stages, PatchSpec(**meta["spec"]),
                   NormParams(**meta["ct_norm"]), meta["mr_norm_mode"])
