"""Alternating adversarial training of one generator/discriminator pair.

Each iteration runs `d_steps_per_g_step` discriminator updates on fresh real
and fresh generated minibatches, then one generator update on another fresh
minibatch.  Exactly one network receives gradients per phase; the other is
frozen, and fakes for the D phase are produced in inference mode so the
generator's running batch-norm statistics stay untouched.

All per-iteration randomness is re-derived from (seed, iteration, phase), so
a run resumed from a checkpoint is bitwise identical to an uninterrupted one.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .losses import LossWeights, discriminator_loss, generator_loss
from .volume import PatchSpec, Volume, sample_patch_pairs


class TrainingError(Exception):
    pass


class NaNAbortError(TrainingError):
    """A loss term went non-finite; names the term and the iteration."""

    def __init__(self, term: str, iteration: int, value: float):
        self.term = term
        self.iteration = iteration
        self.value = value
        super().__init__(
            f"non-finite loss at iteration {iteration}: {term} = {value}")


@dataclass
class TrainConfig:
    lr: float = 1e-6
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 10
    iterations: int = 0
    d_steps_per_g_step: int = 1
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.batch_size <= 0 or self.d_steps_per_g_step <= 0 or self.checkpoint_every <= 0:
            raise TrainingError("batch_size, d_steps_per_g_step and checkpoint_every "
                                "must be positive")
        if self.iterations < 0:
            raise TrainingError("iterations must be >= 0")
        if self.lr <= 0 or not (0 <= self.beta1 < 1) or not (0 <= self.beta2 < 1):
            raise TrainingError("invalid optimizer hyperparameters")


@dataclass
class TrainLogRow:
    iteration: int
    d_loss: float
    g_adv: float
    g_l2: float
    g_gdl: float
    g_total: float
    d_real_mean: float
    d_fake_mean: float
    wall_ms: float


LOG_COLUMNS = [f.name for f in fields(TrainLogRow)]


def freeze(net) -> None:
    for p in net.parameters():
        p.frozen = True


def unfreeze(net) -> None:
    for p in net.parameters():
        p.frozen = False


def make_patch_sampler(subjects, spec: PatchSpec):
    """Build a minibatch sampler over a list of subjects.

    Each subject is (mr: Volume, ct: Volume, context: Volume | None).  The
    returned callable maps (count, rng) to a pair of float32 batches
    x [count, C, in^3] and y [count, 1, out^3], drawing the subject and the
    patch center from `rng`.
    """
    if not subjects:
        raise TrainingError("patch sampler needs at least one subject")
    n_channels = 1 if subjects[0][2] is None else 2

    def sample(count: int, rng) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.integers(0, len(subjects), size=count)
        xs = np.empty((count, n_channels) + (spec.input_size,) * 3, dtype=np.float32)
        ys = np.empty((count, 1) + (spec.output_size,) * 3, dtype=np.float32)
        for row, si in enumerate(idx):
            mr, ct, ctx = subjects[si]
            (pair,) = sample_patch_pairs(mr, ct, spec, 1, rng, context=ctx)
            xs[row] = pair.mr_patch
            ys[row, 0] = pair.ct_patch
        return xs, ys

    return sample


def _check_finite(terms: dict[str, float], iteration: int) -> None:
    for name, value in terms.items():
        if not np.isfinite(value):
            raise NaNAbortError(name, iteration, value)


# --- checkpointing of the full training state ------------------------------

def _optimizer_arrays(net, prefix: str) -> dict[str, np.ndarray]:
    arrays = {}
    for p in net.parameters():
        arrays[f"{prefix}{p.name}.adam_m"] = p.m
        arrays[f"{prefix}{p.name}.adam_v"] = p.v
        arrays[f"{prefix}{p.name}.adam_t"] = np.array([p.t], dtype=np.float32)
    return arrays


def _restore_optimizer(net, prefix: str, arrays) -> None:
    for p in net.parameters():
        p.m = arrays[f"{prefix}{p.name}.adam_m"].astype(p.data.dtype)
        p.v = arrays[f"{prefix}{p.name}.adam_v"].astype(p.data.dtype)
        p.t = int(arrays[f"{prefix}{p.name}.adam_t"][0])


def save_train_state(path, gen, disc, iteration: int) -> None:
    arrays = {"iteration": np.array([iteration], dtype=np.float32)}
    for prefix, net in (("gen.", gen), ("disc.", disc)):
        for name, arr in net.named_arrays().items():
            arrays[prefix + name] = arr
        arrays.update(_optimizer_arrays(net, prefix))
    ad.save_checkpoint(path, arrays)


def load_train_state(path, gen, disc) -> int:
    """Restore networks and optimizer state in place; returns the iteration."""
    from .networks import load_arrays_into

    arrays = ad.load_checkpoint(path)
    for prefix, net in (("gen.", gen), ("disc.", disc)):
        scoped = {name[len(prefix):]: arr for name, arr in arrays.items()
                  if name.startswith(prefix)}
        load_arrays_into(net, scoped)
        _restore_optimizer(net, "", scoped)
    return int(arrays["iteration"][0])


class _LogWriter:
    """Appends TrainLogRows to a CSV, flushing after every row."""

    def __init__(self, path, append: bool):
        self.fh = None
        if path is not None:
            exists = append and os.path.exists(path)
            self.fh = open(path, "a" if append else "w", newline="")
            self.writer = csv.writer(self.fh)
            if not exists or os.path.getsize(path) == 0:
                self.writer.writerow(LOG_COLUMNS)
                self.fh.flush()

    def write(self, row: TrainLogRow) -> None:
        if self.fh is not None:
            self.writer.writerow([getattr(row, c) for c in LOG_COLUMNS])
            self.fh.flush()

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()


def train_stage(gen, disc, data, cfg: TrainConfig, log_path=None,
                checkpoint_path=None, resume: bool = True) -> list[TrainLogRow]:
    """Run the alternating GAN loop for cfg.iterations; mutates both nets.

    `data` is a sampler as returned by make_patch_sampler.  If
    `checkpoint_path` exists and `resume` is set, training continues from the
    stored iteration; the result is bitwise identical to a single run.
    """
    start = 0
    if checkpoint_path is not None and resume and os.path.exists(checkpoint_path):
        start = load_train_state(checkpoint_path, gen, disc)
    log = _LogWriter(log_path, append=start > 0)
    rows: list[TrainLogRow] = []
    w = cfg.loss_weights
    try:
        for it in range(start, cfg.iterations):
            t0 = time.perf_counter()
            iteration = it + 1

            # --- discriminator phase ---
            freeze(gen)
            unfreeze(disc)
            d_loss_val = d_real_mean = d_fake_mean = float("nan")
            for sub in range(cfg.d_steps_per_g_step):
                rng = np.random.default_rng([cfg.seed, it, 0, sub])
                _, real_ct = data(cfg.batch_size, rng)
                fake_mr, _ = data(cfg.batch_size, rng)
                fake_tape = Tape()
                fake_ct = gen.forward(Tensor(fake_mr, fake_tape), "infer").data
                fake_tape.release()
                tape = Tape()
                d_real = disc.forward(Tensor(real_ct, tape), "train")
                d_fake = disc.forward(Tensor(fake_ct, tape), "train")
                d_loss = discriminator_loss(d_real, d_fake)
                d_loss_val = float(d_loss.data)
                d_real_mean = float(d_real.data.mean())
                d_fake_mean = float(d_fake.data.mean())
                _check_finite({"d_loss": d_loss_val}, iteration)
                ad.backward(tape, d_loss)
                ad.adam_step(disc.parameters(), cfg.lr, cfg.beta1, cfg.beta2)
                tape.release()

            # --- generator phase ---
            freeze(disc)
            unfreeze(gen)
            rng = np.random.default_rng([cfg.seed, it, 1])
            mr, ct = data(cfg.batch_size, rng)
            tape = Tape()
            y_hat = gen.forward(Tensor(mr, tape), "train")
            d_out = disc.forward(y_hat, "infer") if w.lambda1 > 0 else None
            g_total, parts = generator_loss(d_out, y_hat, ct, w)
            g_total_val = float(g_total.data)
            _check_finite({"g_adv": parts["adv"], "g_l2": parts["l2"],
                           "g_gdl": parts["gdl"], "g_total": g_total_val}, iteration)
            ad.backward(tape, g_total)
            ad.adam_step(gen.parameters(), cfg.lr, cfg.beta1, cfg.beta2)
            tape.release()
            unfreeze(disc)

            row = TrainLogRow(iteration, d_loss_val, parts["adv"], parts["l2"],
                              parts["gdl"], g_total_val, d_real_mean, d_fake_mean,
                              (time.perf_counter() - t0) * 1e3)
            rows.append(row)
            log.write(row)

            if checkpoint_path is not None and (
                    iteration % cfg.checkpoint_every == 0 or iteration == cfg.iterations):
                save_train_state(checkpoint_path, gen, disc, iteration)
    finally:
        log.close()
    return rows


def read_log(path) -> list[TrainLogRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [TrainLogRow(**{c: (int(float(r[c])) if c == "iteration" else float(r[c]))
                               for c in LOG_COLUMNS}) for r in reader]
