"""Command-line entry point: phantom / train / infer / eval / gradcheck.

Configuration is a flat `key = value` file; command-line flags override file
values, which override the documented defaults.  Every run directory receives
an echo of the effective configuration.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import metrics as met
from .autocontext import (CascadeError, infer_cascade, load_cascade,
                          train_cascade)
from .autodiff import AutodiffError
from .gradcheck import run_suite
from .losses import LossError, LossWeights
from .metrics import MetricsError
from .networks import NetworkError
from .phantom import (PhantomConfig, PhantomError, generate_dataset,
                      read_manifest, write_dataset)
from .training import NaNAbortError, TrainConfig, TrainingError, read_log
from .volume import PatchSpec, Volume, VolumeError, load_volume, save_volume

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


# --- configuration ----------------------------------------------------------

def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).split(","))


#: key -> (default, parser); the single flat schema shared by all commands.
CONFIG_SCHEMA = {
    "seed": (0, int),
    "iterations": (2000, int),
    "lr": (1e-6, float),
    "beta1": (0.5, float),
    "beta2": (0.999, float),
    "batch_size": (10, int),
    "d_steps_per_g_step": (1, int),
    "checkpoint_every": (500, int),
    "lambda1": (0.5, float),
    "lambda2": (1.0, float),
    "lambda3": (1.0, float),
    "input_size": (32, int),
    "output_size": (16, int),
    "stride": (8, int),
    "channel_plan": ((32, 32, 32, 64, 64, 64, 32, 32), _int_list),
    "n_stages": (2, int),
    "n_subjects": (4, int),
    "dims": ((48, 48, 48), _int_list),
    "n_ellipsoids": (6, int),
    "texture_amplitude": (0.2, float),
    "noise_sigma": (0.01, float),
}


def load_config_file(path) -> dict:
    values = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in CONFIG_SCHEMA:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = CONFIG_SCHEMA[key][1](value)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def effective_config(args) -> dict:
    """defaults < config file < command-line flags."""
    cfg = {key: default for key, (default, _) in CONFIG_SCHEMA.items()}
    if getattr(args, "config", None):
        cfg.update(load_config_file(args.config))
    for key in CONFIG_SCHEMA:
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            cfg[key] = flag_val
    return cfg


def write_config_echo(out_dir, cfg: dict) -> None:
    with open(os.path.join(out_dir, "effective_config.txt"), "w") as fh:
        for key in sorted(cfg):
            value = cfg[key]
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            fh.write(f"{key} = {value}\n")


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        lr=cfg["lr"], beta1=cfg["beta1"], beta2=cfg["beta2"],
        batch_size=cfg["batch_size"], iterations=cfg["iterations"],
        d_steps_per_g_step=cfg["d_steps_per_g_step"], seed=cfg["seed"],
        loss_weights=LossWeights(cfg["lambda1"], cfg["lambda2"], cfg["lambda3"]),
        checkpoint_every=cfg["checkpoint_every"])


def _patch_spec(cfg: dict) -> PatchSpec:
    return PatchSpec(cfg["input_size"], cfg["output_size"], cfg["stride"])


# --- small output helpers ---------------------------------------------------

def write_pgm(path, slice2d: np.ndarray) -> None:
    """8-bit binary PGM of a 2D array, min-max scaled."""
    a = np.asarray(slice2d, dtype=np.float64)
    lo, hi = a.min(), a.max()
    scaled = np.zeros_like(a) if hi == lo else (a - lo) / (hi - lo)
    pix = (scaled * 255).round().astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode())
        fh.write(pix.tobytes())


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_training_log(log_path, fig_path) -> None:
    rows = read_log(log_path)
    if not rows:
        return
    plt = _pyplot()
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    its = [r.iteration for r in rows]
    ax1.plot(its, [r.g_l2 for r in rows], label="g_l2")
    ax1.plot(its, [r.g_gdl for r in rows], label="g_gdl")
    ax1.plot(its, [r.g_total for r in rows], label="g_total")
    ax1.set_xlabel("iteration")
    ax1.set_yscale("log")
    ax1.legend()
    ax1.set_title("generator loss")
    ax2.plot(its, [r.d_loss for r in rows], label="d_loss")
    ax2.plot(its, [r.d_real_mean for r in rows], label="D(real)")
    ax2.plot(its, [r.d_fake_mean for r in rows], label="D(fake)")
    ax2.set_xlabel("iteration")
    ax2.legend()
    ax2.set_title("discriminator")
    fig.tight_layout()
    fig.savefig(fig_path, dpi=110)
    plt.close(fig)


def plot_eval_figure(fig_path, truth: Volume, estimate: Volume, mask) -> None:
    plt = _pyplot()
    z = truth.dims[2] // 2
    panels = [("truth", truth.voxels[:, :, z]),
              ("estimate", estimate.voxels[:, :, z]),
              ("abs error", np.abs(estimate.voxels[:, :, z]
                                   - truth.voxels[:, :, z]) * mask[:, :, z])]
    fig, axes = plt.subplots(1, 3, figsize=(12, 4))
    for ax, (title, img) in zip(axes, panels):
        im = ax.imshow(img.T, origin="lower", cmap="gray")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(fig_path, dpi=110)
    plt.close(fig)


# --- subcommands -------------------------------------------------------------

def cmd_phantom(args) -> int:
    cfg = effective_config(args)
    pcfg = PhantomConfig(dims=cfg["dims"], n_ellipsoids=cfg["n_ellipsoids"],
                         texture_amplitude=cfg["texture_amplitude"],
                         noise_sigma=cfg["noise_sigma"], seed=cfg["seed"])
    ds = generate_dataset(pcfg, cfg["n_subjects"])
    os.makedirs(args.out_dir, exist_ok=True)
    write_dataset(args.out_dir, ds)
    write_config_echo(args.out_dir, cfg)
    print(f"wrote {len(ds.pairs)} subjects ({len(ds.train_indices)} train / "
          f"{len(ds.test_indices)} test) to {args.out_dir}")
    return EXIT_OK


def _load_subjects(data_dir, indices):
    subjects = []
    for k in indices:
        mr = load_volume(os.path.join(data_dir, f"subj_{k}_mr.vol3"))
        ct = load_volume(os.path.join(data_dir, f"subj_{k}_ct.vol3"))
        subjects.append((mr, ct))
    return subjects


def cmd_train(args) -> int:
    cfg = effective_config(args)
    train_idx, _ = read_manifest(args.data_dir)
    subjects = _load_subjects(args.data_dir, train_idx)
    os.makedirs(args.out_dir, exist_ok=True)
    write_config_echo(args.out_dir, cfg)
    t0 = time.perf_counter()
    train_cascade(subjects, cfg["n_stages"], _train_config(cfg),
                  spec=_patch_spec(cfg), channel_plan=list(cfg["channel_plan"]),
                  out_dir=args.out_dir, resume=not args.no_resume)
    for k in range(cfg["n_stages"]):
        log_path = os.path.join(args.out_dir, f"stage_{k}_log.csv")
        if os.path.exists(log_path):
            plot_training_log(log_path, os.path.join(args.out_dir,
                                                     f"stage_{k}_loss.png"))
    print(f"trained {cfg['n_stages']} stage(s) on {len(subjects)} subject(s) "
          f"in {time.perf_counter() - t0:.1f}s -> {args.out_dir}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cascade = load_cascade(args.cascade_dir)
    mr = load_volume(args.mr)
    estimate, mask = infer_cascade(cascade, mr)
    save_volume(args.out, estimate)
    if args.mask_out:
        save_volume(args.mask_out, Volume(mask.astype(np.float32), mr.spacing))
    if args.slices_dir:
        os.makedirs(args.slices_dir, exist_ok=True)
        z = mr.dims[2] // 2
        write_pgm(os.path.join(args.slices_dir, "mr_axial.pgm"), mr.voxels[:, :, z].T)
        write_pgm(os.path.join(args.slices_dir, "estimate_axial.pgm"),
                  estimate.voxels[:, :, z].T)
    coverage = float(mask.mean())
    print(f"coverage fraction: {coverage:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    estimate = load_volume(args.estimate)
    truth = load_volume(args.truth)
    if args.mask:
        mask = load_volume(args.mask).voxels > 0.5
    else:
        mask = np.ones(truth.dims, dtype=bool)
    report = met.evaluate(os.path.basename(args.estimate), estimate, truth, mask)
    summary = met.aggregate([report])
    out_dir = args.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    met.write_report_csv(os.path.join(out_dir, "report.csv"), [report], summary)
    plot_eval_figure(os.path.join(out_dir, "report.png"), truth, estimate, mask)
    print(met.format_table([report], summary))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    failed = False
    for name, rep in run_suite():
        status = "ok" if rep.passed else "FAIL"
        print(f"{name:16s} max_rel_err {rep.max_rel_err:.3e} "
              f"({rep.n_checked} coords, tol {rep.tol:g}) {status}")
        failed = failed or not rep.passed
    print(f"total {time.perf_counter() - t0:.1f}s")
    return EXIT_NUMERIC if failed else EXIT_OK


# --- parser -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser, keys) -> None:
    p.add_argument("--config", help="key = value config file")
    for key in keys:
        _, parse = CONFIG_SCHEMA[key]
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=parse,
                       default=None, help=f"override config key {key}")


TRAIN_KEYS = ["seed", "iterations", "lr", "beta1", "beta2", "batch_size",
              "d_steps_per_g_step", "checkpoint_every", "lambda1", "lambda2",
              "lambda3", "input_size", "output_size", "stride", "channel_plan",
              "n_stages"]
PHANTOM_KEYS = ["seed", "n_subjects", "dims", "n_ellipsoids",
                "texture_amplitude", "noise_sigma"]


def build_parser() -> _Parser:
    parser = _Parser(prog="mr2ct",
                     description="Patch-based 3D adversarial MR-to-CT synthesis")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic paired dataset")
    p.add_argument("--out-dir", required=True)
    _add_config_flags(p, PHANTOM_KEYS)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train an auto-context cascade")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-resume", action="store_true",
                   help="ignore existing training-state checkpoints")
    _add_config_flags(p, TRAIN_KEYS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="tiled cascade inference on one MR volume")
    p.add_argument("--cascade-dir", required=True)
    p.add_argument("--mr", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-out")
    p.add_argument("--slices-dir", help="write mid-axial PGM slices here")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="MAE/PSNR report for an estimate")
    p.add_argument("--estimate", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--mask")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference operator verification")
    p.set_defaults(func=cmd_gradcheck)
    return parser


DATA_ERRORS = (VolumeError, PhantomError, CascadeError, MetricsError,
               NetworkError, AutodiffError, LossError, TrainingError, OSError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NaNAbortError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
