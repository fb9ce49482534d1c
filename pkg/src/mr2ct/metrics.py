"""MAE / PSNR evaluation restricted to covered voxels, plus table-style
aggregation (mean, sample std, median) over subjects."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .volume import Volume

#: Reported for PSNR when the estimate equals the truth exactly (MSE = 0).
PSNR_IDENTICAL = math.inf


class MetricsError(Exception):
    pass


class EmptyMaskError(MetricsError):
    pass


class DegenerateTruthError(MetricsError):
    pass


def _masked_pair(estimate: Volume, truth: Volume, mask) -> tuple[np.ndarray, np.ndarray]:
    if estimate.dims != truth.dims:
        raise MetricsError(f"estimate dims {estimate.dims} != truth dims {truth.dims}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != truth.dims:
        raise MetricsError(f"mask shape {mask.shape} != volume dims {truth.dims}")
    if not mask.any():
        raise EmptyMaskError("coverage mask selects no voxels")
    return (estimate.voxels[mask].astype(np.float64),
            truth.voxels[mask].astype(np.float64))


def mae(estimate: Volume, truth: Volume, mask) -> float:
    """Mean absolute error over masked voxels."""
    e, t = _masked_pair(estimate, truth, mask)
    return float(np.abs(e - t).mean())


def psnr(estimate: Volume, truth: Volume, mask) -> float:
    """10 log10(R^2 / MSE) with R the masked ground-truth dynamic range.

    Returns math.inf when the volumes agree exactly on the mask.
    """
    e, t = _masked_pair(estimate, truth, mask)
    peak = float(t.max() - t.min())
    if peak == 0.0:
        raise DegenerateTruthError("constant ground truth has zero dynamic range")
    mse = float(((e - t) ** 2).mean())
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(peak * peak / mse)


@dataclass
class EvalReport:
    subject: str
    mae: float
    psnr: float
    covered_voxel_count: int


def evaluate(subject: str, estimate: Volume, truth: Volume, mask) -> EvalReport:
    mask = np.asarray(mask, dtype=bool)
    return EvalReport(subject, mae(estimate, truth, mask),
                      psnr(estimate, truth, mask), int(mask.sum()))


@dataclass
class Summary:
    mean_mae: float
    std_mae: float
    median_mae: float
    mean_psnr: float
    std_psnr: float
    median_psnr: float
    n_subjects: int


def aggregate(rows: list[EvalReport]) -> Summary:
    """Mean, sample standard deviation and median per metric."""
    if not rows:
        raise MetricsError("cannot aggregate an empty report list")
    maes = np.array([r.mae for r in rows], dtype=np.float64)
    psnrs = np.array([r.psnr for r in rows], dtype=np.float64)

    def _std(v):
        return float(v.std(ddof=1)) if len(v) > 1 else 0.0

    return Summary(float(maes.mean()), _std(maes), float(np.median(maes)),
                   float(psnrs.mean()), _std(psnrs), float(np.median(psnrs)),
                   len(rows))


def write_report_csv(path, rows: list[EvalReport], summary: Summary) -> None:
    """Per-subject rows followed by mean/std/median summary rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "mae", "psnr", "covered_voxel_count"])
        for r in rows:
            writer.writerow([r.subject, repr(r.mae), repr(r.psnr),
                             r.covered_voxel_count])
        writer.writerow(["mean", repr(summary.mean_mae), repr(summary.mean_psnr), ""])
        writer.writerow(["std", repr(summary.std_mae), repr(summary.std_psnr), ""])
        writer.writerow(["median", repr(summary.median_mae), repr(summary.median_psnr), ""])


def format_table(rows: list[EvalReport], summary: Summary) -> str:
    """Human-readable table in the Mean(std.) / Med. layout."""
    lines = [f"{'subject':<12}{'MAE':>12}{'PSNR':>12}{'voxels':>12}"]
    for r in rows:
        lines.append(f"{r.subject:<12}{r.mae:>12.4f}{r.psnr:>12.4f}"
                     f"{r.covered_voxel_count:>12d}")
    lines.append("-" * 48)
    lines.append(f"{'Mean(std.)':<12}{summary.mean_mae:>7.2f}({summary.std_mae:.2f})"
                 f" {summary.mean_psnr:>6.2f}({summary.std_psnr:.2f})")
    lines.append(f"{'Med.':<12}{summary.median_mae:>12.4f}{summary.median_psnr:>12.4f}")
    return "\n".join(lines)
