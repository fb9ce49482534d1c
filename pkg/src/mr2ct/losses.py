"""Adversarial, reconstruction and gradient-difference losses.

Reduction convention (kept consistent across every term so the loss weights
retain their relative meaning): sum over voxels, mean over the minibatch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, scale, _accum

BCE_EPS = 1e-7


class LossError(Exception):
    pass


@dataclass
class LossWeights:
    """Weights for the adversarial, L2 and gradient-difference terms."""
    lambda1: float = 0.5
    lambda2: float = 1.0
    lambda3: float = 1.0

    def __post_init__(self):
        vals = (self.lambda1, self.lambda2, self.lambda3)
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise LossError(f"loss weights must be finite and >= 0, got {vals}")


def _batch_size(t: Tensor) -> int:
    return t.data.shape[0] if t.data.ndim >= 5 else 1


def bce(y_hat: Tensor, y) -> Tensor:
    """Binary cross-entropy, mean over the minibatch (first axis).

    Predictions are clamped into [eps, 1-eps] before the logarithms; clamped
    entries get zero gradient.
    """
    yd = np.asarray(y, dtype=y_hat.dtype)
    if not np.isin(yd, (0.0, 1.0)).all():
        raise LossError("bce labels must be 0 or 1")
    if yd.shape != y_hat.data.shape:
        raise LossError(f"bce: label shape {yd.shape} != prediction shape {y_hat.shape}")
    n = y_hat.data.shape[0] if y_hat.data.ndim >= 1 else 1
    yh = np.clip(y_hat.data, BCE_EPS, 1.0 - BCE_EPS)
    val = -(yd * np.log(yh) + (1.0 - yd) * np.log(1.0 - yh)).sum() / n
    out = Tensor(np.asarray(val, dtype=y_hat.dtype), y_hat.tape, (y_hat,))

    def bwd(g):
        inside = (y_hat.data == yh)
        gx = -(yd / yh - (1.0 - yd) / (1.0 - yh)) / n * inside
        _accum(y_hat, (g * gx).astype(y_hat.dtype, copy=False))

    out._backward = bwd
    return out


def discriminator_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """bce(d_real, 1) + bce(d_fake, 0): label 1 for real CT, 0 for generated."""
    real = bce(d_real, np.ones_like(d_real.data))
    fake = bce(d_fake, np.zeros_like(d_fake.data))
    return add(real, fake)


def l2_loss(y_hat: Tensor, y) -> Tensor:
    """Summed squared error, divided by batch size."""
    yd = np.asarray(y, dtype=y_hat.dtype)
    if yd.shape != y_hat.data.shape:
        raise LossError(f"l2: shapes differ, {y_hat.shape} vs {yd.shape}")
    n = _batch_size(y_hat)
    diff = y_hat.data - yd
    out = Tensor(np.asarray((diff * diff).sum() / n, dtype=y_hat.dtype),
                 y_hat.tape, (y_hat,))
    out._backward = lambda g: _accum(y_hat, (g * 2.0 / n) * diff)
    return out


def _spatial_axes(ndim: int) -> tuple[int, ...]:
    if ndim < 3:
        raise LossError(f"gdl needs at least 3 spatial dims, got rank {ndim}")
    return tuple(range(ndim - 3, ndim))


def gdl(y_hat: Tensor, y) -> Tensor:
    """Gradient difference loss: per-axis forward differences, squared gap of
    their magnitudes, summed over all valid positions and divided by batch
    size."""
    yd = np.asarray(y, dtype=y_hat.dtype)
    if yd.shape != y_hat.data.shape:
        raise LossError(f"gdl: shapes differ, {y_hat.shape} vs {yd.shape}")
    axes = _spatial_axes(y_hat.data.ndim)
    if any(y_hat.data.shape[a] < 2 for a in axes):
        raise LossError(f"gdl: every spatial axis must have length >= 2, got {y_hat.shape}")
    n = _batch_size(y_hat)
    total = 0.0
    diffs = []
    for ax in axes:
        dh = np.diff(y_hat.data, axis=ax)
        dy = np.diff(yd, axis=ax)
        gap = np.abs(dy) - np.abs(dh)
        total += (gap * gap).sum()
        diffs.append((ax, dh, gap))
    out = Tensor(np.asarray(total / n, dtype=y_hat.dtype), y_hat.tape, (y_hat,))

    def bwd(g):
        gx = np.zeros_like(y_hat.data)
        for ax, dh, gap in diffs:
            # d/d(dh) of (|dy| - |dh|)^2 = -2 * gap * sign(dh)
            v = (-2.0 / n) * gap * np.sign(dh)
            sl_hi = [slice(None)] * y_hat.data.ndim
            sl_lo = [slice(None)] * y_hat.data.ndim
            sl_hi[ax] = slice(1, None)
            sl_lo[ax] = slice(None, -1)
            gx[tuple(sl_hi)] += v
            gx[tuple(sl_lo)] -= v
        _accum(y_hat, (g * gx).astype(y_hat.dtype, copy=False))

    out._backward = bwd
    return out


def generator_loss(d_fake: Tensor | None, y_hat: Tensor, y, w: LossWeights):
    """Weighted generator objective: adversarial + L2 + GDL.

    Zero-weight terms are left out of the differentiated total entirely, so
    e.g. lambda1 = 0 decouples the generator from the discriminator bitwise.
    Returns (total Tensor, {'adv', 'l2', 'gdl'} raw-term breakdown).
    """
    if w.lambda1 > 0 and d_fake is None:
        raise LossError("adversarial weight is nonzero but no discriminator output given")
    terms = []
    breakdown = {}
    if d_fake is not None:
        adv = bce(d_fake, np.ones_like(d_fake.data))
        breakdown["adv"] = float(adv.data)
        if w.lambda1 > 0:
            terms.append(scale(adv, w.lambda1))
    else:
        breakdown["adv"] = 0.0
    l2 = l2_loss(y_hat, y)
    breakdown["l2"] = float(l2.data)
    if w.lambda2 > 0:
        terms.append(scale(l2, w.lambda2))
    g = gdl(y_hat, y)
    breakdown["gdl"] = float(g.data)
    if w.lambda3 > 0:
        terms.append(scale(g, w.lambda3))
    if not terms:
        total = Tensor(np.zeros((), dtype=y_hat.dtype), y_hat.tape)
    else:
        total = terms[0]
        for t in terms[1:]:
            total = add(total, t)
    return total, breakdown
