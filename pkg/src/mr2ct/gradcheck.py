"""Finite-difference verification suite covering every differentiable
operator, the losses, and an end-to-end tiny-plan generator objective.

All checks run in float64; 32-bit arithmetic is too noisy for central
differences at h ~ 1e-4.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Tape, Tensor
from .losses import LossWeights, bce, gdl, generator_loss
from .networks import build_discriminator, build_generator

COMPOSITE_TOL = 1e-3
DEFAULT_TOL = 1e-4


def _merge(reports: list[GradCheckReport], tol: float) -> GradCheckReport:
    return GradCheckReport(max(r.max_rel_err for r in reports),
                           sum(r.n_checked for r in reports), tol)


def _check_operands(build, operands: dict[str, np.ndarray], tol: float,
                    max_coords=None) -> GradCheckReport:
    """Gradient-check a scalar expression w.r.t. each named operand in turn.

    `build` maps a dict of Tensors (all on one tape) to a scalar Tensor.
    """
    reports = []
    for name in operands:
        def f(leaf, name=name):
            tensors = {name: leaf}
            for other, val in operands.items():
                if other != name:
                    tensors[other] = Tensor(val, leaf.tape)
            return build(tensors)

        reports.append(ad.grad_check(f, operands[name], tol=tol,
                                     max_coords=max_coords))
    return _merge(reports, tol)


def _rng(seed=0):
    return np.random.default_rng(seed)


def check_conv3d(tol=DEFAULT_TOL) -> GradCheckReport:
    r = _rng(1)
    ops = {"x": r.normal(size=(2, 6, 6, 6)),
           "w": r.normal(size=(4, 2, 3, 3, 3)) * 0.5,
           "b": r.normal(size=4)}

    def build(t):
        return ad.tensor_sum(ad.conv3d(t["x"], t["w"], t["b"], padding="valid"))

    valid = _check_operands(build, ops, tol)

    def build_same(t):
        return ad.tensor_sum(ad.conv3d(t["x"], t["w"], t["b"], padding="same"))

    return _merge([valid, _check_operands(build_same, ops, tol)], tol)


def check_batchnorm3d(tol=DEFAULT_TOL) -> GradCheckReport:
    r = _rng(2)
    ops = {"x": r.normal(size=(2, 3, 4, 4, 4)),
           "gamma": r.normal(size=3) + 1.5,
           "beta": r.normal(size=3)}

    def build(t):
        stats = ad.RunningStats.fresh(3, dtype=np.float64)
        return ad.tensor_sum(ad.relu(
            ad.batchnorm3d(t["x"], t["gamma"], t["beta"], "train", stats)))

    return _check_operands(build, ops, tol)


def check_relu(tol=DEFAULT_TOL) -> GradCheckReport:
    r = _rng(3)
    x = r.normal(size=(40,))
    x = np.where(np.abs(x) < 1e-2, x + 0.5, x)  # keep away from the kink
    return ad.grad_check(lambda t: ad.tensor_sum(ad.relu(t)), x, tol=tol)


def check_sigmoid(tol=DEFAULT_TOL) -> GradCheckReport:
    return ad.grad_check(lambda t: ad.tensor_sum(ad.sigmoid(t)),
                         _rng(4).normal(size=(40,)), tol=tol)


def check_maxpool3d(tol=DEFAULT_TOL) -> GradCheckReport:
    x = _rng(5).normal(size=(2, 4, 4, 4))
    return ad.grad_check(lambda t: ad.tensor_sum(ad.maxpool3d(t)), x, tol=tol)


def check_dense(tol=DEFAULT_TOL) -> GradCheckReport:
    r = _rng(6)
    ops = {"x": r.normal(size=(3, 7)), "w": r.normal(size=(5, 7)),
           "b": r.normal(size=5)}

    def build(t):
        return ad.tensor_sum(ad.dense(t["x"], t["w"], t["b"]))

    return _check_operands(build, ops, tol)


def check_bce(tol=DEFAULT_TOL) -> GradCheckReport:
    p = _rng(7).uniform(0.05, 0.95, size=(6, 1))
    labels = np.array([[0], [1], [1], [0], [1], [0]], dtype=np.float64)
    return ad.grad_check(lambda t: bce(t, labels), p, tol=tol)


def check_gdl(tol=DEFAULT_TOL) -> GradCheckReport:
    r = _rng(8)
    y = r.normal(size=(2, 1, 4, 4, 4))
    y_hat = y + r.normal(size=y.shape)  # generic point: no zero differences
    return ad.grad_check(lambda t: gdl(t, y), y_hat, tol=tol)


def check_generator_loss(tol=DEFAULT_TOL) -> GradCheckReport:
    r = _rng(9)
    y = r.normal(size=(2, 1, 4, 4, 4))
    ops = {"y_hat": y + 0.3 * r.normal(size=y.shape),
           "d_fake": r.uniform(0.1, 0.9, size=(2, 1))}

    def build(t):
        total, _ = generator_loss(t["d_fake"], t["y_hat"], y, LossWeights())
        return total

    return _check_operands(build, ops, tol)


def check_composite(tol=COMPOSITE_TOL, coords_per_param: int = 4,
                    seed: int = 0) -> GradCheckReport:
    """End-to-end Eq.-7-style objective: tiny-plan generator + full
    discriminator, differentiated w.r.t. every parameter of both networks
    (subsampled coordinates)."""
    gen = build_generator(1, [2, 2], seed=11)
    disc = build_discriminator(seed=12)
    params = gen.parameters() + disc.parameters()
    for p in params:
        p.data = p.data.astype(np.float64)
    r = _rng(10)
    size = 16 + gen.shrink
    mr = r.normal(size=(2, 1, size, size, size))
    ct = r.uniform(0.0, 1.0, size=(2, 1, 16, 16, 16))
    w = LossWeights()

    def loss() -> float | Tensor:
        tape = Tape()
        y_hat = gen.forward(Tensor(mr, tape), "train")
        d_fake = disc.forward(y_hat, "train")
        total, _ = generator_loss(d_fake, y_hat, ct, w)
        return total

    total = loss()
    ad.backward(total.tape, total)
    grads = {p.name: p.grad.copy() for p in params}
    for p in params:
        p.grad = None

    rng = np.random.default_rng(seed)
    max_err, n_checked = 0.0, 0
    for p in params:
        flat = p.data.ravel()
        k = min(coords_per_param, flat.size)
        for i in rng.choice(flat.size, size=k, replace=False):
            # A deep relu/maxpool composition crosses activation kinks within
            # +-1e-4 of many points; a smaller step keeps the difference
            # quotient on one linear piece while float64 still has headroom.
            h = 1e-6 * max(1.0, abs(flat[i]))
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss().data)
            flat[i] = orig - h
            fm = float(loss().data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            an = grads[p.name].ravel()[i]
            err = abs(num - an) / max(1.0, abs(num), abs(an))
            max_err = max(max_err, err)
            n_checked += 1
    return GradCheckReport(max_err, n_checked, tol)


SUITE = [
    ("conv3d", check_conv3d),
    ("batchnorm3d", check_batchnorm3d),
    ("relu", check_relu),
    ("sigmoid", check_sigmoid),
    ("maxpool3d", check_maxpool3d),
    ("dense", check_dense),
    ("bce", check_bce),
    ("gdl", check_gdl),
    ("generator_loss", check_generator_loss),
    ("composite_eq7", check_composite),
]


def run_suite() -> list[tuple[str, GradCheckReport]]:
    return [(name, fn()) for name, fn in SUITE]
