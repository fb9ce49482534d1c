"""Hand-derived loss values and structural loss properties."""

import math

import numpy as np
import pytest

from mr2ct import autodiff as ad
from mr2ct.autodiff import Tape, Tensor
from mr2ct.losses import (BCE_EPS, LossError, LossWeights, bce,
                          discriminator_loss, gdl, generator_loss, l2_loss)


def _t(data):
    return Tensor(np.asarray(data, dtype=np.float64), Tape())


class TestLossWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.lambda1, w.lambda2, w.lambda3) == (0.5, 1.0, 1.0)

    def test_negative_rejected(self):
        with pytest.raises(LossError):
            LossWeights(-0.1, 1, 1)

    def test_nan_rejected(self):
        with pytest.raises(LossError):
            LossWeights(float("nan"), 1, 1)


class TestBce:
    def test_perfect_prediction(self):
        assert float(bce(_t([1.0]), [1.0]).data) <= 1e-6

    def test_half_half(self):
        val = float(bce(_t([0.5, 0.5]), [0.0, 1.0]).data)
        assert val == pytest.approx(math.log(2), abs=1e-6)

    def test_bad_label(self):
        with pytest.raises(LossError):
            bce(_t([0.5]), [0.3])

    def test_monotone_toward_label(self):
        worse = float(bce(_t([0.4]), [1.0]).data)
        better = float(bce(_t([0.6]), [1.0]).data)
        assert better < worse

    def test_clamped_entries_get_zero_grad(self):
        tape = Tape()
        y_hat = Tensor(np.array([0.0, 0.5]), tape)
        ad.backward(tape, bce(y_hat, [0.0, 0.0]))
        assert y_hat.grad[0] == 0.0 and y_hat.grad[1] != 0.0


class TestDiscriminatorLoss:
    def test_perfect(self):
        val = float(discriminator_loss(_t([1.0]), _t([0.0])).data)
        assert val <= 1e-6

    def test_half(self):
        val = float(discriminator_loss(_t([0.5]), _t([0.5])).data)
        assert val == pytest.approx(2 * math.log(2), abs=1e-6)

    def test_worst_case_clamped(self):
        val = float(discriminator_loss(_t([0.0]), _t([1.0])).data)
        assert val == pytest.approx(-2 * math.log(BCE_EPS), rel=1e-3)


class TestGdl:
    def test_identical_volumes(self, rng):
        y = rng.normal(size=(4, 4, 4))
        assert float(gdl(_t(y), y).data) == 0.0

    def test_two_constants(self):
        y_hat = np.full((3, 3, 3), 4.0)
        y = np.full((3, 3, 3), -2.0)
        assert float(gdl(_t(y_hat), y).data) == 0.0

    def test_ramp_case(self):
        y = np.zeros((2, 2, 2))
        y[1, :, :] = 1.0   # x-gradient 1 everywhere
        val = float(gdl(_t(np.zeros((2, 2, 2))), y).data)
        assert val == pytest.approx(4.0, abs=1e-6)

    def test_negation_invariance(self, rng):
        y = rng.normal(size=(4, 4, 4))
        y_hat = rng.normal(size=(4, 4, 4))
        a = float(gdl(_t(y_hat), y).data)
        b = float(gdl(_t(-y_hat), -y).data)
        assert a == pytest.approx(b, rel=1e-12)

    def test_short_axis_rejected(self):
        with pytest.raises(LossError):
            gdl(_t(np.zeros((1, 4, 4))), np.zeros((1, 4, 4)))

    def test_batch_division(self, rng):
        y = rng.normal(size=(4, 4, 4))
        y_hat = rng.normal(size=(4, 4, 4))
        single = float(gdl(_t(y_hat), y).data)
        batch2 = float(gdl(_t(np.stack([y_hat, y_hat])[:, None]),
                           np.stack([y, y])[:, None]).data)
        assert batch2 == pytest.approx(single, rel=1e-6)


class TestGeneratorLoss:
    def test_perfect_everything(self, rng):
        y = rng.normal(size=(2, 1, 3, 3, 3))
        total, parts = generator_loss(_t([1.0, 1.0]), _t(y), y, LossWeights())
        assert float(total.data) <= 1e-6
        assert parts["l2"] == 0.0 and parts["gdl"] == 0.0

    def test_l2_hand_value(self):
        y = np.zeros((2, 2, 2))
        y_hat = y + 0.5
        total, parts = generator_loss(None, _t(y_hat), y, LossWeights(0, 1, 0))
        assert float(total.data) == pytest.approx(2.0, abs=1e-9)
        assert parts["l2"] == pytest.approx(2.0)

    def test_weights_010_equals_l2(self, rng):
        y = rng.normal(size=(2, 1, 3, 3, 3))
        y_hat = y + rng.normal(size=y.shape)
        total, _ = generator_loss(None, _t(y_hat), y, LossWeights(0, 1, 0))
        assert float(total.data) == float(l2_loss(_t(y_hat), y).data)

    def test_weights_001_equals_gdl(self, rng):
        y = rng.normal(size=(2, 1, 3, 3, 3))
        y_hat = y + rng.normal(size=y.shape)
        total, _ = generator_loss(None, _t(y_hat), y, LossWeights(0, 0, 1))
        assert float(total.data) == float(gdl(_t(y_hat), y).data)

    def test_lambda1_zero_bitwise_independent_of_d(self, rng):
        y = rng.normal(size=(2, 1, 3, 3, 3))
        y_hat_data = y + rng.normal(size=y.shape)
        grads = []
        for d_out in (None, [0.3, 0.8]):
            tape = Tape()
            y_hat = Tensor(y_hat_data.copy(), tape)
            d_fake = _t(d_out) if d_out is not None else None
            if d_fake is not None:
                d_fake.tape = tape
            total, _ = generator_loss(d_fake, y_hat, y, LossWeights(0, 1, 1))
            ad.backward(tape, total)
            grads.append(y_hat.grad.copy())
        np.testing.assert_array_equal(grads[0], grads[1])

    def test_missing_d_fake_with_positive_weight(self, rng):
        y = rng.normal(size=(2, 2, 2))
        with pytest.raises(LossError):
            generator_loss(None, _t(y), y, LossWeights(0.5, 1, 1))

    def test_nonnegative(self, rng):
        y = rng.normal(size=(2, 1, 3, 3, 3))
        y_hat = y + rng.normal(size=y.shape)
        total, _ = generator_loss(_t([0.4, 0.6]), _t(y_hat), y, LossWeights())
        assert float(total.data) >= 0.0
