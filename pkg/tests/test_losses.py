"""Loss values, gradients and algebraic identities.

Expected numbers were computed independently with mpmath at 40 digits.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from margin_lab.checks import finite_difference_grad, incorrect_gap
from margin_lab.losses import (
    LossConfig,
    MarginTable,
    batch_loss,
    ce_loss,
    compute_loss,
    compute_margin_table,
    elm_loss,
    elm_softplus,
    ldam_loss,
    ldam_softplus,
    lmsce_decompose,
)


def table(*deltas):
    return MarginTable(np.array(deltas, dtype=float), "literal", max(deltas) or 1.0)


def cfg(variant="elm", s=1.0, lam=0.0, margins=None, **kw):
    return LossConfig(variant=variant, s=s, lam=lam, margins=margins, **kw)


class TestMarginTable:
    def test_literal_fourth_roots(self):
        np.testing.assert_allclose(compute_margin_table([16, 81], 0.5, "literal").deltas, [0.25, 0.5 / 3], atol=1e-15)

    def test_normalized_fourth_roots(self):
        np.testing.assert_allclose(compute_margin_table([16, 81], 0.5).deltas, [0.5, 1 / 3], atol=1e-15)

    def test_normalized_large_ratio(self):
        t = compute_margin_table([5000, 50], 0.5)
        np.testing.assert_allclose(t.deltas, [0.15811388300841897, 0.5], atol=1e-15)
        assert t.mode == "normalized"

    @pytest.mark.parametrize("counts", [[0, 5], [-1, 5], [5], [3.5, 2]])
    def test_invalid_counts(self, counts):
        with pytest.raises(ValueError):
            compute_margin_table(counts)

    def test_invalid_M(self):
        with pytest.raises(ValueError):
            compute_margin_table([1, 2], M=0.0)

    def test_immutable(self):
        t = compute_margin_table([1, 2])
        with pytest.raises(ValueError):
            t.deltas[0] = 3.0

    @given(st.lists(st.integers(1, 10**6), min_size=2, max_size=50), st.floats(0.01, 5.0),
           st.sampled_from(["literal", "normalized"]))
    def test_monotone_and_max(self, counts, M, mode):
        t = compute_margin_table(counts, M, mode)
        n = np.array(counts)
        i, j = np.meshgrid(np.arange(len(n)), np.arange(len(n)))
        fewer = n[i] < n[j]
        assert np.all(t.deltas[i][fewer] > t.deltas[j][fewer])
        if mode == "normalized":
            assert abs(t.deltas.max() - M) <= 1e-12


class TestLossConfig:
    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            LossConfig(lam=-0.1)

    def test_bad_scale(self):
        with pytest.raises(ValueError):
            LossConfig(s=0.0)

    def test_bad_variant(self):
        with pytest.raises(ValueError):
            LossConfig(variant="focal")

    def test_missing_margins(self):
        with pytest.raises(ValueError, match="margin table"):
            ldam_loss([0.0, 1.0], 0, LossConfig(variant="ldam"))

    def test_margin_length(self):
        with pytest.raises(ValueError):
            elm_loss([0.0, 1.0, 2.0], 0, cfg(margins=table(0.1, 0.2)))


class TestCrossEntropy:
    def test_uniform_ten(self):
        assert ce_loss(np.zeros(10), 3).loss == pytest.approx(math.log(10), abs=1e-12)

    def test_two_class(self):
        assert ce_loss([1.0, 0.0], 0).loss == pytest.approx(0.3132616875182228, abs=1e-15)

    def test_gradient(self):
        g = ce_loss([2.0, 1.0, 0.0], 0).grad
        np.testing.assert_allclose(g, [-0.3347590442251781, 0.2447284710547977, 0.09003057317038046], atol=1e-15)

    def test_gradient_finite_difference(self):
        z = np.array([[2.0, 1.0, 0.0]])
        fd = finite_difference_grad(lambda zz, yy: ce_loss(zz, yy).loss, z, np.array([0]), 1e-5)
        np.testing.assert_allclose(ce_loss(z[0], 0).grad, fd[0], atol=1e-9)

    @pytest.mark.parametrize("y", [-1, 3])
    def test_label_range(self, y):
        with pytest.raises(ValueError):
            ce_loss([0.0, 1.0, 2.0], y)

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            ce_loss([0.0, float("nan")], 0)

    def test_batch_matches_single(self):
        z = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
        out = ce_loss(z, np.array([2, 0]))
        assert out.loss[1] == ce_loss(z[1], 0).loss


class TestLmsceDecompose:
    def test_three_class(self):
        # mpmath: log(e^2 + e + 1) - 2 = 0.4076059644443803
        out = lmsce_decompose([2.0, 1.0, 0.0], 0)
        assert out.c_star == 1
        assert out.rho_hat == pytest.approx(0.3132616875182228, abs=1e-15)
        assert out.loss == pytest.approx(0.4076059644443803, abs=1e-15)

    def test_single_nontarget(self):
        out = lmsce_decompose([0.0, 5.0], 0)
        assert (out.c_star, out.rho_hat) == (1, 0.0)
        assert out.loss == pytest.approx(5.006715348489118, abs=1e-14)

    @pytest.mark.parametrize("a", [-100.0, 0.0, 3.5, 500.0])
    def test_symmetric(self, a):
        out = lmsce_decompose([a, a, a], 0)
        assert out.rho_hat == pytest.approx(math.log(2), abs=1e-12)
        assert out.loss == pytest.approx(math.log(3), abs=1e-12)

    def test_tie_break_smallest_index(self):
        assert lmsce_decompose([0.0, 4.0, 4.0, 4.0], 0).c_star == 1
        assert lmsce_decompose([9.0, 4.0, 4.0], 1).c_star == 0

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            lmsce_decompose([1.0], 0)

    def test_gradient_matches_ce(self):
        z = np.array([0.3, -1.2, 2.2, 0.9])
        np.testing.assert_allclose(lmsce_decompose(z, 1).grad, ce_loss(z, 1).grad, atol=1e-14)


class TestLdam:
    def test_zero_margin_is_ce(self):
        z = np.array([0.4, -2.0, 1.1])
        a = ldam_loss(z, 2, cfg("ldam", margins=table(0.0, 0.0, 0.0)))
        b = ce_loss(z, 2)
        assert a.loss == b.loss
        np.testing.assert_array_equal(a.grad, b.grad)

    def test_unit_scale(self):
        # softplus(0.5)
        out = ldam_loss([0.0, 0.0], 0, cfg("ldam", margins=table(0.5, 0.2)))
        assert out.loss == pytest.approx(0.9740769841801067, abs=1e-15)

    def test_scale_two(self):
        # log(1 + e)
        out = ldam_loss([0.0, 0.0], 0, cfg("ldam", s=2.0, margins=table(0.5, 0.2)))
        assert out.loss == pytest.approx(1.3132616875182228, abs=1e-15)

    def test_softplus_form_diagnostics(self):
        out = ldam_softplus([0.0, 0.0], 0, cfg("ldam", margins=table(0.5, 0.2)))
        assert out.target_margin == 0.5
        assert out.rho_hat == 0.0
        assert out.loss == pytest.approx(0.9740769841801067, abs=1e-15)

    def test_softplus_symmetric(self):
        out = ldam_softplus([1.0, 1.0, 1.0], 0, cfg("ldam", margins=table(0.0, 0.3, 0.3)))
        assert out.rho_hat == pytest.approx(math.log(2), abs=1e-12)
        assert out.loss == pytest.approx(math.log(3), abs=1e-12)

    def test_gradient_is_scaled_softmax(self):
        z = np.array([0.2, 0.7, -0.4])
        c = cfg("ldam", s=30.0, margins=table(0.1, 0.3, 0.5))
        u = 30 * z
        u[1] = 30 * (z[1] - 0.3)
        p = np.exp(u - u.max())
        p /= p.sum()
        np.testing.assert_allclose(ldam_loss(z, 1, c).grad, 30 * (p - np.eye(3)[1]), atol=1e-12)

    def test_target_only_scaling(self):
        # u_y = s(z_y - Delta_y), u_k = z_k
        out = ldam_loss([0.0, 1.0], 0, cfg("ldam", s=2.0, margins=table(0.5, 0.2), scale_mode="target_only"))
        assert out.loss == pytest.approx(math.log(1 + math.exp(2.0)), abs=1e-12)
        assert ldam_softplus([0.0, 1.0], 0, cfg("ldam", s=2.0, margins=table(0.5, 0.2))).loss != pytest.approx(out.loss)


class TestElm:
    margins = table(0.4, 0.2)

    def test_example_value(self):
        out = elm_loss([0.0, 0.0], 0, cfg(lam=1.0, margins=self.margins))
        # u_y = -0.4 + 0.2 = -0.2, loss = log(1 + e^0.2)
        assert out.loss == pytest.approx(0.7981388693815918, abs=1e-15)
        assert out.c_star == 1

    def test_example_gradient(self):
        out = elm_loss([0.0, 0.0], 0, cfg(lam=1.0, margins=self.margins))
        np.testing.assert_allclose(out.grad, [-0.5498339973124779, 0.5498339973124779], atol=1e-15)
        z = np.zeros((1, 2))
        fd = finite_difference_grad(lambda zz, yy: elm_loss(zz, yy, cfg(lam=1.0, margins=self.margins)).loss,
                                    z, np.array([0]), 1e-5)
        np.testing.assert_allclose(out.grad, fd[0], atol=1e-9)

    def test_without_target_margin(self):
        c = cfg(lam=1.0, margins=self.margins, use_target_margin=False)
        assert elm_loss([0.0, 0.0], 0, c).loss == pytest.approx(0.5981388693815918, abs=1e-15)
        assert elm_softplus([0.0, 0.0], 0, c).loss == pytest.approx(0.5981388693815918, abs=1e-15)

    def test_effective_margin(self):
        out = elm_softplus([0.0, 0.0], 0, cfg(s=3.0, lam=0.5, margins=self.margins))
        assert out.target_margin == pytest.approx(3 * 0.4 - 3 * 0.5 * 0.2)

    def test_lambda_zero_is_ldam(self):
        z = np.array([1.0, -0.5, 0.25, 2.0])
        m = table(0.5, 0.4, 0.3, 0.1)
        a = elm_loss(z, 2, cfg("elm", s=10.0, lam=0.0, margins=m))
        b = ldam_loss(z, 2, cfg("ldam", s=10.0, margins=m))
        assert a.loss == b.loss

    def test_equal_margins_cancel(self):
        z = np.array([0.3, 1.5, -0.2])
        m = table(0.25, 0.25, 0.25)
        s = 7.0
        out = elm_softplus(z, 0, cfg(s=s, lam=1.0, margins=m))
        assert out.loss == pytest.approx(lmsce_decompose(s * z, 0).loss, abs=1e-12)

    def test_c_star_uses_smallest_index(self):
        m = table(0.5, 0.1, 0.3)
        out = elm_loss([0.0, 1.0, 1.0], 0, cfg(s=1.0, lam=1.0, margins=m))
        assert out.c_star == 1
        assert out.target_margin == pytest.approx(0.5 - 0.1)

    def test_lambda_not_increasing_loss(self):
        z = np.array([0.1, 0.8, 0.3, -0.4])
        m = compute_margin_table([500, 100, 20, 5])
        losses = [elm_loss(z, 3, cfg(s=30.0, lam=lam, margins=m)).loss for lam in (0.0, 0.1, 0.5, 1.0, 1.2)]
        assert all(b <= a for a, b in zip(losses, losses[1:]))


@st.composite
def loss_cases(draw):
    c = draw(st.integers(2, 12))
    z = np.array(draw(st.lists(st.floats(-8, 8), min_size=c, max_size=c)))
    y = draw(st.integers(0, c - 1))
    counts = draw(st.lists(st.integers(1, 5000), min_size=c, max_size=c))
    conf = LossConfig(
        variant=draw(st.sampled_from(["ce", "ldam", "elm"])),
        s=draw(st.sampled_from([1.0, 10.0, 30.0])),
        lam=draw(st.sampled_from([0.0, 0.1, 0.5, 1.0, 1.2])),
        use_target_margin=draw(st.booleans()),
        margins=compute_margin_table(counts, 0.5),
    )
    return z, y, conf


class TestProperties:
    @settings(max_examples=300)
    @given(loss_cases())
    def test_forms_agree(self, case):
        z, y, c = case
        assert abs(ldam_loss(z, y, c).loss - ldam_softplus(z, y, c).loss) <= 1e-9
        assert abs(elm_loss(z, y, c).loss - elm_softplus(z, y, c).loss) <= 1e-9
        assert abs(ce_loss(z, y).loss - lmsce_decompose(z, y).loss) <= 1e-10

    @settings(max_examples=300)
    @given(loss_cases())
    def test_gradients_sum_to_zero_and_positive(self, case):
        z, y, c = case
        for fn in (ldam_loss, ldam_softplus, elm_loss, elm_softplus):
            out = fn(z, y, c)
            assert abs(out.grad.sum()) <= 1e-10
            assert out.loss > 0
        assert compute_loss(z, y, c).loss > 0

    @settings(max_examples=100)
    @given(loss_cases())
    def test_softplus_gradient_matches_ce_form(self, case):
        z, y, c = case
        if incorrect_gap(z[None], np.array([y]))[0] <= 1e-3:
            return
        np.testing.assert_allclose(elm_loss(z, y, c).grad, elm_softplus(z, y, c).grad, atol=1e-9)


class TestBatchLoss:
    def test_uniform_is_mean(self):
        z = np.array([[0.0, 1.0], [2.0, 0.0], [0.5, 0.5]])
        y = np.array([0, 0, 1])
        c = LossConfig("ce", s=1.0)
        per = [ce_loss(z[i], y[i]).loss for i in range(3)]
        assert batch_loss(z, y, np.ones(3), c).loss == pytest.approx(np.mean(per), abs=1e-15)

    def test_selection(self):
        z = np.array([[0.0, 1.0], [2.0, 0.0]])
        c = LossConfig("ce", s=1.0)
        out = batch_loss(z, np.array([0, 1]), np.array([0.0, 1.0]), c)
        assert out.loss == ce_loss(z[1], 1).loss
        np.testing.assert_array_equal(out.grad[0], 0.0)

    def test_weighted_mean(self):
        # two samples whose CE losses are 2 and 4: z_c - z_y chosen so log(1+e^d) hits them
        d = [math.log(math.e**2 - 1), math.log(math.e**4 - 1)]
        z = np.array([[0.0, d[0]], [0.0, d[1]]])
        out = batch_loss(z, np.array([0, 0]), np.array([1.0, 3.0]), LossConfig("ce", s=1.0))
        assert out.loss == pytest.approx(3.5, abs=1e-12)

    def test_gradient_scaling(self):
        z = np.array([[0.0, 1.0], [2.0, 0.0]])
        c = LossConfig("ce", s=1.0)
        out = batch_loss(z, np.array([0, 1]), np.array([1.0, 3.0]), c)
        np.testing.assert_allclose(out.grad[1], 0.75 * ce_loss(z[1], 1).grad)

    def test_errors(self):
        c = LossConfig("ce")
        with pytest.raises(ValueError):
            batch_loss(np.zeros((2, 2)), [0, 1], [1.0], c)
        with pytest.raises(ValueError):
            batch_loss(np.zeros((2, 2)), [0, 1], [0.0, 0.0], c)
        with pytest.raises(ValueError):
            batch_loss(np.zeros((2, 2)), [0, 1], [1.0, -1.0], c)

    def test_ce_variant_applies_scale(self):
        z = np.array([0.1, 0.4])
        out = compute_loss(z, 0, LossConfig("ce", s=30.0))
        assert out.loss == pytest.approx(ce_loss(30 * z, 0).loss)
        np.testing.assert_allclose(out.grad, 30 * ce_loss(30 * z, 0).grad)
