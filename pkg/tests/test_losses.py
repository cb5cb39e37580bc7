import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from efc import losses
from efc.numerics import log_softmax
from helpers import composed_gradient_error, numeric_grad, rel_error


def test_ce_full_subset_is_plain_cross_entropy():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((4, 5))
    labels = np.array([0, 4, 2, 2])
    loss, _ = losses.ce_restricted(logits, labels, np.arange(5))
    expected = -np.mean(log_softmax(logits)[np.arange(4), labels])
    assert loss == pytest.approx(expected, abs=1e-14)


def test_ce_equal_logits_two_classes():
    loss, _ = losses.ce_restricted(np.zeros((3, 2)), np.array([0, 1, 1]), [0, 1])
    assert loss == pytest.approx(np.log(2), abs=1e-15)


def test_ce_subset_equals_slice():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((6, 5))
    subset = np.array([1, 3, 4])
    labels = np.array([3, 1, 4, 4, 3, 1])
    loss, grad = losses.ce_restricted(logits, labels, subset)
    sliced = logits[:, subset]
    pos = np.searchsorted(subset, labels)
    lp = log_softmax(sliced)
    assert loss == pytest.approx(-lp[np.arange(6), pos].mean(), abs=1e-14)
    assert not np.any(grad[:, [0, 2]])


def test_ce_label_outside_subset():
    with pytest.raises(ValueError):
        losses.ce_restricted(np.zeros((1, 4)), np.array([0]), [2, 3])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(-100, 100))
def test_ce_shift_invariant(seed, c):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((5, 4))
    labels = rng.integers(0, 4, 5)
    a, _ = losses.ce_restricted(logits, labels, np.arange(4))
    b, _ = losses.ce_restricted(logits + c, labels, np.arange(4))
    assert a == pytest.approx(b, abs=1e-12)


def test_efm_loss_zero_drift():
    f = np.random.default_rng(0).standard_normal((3, 4))
    loss, grad = losses.efm_loss(f, f.copy(), np.eye(4), 10.0, 0.1)
    assert loss == 0.0 and not np.any(grad)


def test_efm_loss_feature_distillation_parameterization():
    rng = np.random.default_rng(2)
    new, old = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    loss, _ = losses.efm_loss(new, old, rng.standard_normal((3, 3)) * 0 + np.eye(3), 0.0, 10.0)
    assert loss == pytest.approx(10 * np.mean(np.sum((new - old) ** 2, axis=1)), rel=1e-14)


def test_efm_loss_hand_value():
    a, b = 0.7, -1.3
    loss, _ = losses.efm_loss(np.array([[a, b]]), np.zeros((1, 2)), np.diag([1.0, 0.0]), 10.0, 0.1)
    assert loss == pytest.approx(10 * a**2 + 0.1 * (a**2 + b**2), rel=1e-14)


def test_efm_loss_shape_mismatch():
    with pytest.raises(ValueError):
        losses.efm_loss(np.zeros((2, 3)), np.zeros((3, 3)), np.eye(3), 1.0, 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(0, 5), st.floats(0, 5))
def test_efm_loss_nonnegative_and_zero_iff_no_drift(seed, lam, eta):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((4, 4))
    e = a @ a.T
    new, old = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    loss, _ = losses.efm_loss(new, old, e, lam, eta)
    assert loss >= -1e-12
    if eta > 1e-3:
        assert loss > 0


def test_efm_loss_gradient():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((4, 4))
    e, old = a @ a.T, rng.standard_normal((5, 4))
    new = rng.standard_normal((5, 4))
    _, grad = losses.efm_loss(new, old, e, 10.0, 0.1)
    num = numeric_grad(lambda: losses.efm_loss(new, old, e, 10.0, 0.1)[0], new)
    assert rel_error(grad, num) <= 1e-6


def test_sym_loss_zero_weight_and_first_task():
    rng = np.random.default_rng(4)
    f, w = rng.standard_normal((5, 3)), rng.standard_normal((3, 4))
    y = rng.integers(0, 4, 5)
    plain, _ = losses.ce_restricted(f @ w, y, np.arange(4))
    assert losses.sym_loss(f, y, rng.standard_normal((2, 3)), np.array([0, 1]), w, np.arange(4), 0.0).total == pytest.approx(plain)
    assert losses.sym_loss(f, y, None, None, w, np.arange(4)).total == pytest.approx(plain)


def test_pr_ace_preconditions():
    w = np.zeros((2, 2))
    with pytest.raises(ValueError):
        losses.pr_ace_loss(np.zeros((1, 2)), [1], None, None, np.zeros((0, 2)), [], w, [1], [0, 1])
    with pytest.raises(ValueError):
        losses.pr_ace_loss(np.zeros((1, 2)), [0], None, None, np.zeros((1, 2)), [0], w, [0, 1], [0, 1])


def test_pr_ace_hand_evaluated():
    # class 0 is old (prototype), class 1 is new
    w = np.array([[1.0, -1.0], [0.5, 2.0]])
    x = np.array([[0.3, 0.4]])
    x_hat = np.array([[-0.2, 1.0]])
    proto = np.array([[1.5, -0.5]])
    out = losses.pr_ace_loss(x, [1], x_hat, [1], proto, [0], w, [1], [0, 1])
    # first term: softmax over the single new column -> log 1 = 0
    assert out.ce_current == pytest.approx(0.0, abs=1e-15)
    zp, zh = proto @ w, x_hat @ w
    ce_p = -(zp[0, 0] - np.log(np.exp(zp[0]).sum()))
    ce_h = -(zh[0, 1] - np.log(np.exp(zh[0]).sum()))
    assert out.ce_all == pytest.approx((ce_p + ce_h) / 2, rel=1e-14)
    assert out.total == pytest.approx(out.ce_current + out.ce_all, abs=1e-15)


def test_pr_ace_first_term_ignores_old_columns():
    rng = np.random.default_rng(5)
    w = rng.standard_normal((3, 5))
    f = rng.standard_normal((4, 3))
    _, dlogits = losses.ce_restricted(f @ w, np.array([3, 4, 4, 3]), [3, 4])
    grad_w = f.T @ dlogits
    assert not np.any(grad_w[:, :3])


def test_efc_total_sums_parts():
    rng = np.random.default_rng(6)
    w = rng.standard_normal((3, 4))
    f, fh, p = rng.standard_normal((4, 3)), rng.standard_normal((2, 3)), rng.standard_normal((3, 3))
    cls = losses.pr_ace_loss(f, [2, 3, 3, 2], fh, [2, 3], p, [0, 1, 0], w, [2, 3], np.arange(4))
    assert losses.efc_total(cls, (0.0, np.zeros_like(f))).total == cls.total
    total = losses.efc_total(cls, (1.25, np.zeros_like(f)))
    assert total.total == cls.total + 1.25


@pytest.mark.parametrize("kind", ["ce", "efm", "sym", "pr-ace", "efc"])
def test_composed_gradients(kind):
    assert composed_gradient_error(kind) <= 1e-5
