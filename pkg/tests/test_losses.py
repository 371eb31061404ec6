import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bkd import losses
from bkd import tensor as tn
from bkd.losses import KdHyperParams
from bkd.tensor import DimensionError, Tensor

from conftest import check_grad

SEEDS = st.integers(0, 2**32 - 1)
FD = settings(max_examples=50, deadline=None)


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _kl_ref(p, q):
    return float(np.mean(np.sum(p * np.log(p / q), axis=1)))


def test_kl_known_value():
    v = losses.kl_div(Tensor([[0.5, 0.5]]), Tensor([[0.25, 0.75]])).item()
    ref = 0.5 * np.log(2.0) + 0.5 * np.log(0.5 / 0.75)
    assert abs(ref - 0.143841) < 1e-6
    assert abs(v - ref) < 1e-9


def test_kl_of_identical_is_zero():
    p = Tensor(_softmax(np.random.default_rng(0).normal(size=(4, 5))))
    assert losses.kl_div(p, p).item() == 0.0


def test_kl_survives_exact_zeros():
    v = losses.kl_div(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]])).item()
    assert np.isfinite(v) and v > 20


@given(SEEDS)
@settings(max_examples=30, deadline=None)
def test_kd_lambda_matches_direct_formula(seed):
    r = np.random.default_rng(seed)
    n, c = int(r.integers(1, 6)), int(r.integers(2, 6))
    s, t = r.normal(size=(n, c)) * 2, r.normal(size=(n, c)) * 2
    y = r.integers(0, c, size=n)
    lam, tau = float(r.uniform()), float(r.uniform(0.5, 5))
    got = losses.kd_loss_lambda(Tensor(s), Tensor(t), y, lam, tau).item()
    ce = -np.mean(np.log(_softmax(s)[np.arange(n), y]))
    kl = _kl_ref(_softmax(s / tau), _softmax(t / tau))
    assert got == pytest.approx((1 - lam) * ce + tau**2 * lam * kl, rel=1e-9, abs=1e-10)


def test_kd_boundaries_are_exact():
    r = np.random.default_rng(3)
    s, t = Tensor(r.normal(size=(4, 3))), Tensor(r.normal(size=(4, 3)))
    y = np.array([0, 1, 2, 0])
    ce = losses.cross_entropy(losses.soft(s, 1.0), y).item()
    assert losses.kd_loss_lambda(s, t, y, 0.0, 2.0).item() == ce
    kl = losses.kl_div(losses.soft(s, 2.0), losses.soft(t, 2.0)).item()
    assert losses.kd_loss_lambda(s, t, y, 1.0, 2.0).item() == 4.0 * kl
    assert losses.kd_loss_alpha(s, t, y, 1.0, 2.0).item() == ce


def test_bkd_is_batch_mean_of_row_sums():
    s = np.array([[1.0, 2.0], [0.0, 0.0]])
    t = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert losses.bkd_loss(Tensor(s), Tensor(t)).item() == (5.0 + 25.0) / 2


def test_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        losses.bkd_loss(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


def test_coefficients_validated():
    s = Tensor(np.zeros((1, 2)))
    with pytest.raises(ValueError):
        losses.kd_loss_lambda(s, s, [0], 1.5, 2.0)
    with pytest.raises(ValueError):
        losses.kd_loss_alpha(s, s, [0], 0.5, 0.0)


def test_teacher_receives_no_gradient():
    s = Tensor(np.ones((2, 3)), requires_grad=True)
    t = Tensor(np.zeros((2, 3)), requires_grad=True)
    gs, gt = tn.grad(losses.kd_loss_lambda(s, t, [0, 1], 0.5, 2.0), [s, t])
    assert np.all(gt == 0) and np.any(gs != 0)


def test_hyperparams_validation_and_replace():
    p = KdHyperParams()
    assert p.replace(lam=0.2).lam == 0.2 and p.lam == 0.5
    with pytest.raises(ValueError):
        KdHyperParams(aux_retention="forever")
    with pytest.raises(ValueError):
        KdHyperParams(input_clip=(1.0, 0.0))
    assert p.as_dict()["temperature"] == 2.0


# -- finite-difference checks on the three losses -----------------------------

def _problem(seed):
    r = np.random.default_rng(seed)
    n, c = int(r.integers(1, 5)), int(r.integers(2, 5))
    return (r, r.normal(size=(n, c)) * 2, r.normal(size=(n, c)) * 2,
            r.integers(0, c, size=n))


@given(SEEDS)
@FD
def test_fd_kd_loss_lambda(seed):
    r, s, t, y = _problem(seed)
    lam, tau = float(r.uniform(0.05, 0.95)), float(r.uniform(0.5, 4))
    check_grad(lambda a: losses.kd_loss_lambda(a, Tensor(t), y, lam, tau), [s])


@given(SEEDS)
@FD
def test_fd_kd_loss_alpha(seed):
    r, s, t, y = _problem(seed)
    alpha, tau = float(r.uniform(0.05, 0.95)), float(r.uniform(0.5, 4))
    check_grad(lambda a: losses.kd_loss_alpha(a, Tensor(t), y, alpha, tau), [s])


@given(SEEDS)
@FD
def test_fd_bkd_loss(seed):
    _, s, t, _ = _problem(seed)
    check_grad(losses.bkd_loss, [s, t])
    check_grad(losses.bkd_per_sample, [s, t])


@given(SEEDS)
@FD
def test_fd_kl_and_cross_entropy(seed):
    r, s, t, y = _problem(seed)
    check_grad(lambda a, b: losses.kl_div(losses.soft(a, 1.0), losses.soft(b, 1.0)), [s, t])
    check_grad(lambda a: losses.cross_entropy(losses.soft(a, 1.0), y), [s])
