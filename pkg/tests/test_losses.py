import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from coreecho import autodiff as ad
from coreecho.autodiff import Parameter, Tensor
from coreecho.losses import (bce_loss, l1_loss, mse_loss, negative_mask, negative_set, rnc_loss, stage1_loss,
                             stage2_loss, task_loss)
from coreecho.model import RegressionHead

from oracles import rnc_bruteforce


def batch(rng, k, c):
    """Paired labels like the first-stage batches: rows 2n and 2n+1 share a label."""
    return rng.normal(size=(k, c)), np.repeat(rng.integers(0, 6, size=k // 2).astype(float), 2)


# ---------------------------------------------------------------------------
# negative sets (examples are written 1-based, the API is 0-based)


def test_negative_set_examples():
    y = [10, 10, 50, 50]
    assert negative_set(y, 0, 2).members == {2, 3}
    assert negative_set(y, 0, 1).members == {1, 2, 3}
    assert negative_set([7, 7], 0, 1).members == {1}


def test_negative_set_errors():
    with pytest.raises(ValueError):
        negative_set([1, 2, 3], 1, 1)
    with pytest.raises(IndexError):
        negative_set([1, 2, 3], 0, 3)


@given(st.lists(st.integers(0, 5), min_size=2, max_size=9), st.data())
def test_negative_set_definition(labels, data):
    k = len(labels)
    n = data.draw(st.integers(0, k - 1))
    m = data.draw(st.integers(0, k - 1).filter(lambda v: v != n))
    s = negative_set(labels, n, m).members
    assert m in s and n not in s
    expect = {l for l in range(k) if l != n and abs(labels[n] - labels[l]) >= abs(labels[n] - labels[m])}
    assert s == expect
    assert set(np.flatnonzero(negative_mask(labels)[n, m])) == expect


# ---------------------------------------------------------------------------
# RnC


def test_rnc_two_equal_labels_is_zero():
    e = np.array([[0.3, -1.0], [2.0, 5.0]])
    assert abs(rnc_loss(e, [42.0, 42.0]).item()) <= 1e-12


def test_rnc_identical_embeddings_closed_form():
    val = rnc_loss(np.ones((4, 3)), [0, 0, 1, 1]).item()
    expect = (math.log(3) + 2 * math.log(2)) / 3
    assert abs(val - expect) <= 1e-12
    assert val == pytest.approx(0.82830, abs=1e-5)


def test_rnc_seeded_batch_matches_oracle():
    rng = np.random.default_rng(0)
    e, y = batch(rng, 8, 4)
    assert abs(rnc_loss(e, y, 1.0).item() - rnc_bruteforce(e, y, 1.0)) <= 1e-9


@given(st.integers(1, 5), st.integers(1, 6), st.sampled_from([0.1, 1.0, 10.0]), st.integers(0, 2 ** 32 - 1))
def test_rnc_matches_oracle(n, c, tau, seed):
    rng = np.random.default_rng(seed)
    e, y = batch(rng, 2 * n, c)
    assert abs(rnc_loss(e, y, tau).item() - rnc_bruteforce(e, y, tau)) <= 1e-9


@given(st.integers(0, 2 ** 32 - 1))
def test_rnc_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    e, y = batch(rng, 8, 3)
    perm = rng.permutation(8)
    assert abs(rnc_loss(e, y).item() - rnc_loss(e[perm], y[perm]).item()) <= 1e-12


@given(st.integers(0, 2 ** 32 - 1), arrays(np.float64, 3, elements=st.floats(-100, 100)))
def test_rnc_translation_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    e, y = batch(rng, 6, 3)
    assert abs(rnc_loss(e, y).item() - rnc_loss(e + shift, y).item()) <= 1e-12


@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 100))
def test_rnc_temperature_homogeneity(seed, tau):
    rng = np.random.default_rng(seed)
    e, y = batch(rng, 6, 4)
    assert rnc_loss(e, y, tau).item() == pytest.approx(rnc_loss(e / tau, y, 1.0).item(), abs=1e-10, rel=1e-12)


@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([1e-3, 1e-2, 1.0]))
def test_rnc_no_overflow_at_large_distances(seed, tau):
    rng = np.random.default_rng(seed)
    e, y = batch(rng, 6, 2)
    e = e / np.abs(e).max() * 1e6
    x = Parameter("e", e)
    loss = rnc_loss(x, y, tau)
    ad.backward(loss)
    assert np.isfinite(loss.item()) and np.isfinite(x.grad).all()


def test_rnc_errors():
    with pytest.raises(ValueError):
        rnc_loss(np.ones((2, 2)), [1, 2], tau=0)
    with pytest.raises(ValueError):
        rnc_loss(np.ones((1, 2)), [1])
    with pytest.raises(ValueError):
        rnc_loss(np.ones((2, 2)), [1, np.nan])


def test_rnc_gradient():
    rng = np.random.default_rng(1)
    e, y = batch(rng, 8, 4)
    x = Parameter("e", e)
    rep = ad.grad_check(lambda: rnc_loss(x, y, 0.7), [x], tolerance=1e-6)
    assert rep["passed"], rep["flagged"]


# ---------------------------------------------------------------------------
# simple losses


def test_l1_examples():
    assert l1_loss(Tensor([1.0, 3.0]), [1.0, 3.0]).item() == 0.0
    assert l1_loss(Tensor([1.0, 3.0]), [2.0, 5.0]).item() == 1.5
    with pytest.raises(ad.ShapeError):
        l1_loss(Tensor([1.0, 3.0]), [1.0])


def test_l1_gradient_sign():
    p = Parameter("p", [0.5, 4.0, -1.0, 2.0])
    t = np.array([1.0, 3.0, -1.0, 0.0])
    ad.backward(l1_loss(p, t))
    np.testing.assert_array_equal(p.grad, np.sign(p.data - t) / 4)
    p2 = Parameter("p", [0.5, 4.0, 2.0])
    rep = ad.grad_check(lambda: l1_loss(p2, [1.0, 3.0, 0.0]), [p2])
    assert rep["passed"]


def test_mse_and_bce():
    assert mse_loss(Tensor([1.0, 2.0]), [1.0, 2.0]).item() == 0.0
    assert mse_loss(Tensor([1.0, 2.0]), [0.0, 4.0]).item() == 2.5
    assert bce_loss(Tensor([0.5]), [1.0]).item() == pytest.approx(math.log(2), rel=1e-15)
    assert bce_loss(Tensor([0.5]), [0.0]).item() == pytest.approx(0.6931, abs=1e-4)
    assert bce_loss(Tensor([0.9]), [1.0]).item() == pytest.approx(-math.log(0.9), rel=1e-14)
    assert bce_loss(Tensor([0.9]), [1.0]).item() == pytest.approx(0.10536, abs=1e-5)
    assert math.isfinite(bce_loss(Tensor([0.0, 1.0]), [1.0, 0.0]).item())
    with pytest.raises(ValueError):
        bce_loss(Tensor([0.5]), [0.5])


def test_task_loss_lookup():
    assert task_loss("mse") is mse_loss
    with pytest.raises(ValueError):
        task_loss("huber")


def test_bce_gradient():
    p = Parameter("p", [0.2, 0.7, 0.45])
    rep = ad.grad_check(lambda: bce_loss(p, [1.0, 0.0, 1.0]), [p])
    assert rep["passed"]


# ---------------------------------------------------------------------------
# composite objectives


def _head(c=4, seed=0):
    return RegressionHead(c, np.random.default_rng(seed), dropout=0.4)


def test_stage1_total_is_sum_of_terms():
    rng = np.random.default_rng(2)
    e, y = batch(rng, 8, 4)
    head = _head()
    total, rnc, l1, pred = stage1_loss(Tensor(e), y, lambda z: head(z, training=False), 1.0)
    direct = rnc_loss(e, y).item() + l1_loss(head(Tensor(e)), y).item()
    assert abs(total.item() - direct) <= 1e-12
    assert total.item() == rnc.item() + l1.item()


def test_stage1_gradient_partition():
    rng = np.random.default_rng(3)
    e, y = batch(rng, 8, 4)
    head = _head()
    x = Parameter("e", e)
    hp = list(head.parameters().values())

    def grads(term):
        ad.zero_grad([x, *hp])
        total, rnc, l1, _ = stage1_loss(x, y, lambda z: head(z, training=True, rng=np.random.default_rng(0)))
        ad.backward({"total": total, "rnc": rnc, "l1": l1}[term])
        # a parameter absent from the graph has grad None, i.e. exactly zero
        return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in (x, *hp)]

    ex_l1, *_ = grads("l1")
    _, *head_rnc = grads("rnc")
    assert (ex_l1 == 0).all()
    assert all((g == 0).all() for g in head_rnc)
    ex_tot, *head_tot = grads("total")
    ex_rnc, *_ = grads("rnc")
    _, *head_l1 = grads("l1")
    np.testing.assert_array_equal(ex_tot, ex_rnc)
    for a, b in zip(head_tot, head_l1):
        np.testing.assert_array_equal(a, b)


class _Frozen:
    def __init__(self, emb, frozen=True):
        self.emb = emb
        self.frozen = frozen

    def __call__(self, clips, training=False):
        return Tensor(self.emb[np.asarray(clips, dtype=int)])


def test_stage2_loss_decomposition():
    rng = np.random.default_rng(4)
    emb = rng.normal(size=(6, 4))
    y = rng.uniform(10, 80, size=6)
    head = _head()
    loss, pred = stage2_loss(np.arange(6), y, _Frozen(emb), lambda z: head(z, training=False))
    assert abs(loss.item() - l1_loss(head(Tensor(emb)), y).item()) <= 1e-12


def test_stage2_perfect_head_is_zero():
    emb = np.random.default_rng(5).normal(size=(4, 4))
    y = np.arange(4.0)
    loss, _ = stage2_loss(np.arange(4), y, _Frozen(emb), lambda z: Tensor(y))
    assert loss.item() == 0.0


def test_stage2_requires_frozen_encoder():
    with pytest.raises(RuntimeError):
        stage2_loss(np.arange(2), [1.0, 2.0], _Frozen(np.ones((2, 4)), frozen=False), lambda z: z)
