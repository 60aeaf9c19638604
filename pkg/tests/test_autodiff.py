"""Finite-difference verification of every autodiff primitive."""

import numpy as np
import pytest

from candle import autodiff as ad
from candle.autodiff import Tensor
from candle.errors import DegenerateVectorError
from candle.rng import Rng


def fd_check(build, shapes, seed=0, eps=1e-6, tol=1e-6):
    """Compare analytic gradients of scalar build(*tensors) to central FD."""
    rng = Rng(seed)
    arrays = [rng.gaussians(int(np.prod(s))).reshape(s) for s in shapes]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*leaves)
    out.backward()
    for leaf, base in zip(leaves, arrays):
        flat = leaf.data.ravel()
        grad = leaf.grad.ravel() if leaf.grad is not None else np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(build(*[Tensor(l.data) for l in leaves]).data)
            flat[i] = orig - eps
            down = float(build(*[Tensor(l.data) for l in leaves]).data)
            flat[i] = orig
            fd = (up - down) / (2 * eps)
            assert abs(grad[i] - fd) <= tol * max(1.0, abs(fd)), (
                f"entry {i}: analytic {grad[i]} vs fd {fd}"
            )


def test_add_broadcast():
    fd_check(lambda a, b: ad.mean_all(ad.add(a, b)), [(3, 4), (1, 4)])


def test_mul_broadcast():
    fd_check(lambda a, b: ad.mean_all(ad.mul(a, b)), [(2, 3), (2, 1)])


def test_matmul_transpose():
    fd_check(lambda a, b: ad.mean_all(ad.matmul(a, ad.transpose(b))), [(2, 3), (4, 3)])


def test_concat_narrow():
    def build(a, b):
        cat = ad.concat([a, b], axis=0)
        return ad.mean_all(ad.narrow(cat, 0, 1, 3))

    fd_check(build, [(2, 3), (3, 3)])


def test_concat_axis1():
    fd_check(lambda a, b: ad.mean_all(ad.concat([a, b], axis=1)), [(2, 2), (2, 3)])


def test_l2norm_rows():
    fd_check(lambda a: ad.mean_all(ad.mul(ad.l2norm_rows(a), ad.l2norm_rows(a))), [(3, 4)])


def test_l2norm_rejects_zero_row():
    with pytest.raises(DegenerateVectorError, match="row 1"):
        ad.l2norm_rows(Tensor(np.array([[1.0, 0.0], [0.0, 0.0]])))


def test_logsumexp_rows():
    fd_check(lambda a: ad.mean_all(ad.logsumexp_rows(a)), [(4, 5)])


def test_logsumexp_stable_at_large_values():
    z = Tensor(np.array([[1000.0, 1000.0], [-1000.0, -999.0]]))
    out = ad.logsumexp_rows(z)
    assert np.all(np.isfinite(out.data))


def test_pick():
    idx = np.array([2, 0, 1])
    fd_check(lambda a: ad.mean_all(ad.pick(a, idx)), [(3, 4)])


def test_masked_softmax_none():
    fd_check(lambda a: ad.mean_all(ad.mul(ad.masked_softmax_rows(a, None),
                                          Tensor(np.arange(12.0).reshape(3, 4)))), [(3, 4)])


def test_masked_softmax_with_mask():
    allow = np.array([[True, False, True, True],
                      [True, True, False, False],
                      [False, True, True, True]])
    weights = Tensor(np.arange(12.0).reshape(3, 4))

    def build(a):
        return ad.mean_all(ad.mul(ad.masked_softmax_rows(a, allow), weights))

    fd_check(build, [(3, 4)])


def test_masked_softmax_rows_sum_to_one_or_zero():
    allow = np.array([[True, True], [False, False]])
    w = ad.masked_softmax_rows(Tensor(np.array([[5.0, 1.0], [2.0, 3.0]])), allow)
    assert np.isclose(w.data[0].sum(), 1.0)
    assert np.array_equal(w.data[1], [0.0, 0.0])  # fully masked row: zeros, not NaN


def test_masked_softmax_disallowed_entries_zero():
    allow = np.array([[True, False, True]])
    w = ad.masked_softmax_rows(Tensor(np.array([[1.0, 100.0, 2.0]])), allow)
    assert w.data[0, 1] == 0.0
    assert np.isclose(w.data[0].sum(), 1.0)


def test_fully_masked_row_passes_zero_gradient():
    allow = np.array([[False, False]])
    scores = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
    out = ad.mean_all(ad.masked_softmax_rows(scores, allow))
    out.backward()
    assert np.array_equal(scores.grad, [[0.0, 0.0]])


def test_gradient_accumulates_on_diamond_graph():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = ad.add(ad.mul(x, x), ad.mul(x, Tensor(np.array([3.0]))))  # x^2 + 3x
    out = ad.mean_all(y)
    out.backward()
    assert np.isclose(x.grad[0], 2 * 2.0 + 3.0)


def test_operator_sugar():
    a = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
    out = ad.mean_all(2.0 * a + a - (-a))
    out.backward()
    assert np.allclose(a.grad, [[2.0, 2.0]])


def test_no_grad_tracking_without_requires_grad():
    a = Tensor(np.ones((2, 2)))
    b = ad.matmul(a, a)
    assert b._backward is None and not b.requires_grad
