import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vdrank import autodiff as ad
from oracles import central_diff, rel_err, scalar_adam


def check_grad(make_loss, leaves, rng, coords=10, tol=1e-6):
    for leaf in leaves:
        leaf.grad = None
    ad.backward(make_loss())
    for leaf in leaves:
        for _ in range(coords):
            idx = tuple(int(rng.integers(s)) for s in leaf.shape)
            fd = central_diff(lambda: make_loss().item(), leaf.data, idx)
            assert rel_err(fd, leaf.grad[idx]) < tol, (idx, fd, leaf.grad[idx])


# -- matmul


def test_matmul_identity():
    out = ad.matmul(ad.Tensor([[1, 0], [0, 1]]), ad.Tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_row_by_column():
    assert ad.matmul(ad.Tensor([[1, 2]]), ad.Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a = ad.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    b = ad.Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    check_grad(lambda: ad.sum_all(ad.matmul(a, b)), [a, b], rng)


def test_batched_matmul_broadcast_gradient():
    rng = np.random.default_rng(1)
    a = ad.Tensor(rng.normal(size=(2, 3, 4, 5)), requires_grad=True)
    b = ad.Tensor(rng.normal(size=(5, 2)), requires_grad=True)
    w = rng.normal(size=(2, 3, 4, 2))
    check_grad(lambda: ad.sum_all(ad.mul(ad.matmul(a, b), w)), [a, b], rng)


# -- masked softmax


def test_masked_softmax_single_allowed():
    p = ad.masked_softmax(ad.Tensor([[0.0, 0.0]]), [[0.0, -np.inf]])
    assert p.data.tolist() == [[1.0, 0.0]]


def test_masked_softmax_uniform():
    p = ad.masked_softmax(ad.Tensor([[0.0, 0.0, 0.0]]), np.zeros((1, 3)))
    np.testing.assert_allclose(p.data, [[1 / 3] * 3], atol=1e-15)


def test_masked_softmax_hand_value():
    p = ad.masked_softmax(ad.Tensor([[1.0, 2.0, 3.0]]), [[0.0, 0.0, -np.inf]])
    e = math.e
    np.testing.assert_allclose(p.data, [[1 / (1 + e), e / (1 + e), 0.0]], rtol=1e-12)
    assert p.data[0, 2] == 0.0


def test_masked_softmax_rejects_fully_masked_row():
    with pytest.raises(ad.DegenerateRowError):
        ad.masked_softmax(ad.Tensor([[1.0, 2.0]]), [[-np.inf, -np.inf]])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_masked_softmax_rows_sum_to_one(rows, cols, seed):
    rng = np.random.default_rng(seed)
    mask = np.where(rng.random((rows, cols)) < 0.4, -np.inf, 0.0)
    mask[np.arange(rows), rng.integers(cols, size=rows)] = 0.0
    p = ad.masked_softmax(ad.Tensor(rng.normal(scale=5, size=(rows, cols))), mask).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(p[mask == -np.inf] == 0.0)


def test_masked_softmax_gradient():
    rng = np.random.default_rng(2)
    x = ad.Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    mask = np.zeros((3, 6))
    mask[0, 2:] = -np.inf
    mask[2, 0] = -np.inf
    w = rng.normal(size=(3, 6))
    check_grad(lambda: ad.sum_all(ad.mul(ad.masked_softmax(x, mask), w)), [x], rng, tol=1e-5)


# -- layer norm


def _ln_params(d):
    return ad.Parameter("g", np.ones(d)), ad.Parameter("b", np.zeros(d))


def test_layer_norm_constant_row_is_zero():
    g, b = _ln_params(3)
    np.testing.assert_array_equal(ad.layer_norm(ad.Tensor([[5.0, 5.0, 5.0]]), g, b).data, [[0, 0, 0]])


def test_layer_norm_two_values():
    g, b = _ln_params(2)
    np.testing.assert_allclose(ad.layer_norm(ad.Tensor([[1.0, 3.0]]), g, b, eps=1e-12).data, [[-1, 1]], atol=1e-9)


def test_layer_norm_moments():
    rng = np.random.default_rng(3)
    g, b = _ln_params(16)
    out = ad.layer_norm(ad.Tensor(rng.normal(3, 7, size=(5, 16))), g, b).data
    np.testing.assert_allclose(out.mean(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=1), 1, atol=1e-9)


def test_layer_norm_gradient():
    rng = np.random.default_rng(4)
    x = ad.Tensor(rng.normal(size=(3, 8)), requires_grad=True)
    g = ad.Parameter("g", rng.normal(size=8))
    b = ad.Parameter("b", rng.normal(size=8))
    w = rng.normal(size=(3, 8))
    check_grad(lambda: ad.sum_all(ad.mul(ad.layer_norm(x, g, b, 1e-5), w)), [x, g, b], rng, tol=1e-5)


# -- gelu


def test_gelu_fixed_point_and_asymptote():
    out = ad.gelu(ad.Tensor([0.0, 20.0])).data
    assert out[0] == 0.0
    assert out[1] == pytest.approx(20.0, rel=1e-12)


def test_gelu_gradient_on_grid():
    x = ad.Tensor(np.linspace(-4, 4, 33), requires_grad=True)
    ad.backward(ad.sum_all(ad.gelu(x)))
    for i in range(33):
        fd = central_diff(lambda: ad.sum_all(ad.gelu(ad.Tensor(x.data))).item(), x.data, (i,))
        assert rel_err(fd, x.grad[i]) < 1e-5


# -- cross entropy


def test_cross_entropy_uniform():
    assert ad.cross_entropy(ad.Tensor(np.zeros((1, 4))), [2]).item() == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_saturated():
    assert ad.cross_entropy(ad.Tensor([[30.0, -30.0]]), [0]).item() == pytest.approx(0.0, abs=1e-20)


def test_cross_entropy_matches_direct_sum():
    rng = np.random.default_rng(5)
    logits = rng.normal(scale=3, size=(5, 7))
    targets = rng.integers(7, size=5)
    direct = 0.0
    for row, t in zip(logits, targets):
        direct += -math.log(math.exp(row[t]) / sum(math.exp(v) for v in row))
    assert ad.cross_entropy(ad.Tensor(logits), targets).item() == pytest.approx(direct / 5, abs=1e-9)


def test_cross_entropy_bad_target():
    with pytest.raises(IndexError):
        ad.cross_entropy(ad.Tensor(np.zeros((2, 3))), [0, 3])


def test_cross_entropy_gradient():
    rng = np.random.default_rng(6)
    x = ad.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    t = rng.integers(5, size=4)
    check_grad(lambda: ad.cross_entropy(x, t), [x], rng)


# -- backward


def test_backward_sum_gives_ones():
    p = ad.Parameter("p", np.arange(6.0).reshape(2, 3))
    ad.backward(ad.sum_all(p))
    np.testing.assert_array_equal(p.grad, np.ones((2, 3)))


def test_backward_square():
    p = ad.Parameter("p", np.array([1.0, -2.0, 3.5]))
    ad.backward(ad.sum_all(ad.mul(p, p)))
    np.testing.assert_array_equal(p.grad, 2 * p.data)


def test_backward_accumulates_without_zeroing():
    p = ad.Parameter("p", np.array([1.0, 2.0]))
    ad.backward(ad.sum_all(p))
    ad.backward(ad.sum_all(p))
    np.testing.assert_array_equal(p.grad, [2.0, 2.0])


def test_backward_rejects_non_scalar():
    p = ad.Parameter("p", np.ones(3))
    with pytest.raises(ad.ContractError):
        ad.backward(ad.mul(p, 2.0))


def test_shared_subexpression_sums_paths():
    rng = np.random.default_rng(7)
    p = ad.Parameter("p", rng.normal(size=(3, 3)))

    def loss():
        s = ad.gelu(ad.matmul(p, p))
        return ad.sum_all(ad.mul(s, ad.add(s, p)))

    check_grad(loss, [p], rng, coords=9, tol=1e-6)


def test_tape_is_in_recording_order():
    p = ad.Parameter("p", np.ones(2))
    a = ad.mul(p, 2.0)
    b = ad.add(a, p)
    c = ad.sum_all(b)
    tape = ad.Tape(c)
    assert [node.name for _, node in tape.entries] == ["mul", "add", "sum"]
    assert [n.seq for _, n in tape.entries] == sorted(n.seq for _, n in tape.entries)


def test_no_grad_records_nothing():
    p = ad.Parameter("p", np.ones(2))
    with ad.no_grad():
        out = ad.sum_all(p)
    assert out.node is None and not out.requires_grad


# -- adam and schedule


def test_adam_first_step_moves_by_lr():
    p = ad.Parameter("w", np.array([1.0]))
    p.grad = np.array([1.0])
    ad.adam_step([p], lr=0.1)
    assert p.data[0] == pytest.approx(0.9, abs=1e-8)
    assert p.step_count == 1


def test_adam_zero_grad_is_exact_noop():
    p = ad.Parameter("w", np.array([1.5, -2.0]))
    p.grad = np.zeros(2)
    ad.adam_step([p], lr=0.1)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_adam_two_steps_match_scalar_reference():
    p = ad.Parameter("w", np.array([0.7]))
    for _ in range(2):
        p.grad = np.array([0.3])
        ad.adam_step([p], lr=0.05)
    assert abs(p.data[0] - scalar_adam(0.7, [0.3, 0.3], 0.05)) < 1e-12


def test_adam_lr_zero_changes_nothing():
    rng = np.random.default_rng(8)
    p = ad.Parameter("w", rng.normal(size=(3, 4)))
    before = p.data.copy()
    for _ in range(3):
        p.grad = rng.normal(size=(3, 4))
        ad.adam_step([p], lr=0.0)
    np.testing.assert_array_equal(p.data, before)


def test_adam_missing_grad():
    with pytest.raises(ad.ContractError):
        ad.adam_step([ad.Parameter("w", np.ones(2))], lr=0.1)


def test_lr_schedule_points():
    assert ad.lr_at(100, 1000, 3e-5) == pytest.approx(3e-5)
    assert ad.lr_at(1000, 1000, 3e-5) == 0.0
    assert ad.lr_at(550, 1000, 3e-5) == pytest.approx(1.5e-5, rel=1e-12)
    assert ad.lr_at(0, 1000, 3e-5) == 0.0
    assert ad.lr_at(50, 1000, 3e-5) == pytest.approx(1.5e-5, rel=1e-12)


def test_lr_schedule_rejects_overrun():
    with pytest.raises(ad.ContractError):
        ad.lr_at(11, 10, 1e-3)


def test_lr_schedule_peaks_at_warmup_boundary():
    lrs = [ad.lr_at(s, 200, 1.0) for s in range(201)]
    assert int(np.argmax(lrs)) == 20
