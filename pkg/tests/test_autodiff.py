import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from smoelab import autodiff as ad
from smoelab.autodiff import Tensor, backward


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
                     elements=st.floats(-30, 30, allow_nan=False))


# -- matmul -------------------------------------------------------------------

def test_matmul_identity():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)


def test_matmul_hand_product():
    # 1*3 + 2*4
    out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_zero_annihilates():
    rng = np.random.default_rng(0)
    out = ad.matmul(Tensor(np.zeros((3, 4))), Tensor(rng.normal(size=(4, 5))))
    assert np.all(out.data == 0.0)


def test_matmul_backward_rules():
    rng = np.random.default_rng(1)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    g = rng.normal(size=(3, 2))
    backward(ad.sum_(ad.mul(ad.matmul(a, b), Tensor(g))))
    np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-13)
    np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-13)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.ShapeError) as exc:
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)


# -- softmax ------------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], rtol=1e-15)


def test_softmax_with_neg_inf():
    out = ad.softmax_rows(Tensor([[2.0, 1.0, -np.inf]])).data[0]
    e2, e1 = math.exp(2), math.exp(1)
    np.testing.assert_allclose(out[:2], [e2 / (e2 + e1), e1 / (e2 + e1)], rtol=1e-14)
    assert out[2] == 0.0
    np.testing.assert_allclose(out[:2], [0.7311, 0.2689], atol=1e-4)


def test_softmax_single_finite_is_one_hot():
    out = ad.softmax_rows(Tensor([[-np.inf, 3.0, -np.inf]])).data
    assert out.tolist() == [[0.0, 1.0, 0.0]]


def test_softmax_degenerate_row():
    with pytest.raises(ad.DegenerateRowError):
        ad.softmax_rows(Tensor([[-np.inf, -np.inf]]))


def test_masked_entry_gets_exactly_zero_gradient():
    x = leaf([[0.3, -1.2, 2.0, 0.7]])
    mask = np.array([[False, True, False, True]])
    w = Tensor([[1.0, 2.0, 3.0, 4.0]])
    backward(ad.sum_(ad.mul(ad.softmax_rows(ad.masked_fill(x, mask)), w)))
    assert x.grad[0, 1] == 0.0 and x.grad[0, 3] == 0.0
    assert np.all(x.grad[0, [0, 2]] != 0.0)


@given(finite_rows)
def test_softmax_rows_sum_to_one(x):
    out = ad.softmax_rows(Tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=50)
@given(finite_rows, st.integers(0, 5), st.floats(0.01, 5.0))
def test_softmax_monotone_in_each_input(x, j, bump):
    j = j % x.shape[1]
    y = x.copy()
    y[:, j] += bump
    assert np.all(ad.softmax_rows(Tensor(y)).data[:, j] >= ad.softmax_rows(Tensor(x)).data[:, j])


# -- l2 norm ------------------------------------------------------------------

def test_l2_norm_values():
    out = ad.l2_norm_rows(Tensor([[3.0, 4.0], [0.0, 0.0]])).data
    assert out.tolist() == [5.0, 0.0]
    assert ad.l2_norm_rows(Tensor([[1.0, 1.0, 1.0, 1.0]])).data.tolist() == [2.0]


def test_l2_norm_zero_row_subgradient():
    x = leaf([[0.0, 0.0], [3.0, 4.0]])
    backward(ad.sum_(ad.l2_norm_rows(x)))
    assert x.grad[0].tolist() == [0.0, 0.0]
    np.testing.assert_allclose(x.grad[1], [0.6, 0.8], rtol=1e-15)


# -- cross entropy ------------------------------------------------------------

def test_cross_entropy_uniform():
    assert ad.cross_entropy_nll(Tensor(np.zeros((3, 4))), [0, 1, 3]).item() == pytest.approx(math.log(4), abs=1e-14)


def test_cross_entropy_saturated():
    logits = np.zeros((2, 5))
    logits[0, 2] = logits[1, 4] = 1e6
    assert ad.cross_entropy_nll(Tensor(logits), [2, 4]).item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_two_class():
    expected = -math.log(math.e / (math.e + 1))
    assert ad.cross_entropy_nll(Tensor([[1.0, 0.0]]), [0]).item() == pytest.approx(expected, rel=1e-14)
    assert expected == pytest.approx(0.3133, abs=1e-4)


def test_cross_entropy_gradient_closed_form():
    rng = np.random.default_rng(2)
    logits = leaf(rng.normal(size=(4, 3)))
    t = np.array([0, 2, 1, 2])
    backward(ad.cross_entropy_nll(logits, t))
    p = np.exp(logits.data) / np.exp(logits.data).sum(axis=1, keepdims=True)
    p[np.arange(4), t] -= 1.0
    np.testing.assert_allclose(logits.grad, p / 4, rtol=1e-12)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        ad.cross_entropy_nll(Tensor(np.zeros((1, 3))), [3])


# -- misc ops -----------------------------------------------------------------

def test_mse_examples():
    x = Tensor([1.5, -2.0])
    assert ad.mse(x, x).item() == 0.0
    assert ad.mse(Tensor([0.0, 0.0]), Tensor([1.0, 1.0])).item() == 1.0


def test_relu_negative():
    x = leaf([-1.0])
    y = ad.relu(x)
    backward(ad.sum_(y))
    assert y.data.tolist() == [0.0] and x.grad.tolist() == [0.0]


def test_layer_norm_standardises():
    rng = np.random.default_rng(3)
    out = ad.layer_norm(Tensor(rng.normal(3.0, 2.0, size=(5, 16)))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)


def test_masked_fill_writes_sentinel():
    out = ad.masked_fill(Tensor([[1.0, 2.0]]), np.array([[True, False]])).data
    assert out[0, 0] == -np.inf and out[0, 1] == 2.0


def test_embedding_and_gather():
    table = Tensor(np.arange(12.0).reshape(4, 3))
    assert ad.embedding_lookup(table, np.array([[3, 0]])).data.tolist() == [[[9, 10, 11], [0, 1, 2]]]
    assert ad.gather_rows(table, [1, 1]).data.tolist() == [[3, 4, 5], [3, 4, 5]]


def test_concat_and_mean():
    a, b = Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]])
    assert ad.concat([a, b], axis=0).data.tolist() == [[1, 2], [3, 4]]
    assert ad.mean(ad.concat([a, b], axis=1)).item() == 2.5


def test_broadcast_shape_error():
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


# -- backward -----------------------------------------------------------------

def test_backward_sum():
    w = leaf([1.0, -2.0, 0.5])
    backward(ad.sum_(w))
    assert w.grad.tolist() == [1.0, 1.0, 1.0]


def test_backward_mse_closed_form():
    w, x, y = leaf([0.7]), 2.0, 3.0
    backward(ad.mse(ad.scale(w, x), Tensor([y])))
    assert w.grad[0] == pytest.approx(2 * (0.7 * x - y) * x, rel=1e-14)


def test_backward_requires_scalar():
    with pytest.raises(ad.RankError):
        backward(ad.mul(leaf([1.0, 2.0]), Tensor([1.0, 1.0])))


def test_gradient_accumulates_over_reuse():
    x = leaf([3.0])
    backward(ad.sum_(ad.mul(x, x)))
    assert x.grad.tolist() == [6.0]


def test_backward_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(4)
        a, b = leaf(rng.normal(size=(6, 5))), leaf(rng.normal(size=(5, 7)))
        h = ad.gelu(ad.matmul(a, b))
        loss = ad.add(ad.sum_(ad.softmax_rows(h)), ad.mean(ad.l2_norm_rows(h)))
        loss = ad.add(loss, ad.sum_(ad.mul(h, h)))
        backward(loss)
        return a.grad.tobytes(), b.grad.tobytes()

    assert run() == run()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_debug_mode_flags_nan():
    ad.set_debug(True)
    try:
        with pytest.raises(FloatingPointError):
            ad.log(Tensor([-1.0]))
    finally:
        ad.set_debug(False)


def test_finite_difference_matches_on_composite():
    rng = np.random.default_rng(5)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4,)))

    def fn():
        h = ad.layer_norm(ad.relu(ad.add(a, b)))
        return ad.cross_entropy_nll(h, [0, 3, 1])

    assert ad.finite_difference_check(fn, [a, b]) < 1e-4


# -- parameter store ----------------------------------------------------------

def test_parameter_store_order_and_uniqueness():
    ps = ad.ParameterStore()
    ps.add("b", np.zeros(2))
    ps.add("a", np.ones(3))
    assert list(ps) == ["b", "a"]
    assert ps.num_parameters() == 5
    with pytest.raises(KeyError):
        ps.add("a", np.zeros(1))


def test_parameter_store_freeze_and_state_roundtrip():
    ps = ad.ParameterStore()
    ps.add("w", np.arange(4.0))
    ps.add("r", np.zeros(2), frozen=True)
    assert [n for n, _ in ps.trainable()] == ["w"]
    state = ps.state_dict()
    ps["w"].data[:] = -1.0
    ps.load_state_dict(state)
    assert ps["w"].data.tolist() == [0, 1, 2, 3]
