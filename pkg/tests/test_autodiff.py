import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetgcn import autodiff as ad

from _toys import directional_check, rel_error


def leaf(rng, *shape, scale=1.0):
    return ad.Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


# each builder: rng -> (list of leaves, function building the op output)
def _matmul(rng):
    n, k, m = rng.integers(1, 6, size=3)
    a, b = leaf(rng, n, k), leaf(rng, k, m)
    return [a, b], lambda: ad.matmul(a, b)


def _add(rng):
    n, m = rng.integers(1, 6, size=2)
    a, b = leaf(rng, n, m), leaf(rng, m)
    return [a, b], lambda: ad.add(a, b)


def _concat(rng):
    n = rng.integers(1, 5)
    a, b, c = leaf(rng, n, rng.integers(1, 4)), leaf(rng, n, rng.integers(1, 4)), leaf(rng, n, 2)
    return [a, b, c], lambda: ad.concat([a, b, c])


def _relu(rng):
    a = leaf(rng, rng.integers(1, 6), rng.integers(1, 6))
    return [a], lambda: ad.relu(a)


def _tanh(rng):
    a = leaf(rng, rng.integers(1, 6), rng.integers(1, 6))
    return [a], lambda: ad.tanh(a)


def _sigmoid(rng):
    a = leaf(rng, rng.integers(1, 6), rng.integers(1, 6), scale=3.0)
    return [a], lambda: ad.sigmoid(a)


def _hadamard(rng):
    n, m = rng.integers(1, 6, size=2)
    a, b = leaf(rng, n, m), leaf(rng, n, m)
    return [a, b], lambda: ad.hadamard(a, b)


def _segment_max(rng):
    rows, width, segs = rng.integers(1, 8), rng.integers(1, 5), rng.integers(1, 5)
    a = leaf(rng, rows, width)
    ids = rng.integers(0, segs, size=rows)
    return [a], lambda: ad.segment_max(a, ids, segs)


def _segment_sum(rng):
    rows, width, segs = rng.integers(1, 8), rng.integers(1, 5), rng.integers(1, 5)
    a = leaf(rng, rows, width)
    ids = rng.integers(0, segs, size=rows)
    return [a], lambda: ad.segment_sum(a, ids, segs)


def _gru(rng):
    n, i, hdim = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 4)
    ts = [leaf(rng, n, i), leaf(rng, n, hdim), leaf(rng, i, 3 * hdim), leaf(rng, hdim, 3 * hdim),
          leaf(rng, 3 * hdim), leaf(rng, 3 * hdim)]
    return ts, lambda: ad.gru_cell(*ts)


def _smooth_l1(rng):
    a = leaf(rng, rng.integers(1, 6), rng.integers(1, 6), scale=2.0)
    return [a], lambda: ad.smooth_l1(a)


def _softmax(rng):
    a = leaf(rng, rng.integers(1, 5), rng.integers(1, 6))
    return [a], lambda: ad.softmax(a)


def _gather(rng):
    rows = rng.integers(1, 6)
    a = leaf(rng, rows, rng.integers(1, 4))
    idx = rng.integers(0, rows, size=rng.integers(1, 8))
    return [a], lambda: ad.gather_rows(a, idx)


def _slice(rng):
    a = leaf(rng, rng.integers(2, 6), rng.integers(2, 6))
    return [a], lambda: ad.slice_cols(ad.slice_rows(a, 1, a.shape[0]), 0, a.shape[1] - 1)


PRIMITIVES = {
    "matmul": _matmul, "add": _add, "concat": _concat, "relu": _relu, "tanh": _tanh,
    "sigmoid": _sigmoid, "hadamard": _hadamard, "segment_max": _segment_max,
    "segment_sum": _segment_sum, "gru_cell": _gru, "smooth_l1": _smooth_l1,
    "softmax": _softmax, "gather_rows": _gather, "slice": _slice,
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        leaves, op = PRIMITIVES[name](rng)
        weights = rng.normal(size=op().shape)
        worst = max(worst, directional_check(lambda: ad.sum_all(ad.mul(op(), weights)), leaves, rng))
    assert worst <= 1e-4, f"{name}: max relative error {worst:.2e}"


def test_relu_values():
    np.testing.assert_array_equal(ad.relu(ad.Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_smooth_l1_values():
    np.testing.assert_allclose(ad.smooth_l1(ad.Tensor([0.5, 2.0, -2.0])).data, [0.125, 1.5, 1.5])


def test_gru_zero_weights_halves_state():
    h = ad.gru_cell(ad.Tensor([[3.0, -7.0]]), ad.Tensor([[0.8]]), np.zeros((2, 3)), np.zeros((1, 3)),
                    np.zeros(3), np.zeros(3))
    np.testing.assert_allclose(h.data, [[0.4]], rtol=0, atol=1e-15)


def test_linear_gradient_is_input_rows():
    w = ad.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x = np.array([[1.0, 2.0]])
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.matmul(x, w))
    ad.backward(loss, tape, [w])
    np.testing.assert_array_equal(w.grad, [[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]])


def test_detached_branch_gets_no_gradient():
    a = ad.Tensor([1.0, 2.0], requires_grad=True)
    b = ad.Tensor([3.0, 4.0], requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.add(ad.mul(a, a), ad.detach(ad.mul(b, b))))
    ad.backward(loss, tape, [a, b])
    np.testing.assert_array_equal(a.grad, [2.0, 4.0])
    np.testing.assert_array_equal(b.grad, [0.0, 0.0])


def test_unused_parameter_gets_zero_gradient():
    a = ad.Tensor([1.0], requires_grad=True)
    unused = ad.Tensor([[5.0, 6.0]], requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.mul(a, 3.0))
    ad.backward(loss, tape, [a, unused])
    np.testing.assert_array_equal(unused.grad, [[0.0, 0.0]])


def test_non_scalar_loss_rejected():
    a = ad.Tensor([1.0, 2.0], requires_grad=True)
    with ad.Tape() as tape:
        out = ad.mul(a, 2.0)
    with pytest.raises(ad.ShapeError):
        ad.backward(out, tape, [a])


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_output_is_an_error():
    with pytest.raises(ad.NonFiniteError):
        ad.mul(ad.Tensor([1e308]), 1e10)


def test_segment_max_empty_segment_is_zero_and_ties_route_to_lowest_row():
    x = ad.Tensor([[1.0, 5.0], [1.0, 2.0], [0.5, 5.0]], requires_grad=True)
    with ad.Tape() as tape:
        out = ad.segment_max(x, [0, 0, 0], 2)
        loss = ad.sum_all(out)
    np.testing.assert_array_equal(out.data, [[1.0, 5.0], [0.0, 0.0]])
    ad.backward(loss, tape, [x])
    np.testing.assert_array_equal(x.grad, [[1.0, 1.0], [0.0, 0.0], [0.0, 0.0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_segment_max_permutation_invariant_and_unit_gradient(seed):
    rng = np.random.default_rng(seed)
    rows, segs = int(rng.integers(1, 10)), int(rng.integers(1, 4))
    x = rng.normal(size=(rows, 3))
    x[rng.integers(0, rows)] = x[0]        # force some ties
    ids = rng.integers(0, segs, size=rows)
    perm = rng.permutation(rows)
    a = ad.segment_max(x, ids, segs).data
    b = ad.segment_max(x[perm], ids[perm], segs).data
    np.testing.assert_array_equal(a, b)

    t = ad.Tensor(x, requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.segment_max(t, ids, segs))
    ad.backward(loss, tape, [t])
    nonempty = np.isin(np.arange(segs), ids).sum()
    # each (segment, column) output sends exactly one unit downstream
    assert t.grad.sum() == 3 * nonempty
    assert set(np.unique(t.grad)) <= {0.0, 1.0}


def test_tape_replay_is_bit_identical(rng):
    w = rng.normal(size=(4, 3))
    x = rng.normal(size=(5, 4))

    def run():
        with ad.Tape():
            return ad.softmax(ad.tanh(ad.matmul(x, ad.Tensor(w, requires_grad=True)))).data

    np.testing.assert_array_equal(run(), run())


def test_float32_switch():
    ad.set_default_dtype("float32")
    assert ad.Tensor([1.0]).data.dtype == np.float32
    ad.set_default_dtype("float64")
    assert ad.Tensor([1.0]).data.dtype == np.float64


def test_rel_error_helper():
    assert rel_error([1.0], [1.0 + 1e-9]) < 1e-8
