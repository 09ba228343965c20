import math

import numpy as np
import pytest

from pointprompt import autodiff as ad
from pointprompt.autodiff import (DtypeMismatchError, GraphError, OpKind,
                                  ShapeMismatchError)

from helpers import op_instance, ref_layernorm

ALL_KINDS = list(OpKind)


def t64(data, grad=False):
    return ad.tensor(data, dtype=np.float64, requires_grad=grad)


def test_softmax_symmetry():
    out = ad.softmax(t64([0.0, 0.0]), axis=0)
    np.testing.assert_allclose(out.value, [0.5, 0.5])


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 3))
    out = ad.matmul(t64(np.eye(3)), t64(a))
    np.testing.assert_array_equal(out.value, a)


def test_layernorm_against_direct_formula():
    x = np.array([1.0, 2.0, 3.0])
    out = ad.layernorm(t64(x), axis=0, eps=1e-5)
    np.testing.assert_allclose(out.value, ref_layernorm(x, axis=0), rtol=1e-12)
    assert abs(out.value.mean()) < 1e-12
    np.testing.assert_allclose((out.value ** 2).mean(), 1.0, atol=1e-4)


def test_backward_of_sum_is_ones():
    x = t64(np.random.default_rng(1).standard_normal((3, 4)), grad=True)
    total = ad.scale(ad.mean_reduce(ad.reshape(x, (12,)), 0), 12.0)
    grads = ad.backward(total)
    np.testing.assert_allclose(grads[x], np.ones((3, 4)))


def test_cross_entropy_uniform_logits_closed_form():
    c = 7
    j = 3
    logits = t64(np.zeros(c), grad=True)
    loss = ad.cross_entropy_with_logits(logits, np.array(j))
    np.testing.assert_allclose(loss.value, math.log(c), rtol=1e-12)
    ad.backward(loss)
    expected = np.full(c, 1.0 / c)
    expected[j] -= 1.0
    np.testing.assert_allclose(logits.grad, expected, rtol=1e-12)


def test_max_reduce_tie_routes_to_lowest_index():
    x = t64([3.0, 1.0, 3.0], grad=True)
    out = ad.max_reduce(x, axis=0)
    assert out.value == 3.0
    ad.backward(out)
    np.testing.assert_array_equal(x.grad, [1.0, 0.0, 0.0])


def test_finite_diff_examples():
    rng = np.random.default_rng(2)
    a = t64(rng.standard_normal((4, 5)))
    b = t64(rng.standard_normal((5, 3)))
    assert ad.finite_diff_check(OpKind.MATMUL, [a, b], h=1e-6) <= 1e-6
    v = t64(rng.standard_normal(8))
    assert ad.finite_diff_check(OpKind.SOFTMAX, [v], {"axis": 0}, h=1e-6) <= 1e-6
    z = t64(rng.standard_normal((3, 3)))
    assert ad.finite_diff_check(OpKind.SCALE, [z], {"factor": 0.0}) == 0.0


@pytest.mark.parametrize("kind", ALL_KINDS, ids=lambda k: k.value)
def test_finite_diff_every_kind(kind):
    rng = np.random.default_rng(hash(kind.value) % 2 ** 31)
    worst = 0.0
    for _ in range(10):
        vals, attrs = op_instance(kind, rng)
        inputs = [t64(v) for v in vals]
        worst = max(worst, ad.finite_diff_check(kind, inputs, attrs, rng=rng))
    assert worst <= 1e-4, f"{kind.value}: max rel err {worst}"


def test_softmax_rows_nonneg_sum_one():
    rng = np.random.default_rng(3)
    for _ in range(25):
        x = rng.standard_normal((5, 9)) * 4
        out = ad.softmax(t64(x), axis=1).value
        assert (out >= 0).all()
        np.testing.assert_allclose(out.sum(axis=1), np.ones(5), atol=1e-6)


def test_backward_twice_accumulates():
    x = t64(np.random.default_rng(4).standard_normal(6), grad=True)

    def loss():
        return ad.mean_reduce(ad.mul(x, x), 0)

    first = ad.backward(loss())[x].copy()
    second = ad.backward(loss())[x]
    np.testing.assert_allclose(second, 2.0 * first)


def test_concat_slice_roundtrip():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 2))
    cat = ad.concat([t64(a), t64(b)], axis=1)
    np.testing.assert_array_equal(ad.slice_axis(cat, 1, 0, 4).value, a)
    np.testing.assert_array_equal(ad.slice_axis(cat, 1, 4, 6).value, b)


def test_topk_k1_equals_max_bitwise():
    rng = np.random.default_rng(6)
    for _ in range(20):
        x = rng.standard_normal((7, 5))
        x[2] = x[0]  # force value ties across the reduced axis
        top = ad.topk_reduce(t64(x), axis=0, k=1).value
        mx = ad.max_reduce(t64(x), axis=0).value
        np.testing.assert_array_equal(top.reshape(-1), mx)


def test_topk_descending_and_gradient_routing():
    x = t64([[1.0, 5.0], [4.0, 5.0], [2.0, 0.0]], grad=True)
    out = ad.topk_reduce(x, axis=0, k=2)
    np.testing.assert_array_equal(out.value, [[4.0, 5.0], [2.0, 5.0]])
    loss = ad.mean_reduce(ad.reshape(out, (4,)), 0)
    ad.backward(loss)
    # column 1 ties at 5.0: rows 0 and 1 both selected (lowest indices first)
    np.testing.assert_allclose(
        x.grad, [[0.0, 0.25], [0.25, 0.25], [0.25, 0.0]])


def test_gather_accumulates_duplicate_rows():
    x = t64(np.ones((3, 2)), grad=True)
    out = ad.gather_rows(x, np.array([0, 0, 2]))
    total = ad.scale(ad.mean_reduce(ad.reshape(out, (6,)), 0), 6.0)
    ad.backward(total)
    np.testing.assert_array_equal(x.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


def test_shape_error_names_kind_and_dims():
    with pytest.raises(ShapeMismatchError, match="matmul"):
        ad.matmul(t64(np.zeros((2, 3))), t64(np.zeros((4, 2))))
    with pytest.raises(ShapeMismatchError, match=r"concat"):
        ad.concat([t64(np.zeros((2, 3))), t64(np.zeros((2, 4)))], axis=0)


def test_dtype_errors():
    with pytest.raises(DtypeMismatchError):
        ad.add(ad.tensor([1.0], dtype=np.float32), t64([1.0]))
    with pytest.raises(DtypeMismatchError):
        ad.tensor([1], dtype=np.int32)


def test_nonscalar_loss_and_detached_graph_errors():
    x = t64(np.zeros((2, 2)), grad=True)
    with pytest.raises(GraphError, match="scalar"):
        ad.backward(ad.relu(x))
    frozen = t64(np.zeros(3))
    with pytest.raises(GraphError):
        ad.backward(ad.mean_reduce(frozen, 0))


def test_no_grad_accumulation_without_requires_grad():
    x = t64(np.random.default_rng(7).standard_normal(4))
    y = t64(np.random.default_rng(8).standard_normal(4), grad=True)
    loss = ad.mean_reduce(ad.mul(x, y), 0)
    grads = ad.backward(loss)
    assert x not in grads and x.grad is None
    assert y.grad is not None


def test_forward_deterministic_and_requires_grad_propagation():
    rng = np.random.default_rng(9)
    a = t64(rng.standard_normal((3, 3)), grad=True)
    b = t64(rng.standard_normal((3, 3)))
    out1 = ad.matmul(a, b)
    out2 = ad.matmul(a, b)
    np.testing.assert_array_equal(out1.value, out2.value)
    assert out1.requires_grad and out1.producer is not None
    frozen = ad.matmul(b, b)
    assert not frozen.requires_grad and frozen.producer is None


def test_finite_diff_rejects_f32_and_bad_step():
    x32 = ad.tensor(np.zeros((2, 2)), dtype=np.float32)
    with pytest.raises(DtypeMismatchError):
        ad.finite_diff_check(OpKind.RELU, [x32])
    with pytest.raises(ValueError):
        ad.finite_diff_check(OpKind.RELU, [t64(np.ones((2, 2)))], h=1e-2)
