import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ipslt import autodiff as ad
from ipslt.errors import NumericError, ShapeError, UsageError

from conftest import fd_grad, max_rel_err

finite = st.floats(-5, 5, allow_nan=False, width=64)


def T(x, grad=True):
    return ad.Tensor(np.array(x, dtype=np.float64), requires_grad=grad)


# -- examples ---------------------------------------------------------------

def test_matmul_examples():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((T(np.eye(2)) @ T(a)).data, a)
    assert np.array_equal((T([[1.0, 0.0]]) @ T([[5.0], [7.0]])).data, [[5.0]])
    out = T(a) @ T([[2.0, 0.0], [1.0, 2.0]])
    assert np.array_equal(out.data, [[4.0, 4.0], [10.0, 8.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        ad.matmul(T(np.ones((2, 3))), T(np.ones((2, 2))))


def test_softmax_examples():
    assert np.allclose(ad.softmax(T([0.0, 0.0])).data, [0.5, 0.5])
    sat = ad.softmax(T([1000.0, 0.0])).data
    assert np.isfinite(sat).all() and sat[0] == pytest.approx(1.0) and sat[1] < 1e-300
    e = np.exp([1.0, 2.0, 3.0])
    assert np.allclose(ad.softmax(T([1.0, 2.0, 3.0])).data, e / e.sum(), atol=0, rtol=1e-12)
    assert np.allclose(ad.softmax(T([1.0, 2.0, 3.0])).data, [0.09003, 0.24473, 0.66524], atol=1e-5)


def test_softmax_nan_is_numeric_error():
    with pytest.raises(NumericError):
        ad.softmax(T([0.0, np.nan]))


def test_layer_norm_examples():
    one, zero = T(np.ones(3)), T(np.zeros(3))
    assert np.allclose(ad.layer_norm(T([2.0, 2.0, 2.0]), one, zero).data, 0.0)
    out = ad.layer_norm(T([1.0, -1.0]), T(np.ones(2)), T(np.zeros(2)), eps=1e-12).data
    assert np.allclose(out, [1.0, -1.0])
    sigma = math.sqrt(8.0 / 3.0)
    out = ad.layer_norm(T([0.0, 2.0, 4.0]), one, zero, eps=0.0).data
    assert np.allclose(out, [-2.0 / sigma, 0.0, 2.0 / sigma], atol=1e-12)
    assert np.allclose(out, [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_layer_norm_needs_two_features():
    with pytest.raises(UsageError):
        ad.layer_norm(T([[1.0]]), T([1.0]), T([0.0]))


def test_cross_entropy_examples():
    assert ad.cross_entropy_from_logits(T(np.zeros((1, 4))), [0]).item() == pytest.approx(math.log(4))
    confident = np.zeros((1, 5))
    confident[0, 2] = 30.0
    assert ad.cross_entropy_from_logits(T(confident), [2]).item() < 1e-12
    expected = -math.log(math.exp(1) / (math.exp(1) + math.exp(2) + math.exp(3)))
    got = ad.cross_entropy_from_logits(T([[1.0, 2.0, 3.0]]), [0]).item()
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(2.40761, abs=1e-5)


def test_cross_entropy_ignores_padding():
    logits = np.random.default_rng(0).standard_normal((3, 5))
    full = ad.cross_entropy_from_logits(T(logits[:2]), [1, 3]).item()
    padded = ad.cross_entropy_from_logits(T(logits), [1, 3, 0], pad_id=0).item()
    assert padded == pytest.approx(full, abs=1e-12)


def test_cross_entropy_out_of_range():
    with pytest.raises(IndexError):
        ad.cross_entropy_from_logits(T(np.zeros((1, 3))), [3])


def test_kl_examples():
    x = np.random.default_rng(1).standard_normal((4, 6))
    assert ad.kl_divergence_from_logits(T(x), x).item() == pytest.approx(0.0, abs=1e-12)
    # independent high-precision value of sum p log(p/q) for p = softmax([10, 0]), q = softmax([0, 10])
    p = np.array([1.0, math.exp(-10)]) / (1.0 + math.exp(-10))
    q = p[::-1]
    expected = float((p * np.log(p / q)).sum())
    got = ad.kl_divergence_from_logits(T([[0.0, 10.0]]), np.array([[10.0, 0.0]])).item()
    assert got == pytest.approx(expected, abs=1e-10)
    assert got == pytest.approx(9.9991, abs=1e-4)


def test_kl_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.kl_divergence_from_logits(T(np.zeros((2, 3))), np.zeros((2, 4)))


def test_kl_teacher_gets_no_gradient():
    student, teacher = T(np.random.default_rng(2).standard_normal((3, 4))), T(np.ones((3, 4)))
    ad.kl_divergence_from_logits(student, teacher).backward()
    assert teacher.grad is None and student.grad is not None


def test_backward_examples():
    x = T([1.0, 2.0, 3.0])
    x.sum().backward()
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])
    x = T([1.0, 2.0])
    (x * x).sum().backward()
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_backward_needs_scalar():
    x = T([1.0, 2.0])
    with pytest.raises(UsageError):
        (x * 2.0).backward()


def test_shared_subexpression_accumulates():
    x = T([0.5, -1.5])
    y = x * x
    (y + y * 3.0).sum().backward()
    assert np.allclose(x.grad, 8.0 * x.data)


def test_no_grad_records_nothing():
    x = T([1.0])
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_dropout_modes():
    x = T(np.ones((50, 40)))
    assert ad.dropout(x, 0.3, training=False) is x
    out = ad.dropout(x, 0.25, np.random.default_rng(0), training=True).data
    assert set(np.unique(out)) <= {0.0, 1.0 / 0.75}
    assert abs(out.mean() - 1.0) < 0.05
    with pytest.raises(UsageError):
        ad.dropout(x, 0.5, None, training=True)


def test_embedding_gather_and_range():
    table = T(np.arange(12.0).reshape(4, 3))
    out = ad.embedding(table, np.array([[0, 3, 3]]))
    assert np.array_equal(out.data[0, 1], [9.0, 10.0, 11.0])
    out.sum().backward()
    assert np.array_equal(table.grad[:, 0], [1.0, 0.0, 0.0, 2.0])
    with pytest.raises(IndexError):
        ad.embedding(table, np.array([4]))


def test_attention_core_hand_example():
    q = T([[[1.0, 0.0]]])
    kv = T([[[1.0, 0.0], [0.0, 1.0]]])
    # attention_core scales by 1/sqrt(d); pre-scale q so the effective scale is 1
    out = ad.attention_core(q * math.sqrt(2.0), kv, kv, n_heads=1).data[0, 0]
    e = math.e
    assert np.allclose(out, [e / (e + 1), 1 / (e + 1)], atol=1e-12)
    assert np.allclose(out, [0.7311, 0.2689], atol=1e-4)


def test_attention_fully_masked_row_errors():
    x = T(np.ones((1, 2, 4)))
    mask = np.full((1, 1, 1, 2), -np.inf)
    with pytest.raises(NumericError):
        ad.attention_core(x, x, x, 2, mask)


# -- finite-difference checks of every primitive ------------------------------

def _check(build, *arrays_, tol=1e-6):
    """``build(*tensors)`` returns a scalar Tensor; compare tape grads to central differences."""
    tensors = [T(a.copy()) for a in arrays_]
    build(*tensors).backward()
    for t in tensors:
        def f():
            with ad.no_grad():
                return build(*tensors).item()
        numeric = fd_grad(f, t.data)
        assert max_rel_err(t.grad, numeric) < tol


PRIMITIVES = {
    "add_broadcast": (lambda a, b: ((a + b) * (a + b)).sum(), [(3, 4), (4,)]),
    "sub": (lambda a, b: ((a - b) * a).sum(), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: (a * b * b).sum(), [(2, 5), (2, 5)]),
    "scale_div": (lambda a: ((a / 3.0) * a).sum(), [(4,)]),
    "matmul_batched": (lambda a, b: ((a @ b) * (a @ b)).sum(), [(2, 3, 4), (4, 5)]),
    "matmul_bb": (lambda a, b: ((a @ b) * (a @ b)).sum(), [(2, 3, 4), (2, 4, 2)]),
    "relu": (lambda a: (ad.relu(a) * a).sum(), [(3, 5)]),
    "reshape_transpose": (lambda a: (a.reshape(4, 3).T * ad.Tensor(np.arange(12.0).reshape(3, 4))).sum(), [(3, 4)]),
    "concat": (lambda a, b: (ad.concat([a, b], axis=1) * ad.concat([b, a], axis=1)).sum(),
               [(2, 3), (2, 3)]),
    "getitem": (lambda a: (a[np.array([0, 2, 2])] * a[np.array([1, 1, 0])]).sum(), [(3, 4)]),
    "sum_mean_axis": (lambda a: (a.sum(axis=0) * a.mean(axis=0)).sum(), [(3, 4)]),
    "softmax": (lambda a: (ad.softmax(a) * ad.Tensor(np.arange(15.0).reshape(3, 5))).sum(), [(3, 5)]),
    "log_softmax": (lambda a: (ad.log_softmax(a) * ad.Tensor(np.arange(15.0).reshape(3, 5))).sum(), [(3, 5)]),
    "layer_norm": (lambda x, g, b: (ad.layer_norm(x, g, b) * ad.Tensor(np.arange(12.0).reshape(3, 4))).sum(),
                   [(3, 4), (4,), (4,)]),
    "cross_entropy": (lambda a: ad.cross_entropy_from_logits(a, np.array([1, 0, 4]), pad_id=0), [(3, 5)]),
    "kl": (lambda a: ad.kl_divergence_from_logits(a, np.arange(15.0).reshape(3, 5) / 7.0,
                                                  np.array([True, False, True])), [(3, 5)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    build, shapes = PRIMITIVES[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    _check(build, *[rng.standard_normal(s) for s in shapes])


def test_attention_core_gradient():
    rng = np.random.default_rng(3)
    mask = np.zeros((2, 1, 1, 3))
    mask[1, ..., 2] = -np.inf
    weights = rng.standard_normal((2, 4, 4))
    _check(lambda q, k, v: (ad.attention_core(q, k, v, 2, mask) * ad.Tensor(weights)).sum(),
           rng.standard_normal((2, 4, 4)), rng.standard_normal((2, 3, 4)),
           rng.standard_normal((2, 3, 4)))


def test_embedding_gradient():
    ids = np.array([[1, 1, 3], [0, 2, 1]])
    w = np.random.default_rng(4).standard_normal((2, 3, 5))
    _check(lambda t: (ad.embedding(t, ids) * ad.Tensor(w)).sum(),
           np.random.default_rng(5).standard_normal((4, 5)))


# -- properties ---------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite), st.floats(-50, 50))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    y = ad.softmax(T(x, grad=False)).data
    assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-6) and (y >= 0).all()
    assert np.allclose(ad.softmax(T(x + c, grad=False)).data, y, atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (2, 6), elements=finite), st.floats(-20, 20))
def test_layer_norm_shift_invariant(x, c):
    g, b = T(np.ones(6)), T(np.zeros(6))
    assert np.allclose(ad.layer_norm(T(x + c), g, b).data, ad.layer_norm(T(x), g, b).data, atol=1e-6)


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite))
def test_kl_nonnegative_and_zero_iff_equal(student, teacher):
    kl = ad.kl_divergence_from_logits(T(student, grad=False), teacher).item()
    assert kl >= 0.0
    assert ad.kl_divergence_from_logits(T(teacher, grad=False), teacher).item() == pytest.approx(0.0, abs=1e-12)
    p = ad.softmax(T(teacher, grad=False)).data
    q = ad.softmax(T(student, grad=False)).data
    if np.abs(p - q).max() > 1e-3:
        assert kl > 0.0


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 3), elements=finite))
def test_dropout_eval_is_identity(x):
    t = T(x)
    assert np.array_equal(ad.dropout(t, 0.5, None, training=False).data, x)


def test_float32_default_and_float64_context():
    assert ad.Tensor([1.0]).dtype == np.float32
    with ad.default_dtype(np.float64):
        assert ad.Tensor([1.0]).dtype == np.float64
    assert ad.Tensor([1.0]).dtype == np.float32
