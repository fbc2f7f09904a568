import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import check_op, dense_normalize, rel_error
from scenariogcn import tensor as tn
from scenariogcn.scene import normalize_relation
from scenariogcn.tensor import SparseRelation, Tensor

TOL = 1e-4


def away_from_zero(rng, shape, margin=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


@pytest.mark.parametrize("seed", range(5))
def test_elementwise_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert check_op(tn.add, [a, b], seed) < TOL
    assert check_op(lambda x, y: x - y, [a, b], seed) < TOL
    assert check_op(tn.mul, [a, b], seed) < TOL
    assert check_op(lambda x: tn.scale(x, np.arange(4.0)), [a], seed) < TOL
    assert check_op(tn.relu, [away_from_zero(rng, (3, 4))], seed) < TOL
    assert check_op(tn.selu, [away_from_zero(rng, (3, 4))], seed) < TOL


@pytest.mark.parametrize("seed", range(5))
def test_reduction_and_shape_gradients(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(2, 3, 4))
    assert check_op(lambda x: tn.reshape(tn.sum(x), (1,)), [a], seed) < TOL
    assert check_op(lambda x: tn.reshape(tn.mean(x), (1,)), [a], seed) < TOL
    assert check_op(lambda x: tn.sum_axis(x, 1), [a], seed) < TOL
    assert check_op(lambda x: tn.reshape(x, (6, 4)), [a], seed) < TOL
    assert check_op(lambda x: tn.transpose(x, (2, 0, 1)), [a], seed) < TOL


@pytest.mark.parametrize("seed", range(5))
def test_linear_algebra_gradients(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(5, 3)), rng.normal(size=(3, 4)), rng.normal(size=4)
    assert check_op(tn.matmul, [x, w], seed) < TOL
    assert check_op(tn.linear, [x, w, b], seed) < TOL


@pytest.mark.parametrize("seed", range(5))
def test_layer_norm_and_log_softmax_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 6)) * 3
    g, b = rng.normal(size=6), rng.normal(size=6)
    assert check_op(tn.layer_norm, [x, g, b], seed) < TOL
    assert check_op(tn.log_softmax, [x], seed) < TOL


@pytest.mark.parametrize("k,dil,pad", [(3, 1, 1), (3, 2, 2), (3, 4, 4), (7, 1, 3)])
def test_conv_gradients(k, dil, pad):
    rng = np.random.default_rng(k * 10 + dil)
    x = rng.normal(size=(2, 3, 9))
    w = rng.normal(size=(4, 3, k))
    b = rng.normal(size=4)
    op = lambda x, w, b: tn.conv1d_dilated(x, w, dil, pad, b)  # noqa: E731
    assert check_op(op, [x, w, b]) < TOL


def test_propagate_gradient():
    rng = np.random.default_rng(3)
    rel = normalize_relation(SparseRelation.from_edges(5, [(0, 1), (1, 2), (3, 1), (4, 4)]))
    h = rng.normal(size=(5, 3))
    assert check_op(lambda x: tn.propagate(rel, x), [h]) < TOL


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 11))
    w = rng.normal(size=(4, 3, 3))
    b = rng.normal(size=4)
    out = tn.conv1d_dilated(Tensor(x), Tensor(w), 2, 2, Tensor(b)).data
    xp = np.pad(x, ((0, 0), (0, 0), (2, 2)))
    ref = np.zeros((2, 4, 11))
    for n in range(2):
        for o in range(4):
            for t in range(11):
                ref[n, o, t] = b[o] + sum(w[o, c, j] * xp[n, c, t + 2 * j] for c in range(3) for j in range(3))
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_rejects_length_changing_padding():
    with pytest.raises(ValueError):
        tn.conv1d_dilated(Tensor(np.zeros((1, 2, 5))), Tensor(np.zeros((2, 2, 3))), 2, 1)
    with pytest.raises(ValueError):
        tn.conv1d_dilated(Tensor(np.zeros((1, 2, 5))), Tensor(np.zeros((2, 2, 3))), 0, 0)


def test_conv_single_frame_uses_centre_tap_only():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 1))
    w = rng.normal(size=(3, 2, 7))
    out = tn.conv1d_dilated(Tensor(x), Tensor(w), 1, 3).data
    np.testing.assert_allclose(out[0, :, 0], w[:, :, 3] @ x[0, :, 0])


def test_backward_accumulates_shared_inputs():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = tn.sum(tn.add(tn.mul(x, x), x))
    tn.backward(y)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)
    assert len(tn.current_tape()) == 0


def test_backward_rejects_non_scalar_and_constant_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        tn.backward(tn.add(x, x))
    tn.current_tape().clear()
    with pytest.raises(ValueError):
        tn.backward(tn.sum(Tensor(np.ones(3))))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with tn.no_grad():
        y = tn.sum(tn.mul(x, x))
    assert not y.requires_grad
    assert len(tn.current_tape()) == 0


def test_shape_mismatch_errors():
    with pytest.raises(ValueError):
        tn.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ValueError):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError):
        tn.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.ones(3)))


def test_selu_constants_and_values():
    x = Tensor(np.array([-1.0, 0.5]))
    out = tn.selu(x).data
    assert out[1] == pytest.approx(tn.SELU_LAMBDA * 0.5)
    assert out[0] == pytest.approx(tn.SELU_LAMBDA * tn.SELU_ALPHA * (np.exp(-1.0) - 1.0))


def test_layer_norm_rows_are_standardised():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(6, 16)) * 5 + 3
    out = tn.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(out.mean(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=1), 1, atol=1e-3)


def test_sparse_relation_validation():
    with pytest.raises(ValueError):
        SparseRelation(3, [0], [3], [1.0])
    with pytest.raises(ValueError):
        SparseRelation(3, [0], [1], [0.0])
    with pytest.raises(ValueError):
        SparseRelation(3, [0, 0], [1, 1], [1.0, 1.0])
    with pytest.raises(ValueError):
        tn.propagate(SparseRelation(2, [0], [1], [1.0]), Tensor(np.ones((2, 1))))


def test_undirected_dense_form_is_symmetric():
    rel = SparseRelation(3, [0, 0], [1, 2], [1.0, 2.0], undirected=True)
    d = rel.dense()
    np.testing.assert_array_equal(d, d.T)
    assert d[2, 0] == 2.0


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_propagate_matches_dense_oracle(n, seed):
    rng = np.random.default_rng(seed)
    a = (rng.random((n, n)) < 0.3) * rng.uniform(0.5, 2.0, (n, n))
    src, dst = np.nonzero(a)
    rel = normalize_relation(SparseRelation(n, src, dst, a[src, dst]))
    h = rng.normal(size=(n, 3))
    out = tn.propagate(rel, Tensor(h)).data
    np.testing.assert_allclose(out, dense_normalize(a) @ h, atol=1e-12)
    assert rel_error(rel.dense(), dense_normalize(a)) < 1e-12


def test_row_gather_and_embed_gradients():
    rng = np.random.default_rng(8)
    idx = np.array([3, 0, 4])
    assert check_op(lambda x: tn.take_rows(x, idx), [rng.normal(size=(6, 2))]) < TOL
    assert check_op(lambda p, f: tn.embed_rows(p, idx, 6, f), [rng.normal(size=(3, 2)), rng.normal(size=2)]) < TOL


def test_embed_rows_values():
    out = tn.embed_rows(Tensor(np.ones((1, 2))), [1], 3, Tensor(np.array([5.0, 6.0]))).data
    np.testing.assert_array_equal(out, [[5, 6], [1, 1], [5, 6]])
    with pytest.raises(ValueError):
        tn.embed_rows(Tensor(np.ones((2, 2))), [1], 3, Tensor(np.zeros(2)))


def test_subgraph_renumbers_and_refuses_to_drop_edges():
    rel = SparseRelation(5, [1, 3], [3, 3], [2.0, 1.0], normalized=True)
    sub = rel.subgraph([3, 1])
    assert sorted(sub.edges) == [(0, 0, 1.0), (1, 0, 2.0)]
    np.testing.assert_array_equal(sub.dense(), rel.dense()[np.ix_([3, 1], [3, 1])])
    with pytest.raises(ValueError):
        rel.subgraph([1])
