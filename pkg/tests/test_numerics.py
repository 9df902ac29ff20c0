import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from taskhyper import numerics as nx
from taskhyper.numerics import FlopCounter, ShapeError, Tensor

from oracles import central_difference, rel_error


def _grad_check(build, *arrays, tol=1e-6):
    """Compare autodiff gradients of ``sum(build(*tensors) * w)`` with finite differences."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    w = np.random.default_rng(0).normal(size=out.shape)
    loss = nx.tsum(out * Tensor(w))
    nx.backward(loss)
    for t, a in zip(tensors, arrays):
        def f():
            with nx.no_grad():
                return float((build(*[Tensor(x) for x in arrays]).data * w).sum())
        num = central_difference(f, a)
        assert rel_error(t.grad, num) < tol, t.op


def _arr(*shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


@pytest.mark.parametrize("op", [nx.add, nx.sub, nx.mul, nx.div])
def test_binary_ops_with_broadcast(op):
    a = _arr(3, 4)
    b = _arr(4, seed=1) + (3.0 if op is nx.div else 0.0)
    _grad_check(op, a, b)


def test_unary_ops():
    _grad_check(nx.exp, _arr(2, 3))
    _grad_check(nx.log, np.abs(_arr(2, 3)) + 0.5)
    _grad_check(nx.gelu, _arr(4, 5))
    _grad_check(lambda a: nx.power(a, 3.0), _arr(3))


def test_gelu_is_exact_erf_form():
    x = np.linspace(-4, 4, 17)
    from math import erf, sqrt
    expect = np.array([v * 0.5 * (1 + erf(v / sqrt(2))) for v in x])
    np.testing.assert_allclose(nx.gelu(Tensor(x)).data, expect, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("sa,sb", [((3, 4), (4, 5)), ((2, 3, 4), (4, 5)), ((2, 3, 4), (2, 4, 5)),
                                   ((2, 2, 3, 4), (2, 2, 4, 3))])
def test_matmul_grads(sa, sb):
    _grad_check(nx.matmul, _arr(*sa), _arr(*sb, seed=1))


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_reductions_and_shapes():
    a = _arr(2, 3, 4)
    _grad_check(lambda x: nx.tsum(x, axis=1), a)
    _grad_check(lambda x: nx.mean(x, axis=-1, keepdims=True), a)
    _grad_check(lambda x: nx.reshape(x, (6, 4)), a)
    _grad_check(lambda x: nx.transpose(x, (2, 0, 1)), a)
    _grad_check(lambda x: nx.swapaxes(x, 0, 2), a)
    _grad_check(lambda x: nx.broadcast_to(x, (5, 2, 3, 4)), a)
    _grad_check(lambda x: x[:, 1:, ::2], a)
    _grad_check(lambda x: nx.getitem(x, (np.array([0, 1, 1]), np.array([2, 0, 2]))), a)


def test_concat_and_stack():
    _grad_check(lambda x, y: nx.concat([x, y], axis=1), _arr(2, 3), _arr(2, 5, seed=1))
    _grad_check(lambda x, y: nx.stack([x, y], axis=0), _arr(2, 3), _arr(2, 3, seed=1))


def test_embedding_repeated_ids_accumulate():
    table = _arr(6, 3)
    ids = np.array([[1, 1, 4], [0, 1, 5]])
    _grad_check(lambda t: nx.embedding(t, ids), table)


def test_fused_ops_grads():
    x = _arr(2, 3, 5)
    _grad_check(nx.softmax, x)
    _grad_check(nx.log_softmax, x)
    _grad_check(nx.rms_norm, x, _arr(5, seed=2))


def test_cross_entropy_grad_and_value():
    logits = _arr(2, 3, 7)
    targets = np.array([[1, 2, 3], [6, 0, 0]])
    mask = np.array([[1, 1, 1], [1, 0, 0]], dtype=bool)
    t = Tensor(logits, requires_grad=True)
    loss, per = nx.cross_entropy(t, targets, mask)
    lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    manual = -np.array([lp[0, 0, 1], lp[0, 1, 2], lp[0, 2, 3], lp[1, 0, 6]])
    assert loss.item() == pytest.approx(manual.mean(), rel=1e-12)
    assert per[1, 1] == 0.0
    nx.backward(loss)

    def f():
        return nx.cross_entropy(Tensor(logits), targets, mask)[0].item()
    assert rel_error(t.grad, central_difference(f, logits)) < 1e-6


def test_uniform_logits_give_log_vocab():
    loss, _ = nx.cross_entropy(Tensor(np.zeros((1, 1, 260))), np.array([[257]]))
    assert loss.item() == pytest.approx(np.log(260), rel=1e-12)


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-300, 300)))
def test_softmax_rows_sum_to_one(x):
    p = nx.softmax(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(-1), 1.0, rtol=1e-12)


@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_log_softmax_matches_log_of_softmax(x):
    np.testing.assert_allclose(nx.log_softmax(Tensor(x)).data, np.log(nx.softmax(Tensor(x)).data),
                               atol=1e-9)


@given(hnp.arrays(np.float64, (4, 6), elements=st.floats(-10, 10)), st.floats(0.1, 10))
def test_rms_norm_is_scale_invariant(x, c):
    w = Tensor(np.ones(6))
    a = nx.rms_norm(Tensor(x), w, eps=1e-30).data
    b = nx.rms_norm(Tensor(x * c), w, eps=1e-30).data
    rows = np.abs(x).sum(-1) > 1e-3
    np.testing.assert_allclose(a[rows], b[rows], atol=1e-9)


def test_shared_subexpression_gets_both_gradients():
    x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    y = x * x + x
    nx.backward(nx.tsum(y))
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_rejects_non_scalar_and_constant():
    with pytest.raises(ValueError):
        nx.backward(Tensor(np.ones(3), requires_grad=True) * 2)
    with pytest.raises(ValueError):
        nx.backward(nx.tsum(Tensor(np.ones(3))))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with nx.no_grad():
        y = x * 3
    assert not y.requires_grad and y._parents == ()
    assert nx.grad_enabled()


def test_graph_is_topological():
    x = Tensor(np.ones(2), requires_grad=True)
    a = x * 2
    b = a + x
    c = nx.tsum(b * a)
    order = nx.ComputeGraph.from_output(c).nodes
    pos = {id(n): i for i, n in enumerate(order)}
    for n in order:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]
    assert order[-1] is c


def test_flop_counter_counts_matmul_macs():
    a, b = Tensor(np.ones((2, 3, 4))), Tensor(np.ones((4, 5)))
    with FlopCounter() as fc:
        nx.matmul(a, b)
        nx.matmul(Tensor(np.ones((7, 2))), Tensor(np.ones((2, 1))))
    assert fc.macs == 2 * 3 * 4 * 5 + 7 * 2
    assert fc.flops == 2 * fc.macs
