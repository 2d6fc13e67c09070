import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from selectproto import diffcore as dc
from selectproto.diffcore import Tensor
from selectproto.errors import ContractError, DimensionError, NumericError


def param(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def away_from_zero(rng, *shape, margin=0.1):
    x = rng.uniform(margin, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(x, requires_grad=True)


def check(loss_fn, params, tol=1e-4):
    res = dc.finite_diff_check(loss_fn, params, eps=1e-4)
    assert res.nan_count == 0
    assert res.max_rel_error < tol, res


# ---------------------------------------------------------------- per-op finite differences

# Each case builds fresh params and returns (params, scalar loss closure). A random
# projection of the output makes every output coordinate matter.

def _proj(t, rng):
    w = Tensor(rng.normal(size=t.shape))
    return dc.tsum(t * w)


OP_CASES = {
    "add_broadcast": lambda r: ((a := param(r, 3, 4)), (b := param(r, 4)),
                                lambda: _proj(a + b, np.random.default_rng(0))),
    "sub_broadcast_col": lambda r: ((a := param(r, 3, 4)), (b := param(r, 3, 1)),
                                    lambda: _proj(a - b, np.random.default_rng(0))),
    "mul": lambda r: ((a := param(r, 3, 4)), (b := param(r, 3, 4)),
                      lambda: _proj(a * b, np.random.default_rng(0))),
    "div": lambda r: ((a := param(r, 2, 3)), (b := param(r, 2, 3, low=0.5, high=2.0)),
                      lambda: _proj(a / b, np.random.default_rng(0))),
    "neg_scalar_mix": lambda r: ((a := param(r, 5)), (b := param(r, 1)),
                                 lambda: _proj(-a * 3.0 + b, np.random.default_rng(0))),
    "relu": lambda r: ((a := away_from_zero(r, 4, 3)), (b := param(r, 1)),
                       lambda: _proj(dc.relu(a) + b, np.random.default_rng(0))),
    "sigmoid": lambda r: ((a := param(r, 4, 3, low=-4, high=4)), (b := param(r, 1)),
                          lambda: _proj(dc.sigmoid(a) * b, np.random.default_rng(0))),
    "exp": lambda r: ((a := param(r, 3, 2)), (b := param(r, 1)),
                      lambda: _proj(dc.exp(a) + b, np.random.default_rng(0))),
    "log": lambda r: ((a := param(r, 3, 2, low=0.2, high=3.0)), (b := param(r, 1)),
                      lambda: _proj(dc.log(a) + b, np.random.default_rng(0))),
    "sqrt": lambda r: ((a := param(r, 6, low=0.2, high=3.0)), (b := param(r, 1)),
                       lambda: _proj(dc.sqrt(a) + b, np.random.default_rng(0))),
    "sum_axis0": lambda r: ((a := param(r, 3, 4)), (b := param(r, 1)),
                            lambda: _proj(dc.tsum(a, axis=0) * b, np.random.default_rng(0))),
    "sum_axis1": lambda r: ((a := param(r, 3, 4)), (b := param(r, 1)),
                            lambda: _proj(dc.tsum(a, axis=1) * b, np.random.default_rng(0))),
    "mean": lambda r: ((a := param(r, 3, 4)), (b := param(r, 1)),
                       lambda: dc.mean(a * a) * b.sum()),
    "reshape": lambda r: ((a := param(r, 3, 4)), (b := param(r, 2, 6)),
                          lambda: _proj(dc.reshape(a, (2, 6)) * b, np.random.default_rng(0))),
    "take_rows": lambda r: ((a := param(r, 5, 3)), (b := param(r, 1)),
                            lambda: _proj(dc.take(a, np.array([0, 2, 2, 4])) * b, np.random.default_rng(0))),
    "stack": lambda r: ((a := param(r, 3)), (b := param(r, 3)),
                        lambda: _proj(dc.stack([a, b, a]), np.random.default_rng(0))),
    "matmul": lambda r: ((a := param(r, 3, 4)), (b := param(r, 4, 2)),
                         lambda: _proj(a @ b, np.random.default_rng(0))),
    "softmax_rows": lambda r: ((a := param(r, 3, 4, low=-3, high=3)), (b := param(r, 1)),
                               lambda: _proj(dc.softmax(a, axis=-1) * b, np.random.default_rng(0))),
    "softmax_vector": lambda r: ((a := param(r, 5, low=-3, high=3)), (b := param(r, 1)),
                                 lambda: _proj(dc.softmax(a) + b, np.random.default_rng(0))),
    "logsumexp_rows": lambda r: ((a := param(r, 3, 4, low=-3, high=3)), (b := param(r, 1)),
                                 lambda: _proj(dc.logsumexp(a, axis=-1) * b, np.random.default_rng(0))),
    "logsumexp_vector": lambda r: ((a := param(r, 5, low=-3, high=3)), (b := param(r, 1)),
                                   lambda: dc.logsumexp(a) * b.sum()),
    "squared_euclidean": lambda r: ((a := param(r, 4)), (b := param(r, 4)),
                                    lambda: dc.squared_euclidean(a, b)),
    "pairwise_sqdist": lambda r: ((a := param(r, 4, 3)), (b := param(r, 2, 3)),
                                  lambda: _proj(dc.pairwise_sqdist(a, b), np.random.default_rng(0))),
    "proto_cross_entropy": lambda r: ((a := param(r, 4, 3, low=0.0, high=3.0)), (b := param(r, 1)),
                                      lambda: dc.proto_cross_entropy(a * b.sum(), np.array([0, 2, 1, 2]))),
    "segment_weighted_mean": lambda r: ((a := param(r, 6, 3)), (b := param(r, 6, low=0.1, high=1.0)),
                                        lambda: _proj(dc.segment_weighted_mean(a, b, np.array([0, 1, 0, 2, 1, 2]), 3),
                                                      np.random.default_rng(0))),
    "segment_weighted_mean_normalized": lambda r: (
        (a := param(r, 6, 3)), (b := param(r, 6, low=0.1, high=1.0)),
        lambda: _proj(dc.segment_weighted_mean(a, b, np.array([0, 1, 0, 2, 1, 2]), 3, True),
                      np.random.default_rng(0))),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_op_gradient_matches_finite_differences(name, seed):
    a, b, fn = OP_CASES[name](np.random.default_rng(seed))
    check(fn, [a, b])


def test_softmax_cross_entropy_composite():
    rng = np.random.default_rng(5)
    logits = param(rng, 4, 3, low=-2, high=2)
    onehot = Tensor(np.eye(3)[[0, 2, 1, 1]])

    def loss():
        return -dc.mean(dc.tsum(onehot * dc.log(dc.softmax(logits, axis=-1)), axis=1))

    check(loss, [logits])


# ---------------------------------------------------------------- examples


def test_matmul_examples():
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ Tensor([[1, 2], [3, 4]])).values, [[1, 2], [3, 4]])
    assert (Tensor([[1, 2]]) @ Tensor([[3], [4]])).values.tolist() == [[11.0]]
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        dc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


def test_softmax_examples():
    np.testing.assert_allclose(dc.softmax(Tensor([0, 0, 0, 0])).values, [0.25] * 4, atol=1e-15)
    np.testing.assert_allclose(dc.softmax(Tensor([math.log(2), 0, 0])).values, [0.5, 0.25, 0.25], atol=1e-15)
    s = dc.softmax(Tensor([1000.0, 0.0])).values
    assert np.isfinite(s).all() and s[0] == pytest.approx(1.0) and s[1] == pytest.approx(0.0, abs=1e-300)
    with pytest.raises(DimensionError):
        dc.softmax(Tensor(np.array([])))


def test_squared_euclidean_examples():
    assert dc.squared_euclidean(Tensor([1.5, -2.0]), Tensor([1.5, -2.0])).item() == 0.0
    assert dc.squared_euclidean(Tensor([0, 0]), Tensor([3, 4])).item() == 25.0
    a = Tensor([1.0], requires_grad=True)
    dc.backward(dc.squared_euclidean(a, Tensor([0.0])))
    assert a.grad.tolist() == [2.0]
    with pytest.raises(DimensionError):
        dc.squared_euclidean(Tensor([1.0, 2.0]), Tensor([1.0]))


def test_logsumexp_examples():
    assert dc.logsumexp(Tensor([0.0])).item() == 0.0
    assert dc.logsumexp(Tensor([0.0, 0.0])).item() == pytest.approx(0.693147, abs=1e-6)
    v = dc.logsumexp(Tensor([-1000.0, 0.0])).item()
    assert np.isfinite(v) and v == pytest.approx(0.0, abs=1e-300)
    with pytest.raises(DimensionError):
        dc.logsumexp(Tensor(np.array([])))


def test_backward_examples():
    x = Tensor([3.0], requires_grad=True)
    dc.backward(dc.tsum(x * x))
    assert x.grad.tolist() == [6.0]
    c = Tensor([1.0, 2.0])
    dc.backward(dc.tsum(c * c))  # constant graph: nothing to accumulate
    assert c.grad is None
    y = Tensor([1.0, 2.0], requires_grad=True)
    z = Tensor([5.0])
    dc.backward(dc.tsum(z * z) + 0.0 * dc.tsum(y))
    np.testing.assert_array_equal(y.grad, [0.0, 0.0])


def test_backward_rejects_non_scalar_and_nan():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        dc.backward(x * 2.0)
    bad = Tensor([-1.0], requires_grad=True)
    with pytest.raises(NumericError, match="log"):
        dc.backward(dc.tsum(dc.log(bad)))
    zero = Tensor([0.0], requires_grad=True)
    with pytest.raises(NumericError, match="sqrt"):
        dc.backward(dc.tsum(dc.sqrt(zero)))


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor([0.0, 1.0, -1.0], requires_grad=True)
    dc.backward(dc.tsum(dc.relu(x)))
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_tensor_contract():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((2, 2, 2)))
    t = Tensor([[1.0, 2.0]], requires_grad=True)
    assert t.size == 2 and t.shape == (1, 2)
    dc.backward(dc.tsum(t * t))
    assert t.grad.shape == t.values.shape


def test_graph_is_topologically_ordered():
    rng = np.random.default_rng(0)
    a, b = param(rng, 3, 2), param(rng, 2, 2)
    h = dc.relu(a @ b)
    root = dc.tsum(h * h + h)
    g = dc.Graph.build(root)
    pos = {id(n): i for i, n in enumerate(g.nodes)}
    assert g.nodes[-1] is root
    for node in g.nodes:
        for parent in node.parents:
            assert pos[id(parent)] < pos[id(node)]
    assert len(pos) == len(g.nodes)


def test_shared_subexpression_accumulates():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    dc.backward(dc.tsum(y + y * y))  # d/dx (x^2 + x^4) = 2x + 4x^3
    assert x.grad[0] == pytest.approx(4.0 + 32.0)


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_is_noop_and_counts():
    p = Tensor([1.0, -2.0], requires_grad=True)
    p.grad = np.zeros(2)
    st_ = dc.AdamState.for_params([p])
    dc.adam_step([p], st_, lr=0.1)
    assert p.values.tolist() == [1.0, -2.0]
    assert st_.step_count == 1


def test_adam_first_step_is_about_lr():
    p = Tensor([0.0], requires_grad=True)
    p.grad = np.array([1.0])
    dc.adam_step([p], dc.AdamState.for_params([p]), lr=0.1)
    assert p.values[0] == pytest.approx(-0.1, rel=1e-6)


def test_adam_matches_scalar_trace():
    grads = [0.3, -1.2, 0.7, 0.7, 2.0]
    p = Tensor([0.5], requires_grad=True)
    state = dc.AdamState.for_params([p])
    ref = oracles.adam_trace(grads, lr=0.01, x0=0.5)
    for g, want in zip(grads, ref):
        p.grad = np.array([g])
        dc.adam_step([p], state, lr=0.01)
        assert p.values[0] == pytest.approx(want, rel=1e-12, abs=1e-15)
    assert state.step_count == len(grads)


def test_adam_leaves_grads_and_checks_shapes():
    p = Tensor([[1.0, 2.0]], requires_grad=True)
    p.grad = np.array([[0.5, 0.5]])
    dc.adam_step([p], dc.AdamState.for_params([p]))
    assert p.grad.tolist() == [[0.5, 0.5]]
    with pytest.raises(ContractError):
        dc.adam_step([p], dc.AdamState(0, [np.zeros(3)], [np.zeros(3)]))
    with pytest.raises(ContractError):
        dc.adam_step([p, p], dc.AdamState.for_params([p]))


def test_adam_class_wrapper():
    x = Tensor([3.0], requires_grad=True)
    opt = dc.Adam([x], lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        dc.backward(dc.tsum(x * x))
        opt.step()
    assert abs(x.values[0]) < 0.05


# ---------------------------------------------------------------- finite_diff_check


def test_finite_diff_check_quadratic():
    x = Tensor([1.0, -2.0, 0.5], requires_grad=True)
    assert dc.finite_diff_check(lambda: dc.tsum(x * x * 3.0), [x]).max_rel_error < 1e-6


def test_finite_diff_check_detects_wrong_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)

    def wrong():
        # relu kink at 0 reached only through finite differences: grad mismatch surfaces
        out = dc.tsum(x * x)
        out._backward = lambda g: (g * 0.0, g * 0.0)
        return dc.tsum(x * 1.0) + out

    assert dc.finite_diff_check(wrong, [x]).max_rel_error > 0.1


def test_finite_diff_check_reports_nans():
    x = Tensor([0.5], requires_grad=True)

    def fn():
        # log is finite at x but not at x - eps for this tiny x
        return dc.tsum(dc.log(x - 0.5 + 1e-5))

    res = dc.finite_diff_check(fn, [x], eps=1e-4)
    assert res.nan_count == 1 and math.isnan(res.max_rel_error)


# ---------------------------------------------------------------- properties

finite = st.floats(-30, 30, allow_nan=False)


@given(arrays(np.float64, st.integers(1, 12), elements=finite))
def test_softmax_sums_to_one_and_permutes(v):
    s = dc.softmax(Tensor(v)).values
    assert abs(s.sum() - 1.0) < 1e-9
    assert (s > 0).all()
    perm = np.random.default_rng(len(v)).permutation(len(v))
    np.testing.assert_allclose(dc.softmax(Tensor(v[perm])).values, s[perm], rtol=1e-12, atol=1e-300)
    np.testing.assert_allclose(s, oracles.softmax(list(v)), rtol=1e-12, atol=1e-300)


@given(arrays(np.float64, st.integers(1, 12), elements=finite))
def test_logsumexp_bounds(v):
    lse = dc.logsumexp(Tensor(v)).item()
    assert lse >= v.max() - 1e-12
    assert lse <= v.max() + math.log(len(v)) + 1e-12


@given(seed=st.integers(0, 10_000))
def test_backward_twice_doubles(seed):
    rng = np.random.default_rng(seed)
    a, b = param(rng, 3, 2), param(rng, 2)
    root = dc.tsum(dc.sigmoid(a * b) * a) + dc.logsumexp(dc.reshape(a, (6,)))
    dc.backward(root)
    once = (a.grad.copy(), b.grad.copy())
    dc.backward(root)
    np.testing.assert_array_equal(a.grad, 2 * once[0])
    np.testing.assert_array_equal(b.grad, 2 * once[1])


@given(seed=st.integers(0, 10_000), steps=st.integers(0, 5))
def test_adam_zero_grads_noop_for_any_state(seed, steps):
    rng = np.random.default_rng(seed)
    p = param(rng, 2, 3)
    state = dc.AdamState.for_params([p])
    for _ in range(steps):
        p.grad = rng.normal(size=(2, 3))
        dc.adam_step([p], state)
    before = p.values.copy()
    p.grad = np.zeros((2, 3))
    dc.adam_step([p], state, lr=0.5)
    np.testing.assert_array_equal(p.values, before)
