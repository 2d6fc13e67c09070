import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from selectproto import _kernels_py, kernels

BACKENDS = kernels.available_backends()


def test_backend_selection_prefers_compiled():
    if os.environ.get("SELECTPROTO_PURE_PYTHON"):
        assert kernels.BACKEND == "python"
    elif "cython" in BACKENDS:
        assert kernels.BACKEND == "cython"
    else:
        assert kernels.BACKEND == "python"


def test_fallback_selected_by_environment():
    code = "from selectproto import kernels; print(kernels.BACKEND)"
    env = {**os.environ, "SELECTPROTO_PURE_PYTHON": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


dims = st.tuples(st.integers(1, 7), st.integers(1, 5), st.integers(1, 6))


def _inputs(m, n, e, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(m, e))
    p = rng.normal(size=(n, e))
    y = rng.integers(0, n, size=m).astype(np.int64)
    w = rng.uniform(0.05, 1.0, size=m)
    return z, p, y, w


@pytest.mark.parametrize("name", sorted(BACKENDS))
@given(shape=dims, seed=st.integers(0, 10_000))
def test_pairwise_sqdist_brute_force(name, shape, seed):
    k = BACKENDS[name]
    z, p, _, _ = _inputs(*shape, seed)
    d = k.pairwise_sqdist(z, p)
    for i in range(z.shape[0]):
        for j in range(p.shape[0]):
            assert math.isclose(d[i, j], oracles.sqdist(z[i], p[j]), rel_tol=1e-12, abs_tol=1e-12)
    assert (d >= 0).all()


@pytest.mark.parametrize("name", sorted(BACKENDS))
@given(shape=dims, seed=st.integers(0, 10_000))
def test_pairwise_sqdist_backward_matches_chain_rule(name, shape, seed):
    k = BACKENDS[name]
    z, p, _, _ = _inputs(*shape, seed)
    g = np.random.default_rng(seed + 1).normal(size=(z.shape[0], p.shape[0]))
    ga, gb = k.pairwise_sqdist_backward(z, p, g)
    ref_a = np.zeros_like(z)
    ref_b = np.zeros_like(p)
    for i in range(z.shape[0]):
        for j in range(p.shape[0]):
            ref_a[i] += 2 * g[i, j] * (z[i] - p[j])
            ref_b[j] -= 2 * g[i, j] * (z[i] - p[j])
    np.testing.assert_allclose(ga, ref_a, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(gb, ref_b, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("name", sorted(BACKENDS))
@given(shape=dims, seed=st.integers(0, 10_000), scale=st.sampled_from([1.0, 50.0, 800.0]))
def test_proto_xent_matches_scalar_oracle(name, shape, seed, scale):
    k = BACKENDS[name]
    m, n, _ = shape
    rng = np.random.default_rng(seed)
    d = rng.uniform(0, scale, size=(m, n))
    y = rng.integers(0, n, size=m).astype(np.int64)
    loss, grad = k.proto_xent(d, y)
    ref = sum(d[i, y[i]] + oracles.logsumexp([-x for x in d[i]]) for i in range(m)) / m
    assert math.isclose(loss, ref, rel_tol=1e-12, abs_tol=1e-12)
    for i in range(m):
        post = oracles.softmax([-x for x in d[i]])
        for j in range(n):
            want = ((1.0 if j == y[i] else 0.0) - post[j]) / m
            assert math.isclose(grad[i, j], want, rel_tol=1e-9, abs_tol=1e-12)


@pytest.mark.parametrize("name", sorted(BACKENDS))
@pytest.mark.parametrize("normalize", [False, True])
@given(seed=st.integers(0, 10_000), n=st.integers(1, 4), k=st.integers(1, 4), e=st.integers(1, 5))
def test_segment_weighted_mean_forward_and_backward(name, normalize, seed, n, k, e):
    kern = BACKENDS[name]
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.repeat(np.arange(n), k)).astype(np.int64)
    z = rng.normal(size=(n * k, e))
    w = rng.uniform(0.05, 1.0, size=n * k)
    out = kern.segment_weighted_mean(z, w, labels, n, normalize)
    for c in range(n):
        idx = [i for i in range(n * k) if labels[i] == c]
        div = sum(w[i] for i in idx) if normalize else len(idx)
        for j in range(e):
            assert math.isclose(out[c, j], sum(w[i] * z[i, j] for i in idx) / div, rel_tol=1e-12, abs_tol=1e-13)

    g = rng.normal(size=(n, e))

    def f_z(flat):
        return float(np.sum(g * _kernels_py.segment_weighted_mean(np.array(flat).reshape(z.shape), w, labels, n, normalize)))

    def f_w(flat):
        return float(np.sum(g * _kernels_py.segment_weighted_mean(z, np.array(flat), labels, n, normalize)))

    gz, gw = kern.segment_weighted_mean_backward(z, w, labels, n, g, normalize)
    np.testing.assert_allclose(gz.ravel(), oracles.central_diff(f_z, list(z.ravel())), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(gw, oracles.central_diff(f_w, list(w)), rtol=1e-6, atol=1e-8)


@given(shape=dims, seed=st.integers(0, 10_000))
def test_backends_agree(shape, seed):
    if len(BACKENDS) < 2:
        pytest.skip("only one backend importable")
    py, cy = BACKENDS["python"], BACKENDS["cython"]
    z, p, y, w = _inputs(*shape, seed)
    n = p.shape[0]
    np.testing.assert_allclose(cy.pairwise_sqdist(z, p), py.pairwise_sqdist(z, p), rtol=1e-12, atol=1e-12)
    d = py.pairwise_sqdist(z, p)
    lc, gc = cy.proto_xent(d, y)
    lp, gp = py.proto_xent(d, y)
    assert math.isclose(lc, lp, rel_tol=1e-12, abs_tol=1e-12)
    np.testing.assert_allclose(gc, gp, rtol=1e-10, atol=1e-14)
    if z.shape[0] < n:
        return  # an empty class is rejected before the kernel is reached
    labels = (np.arange(z.shape[0]) % n).astype(np.int64)
    np.testing.assert_allclose(cy.segment_weighted_mean(z, w, labels, n, False),
                               py.segment_weighted_mean(z, w, labels, n, False), rtol=1e-12, atol=1e-14)


def test_proto_xent_is_stable_for_huge_distances():
    for k in BACKENDS.values():
        d = np.array([[1e5, 0.0], [0.0, 1e5]])
        loss, grad = k.proto_xent(d, np.array([1, 0], dtype=np.int64))
        assert np.isfinite(loss) and np.isfinite(grad).all()
        assert loss == pytest.approx(0.0, abs=1e-12)
