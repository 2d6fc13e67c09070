"""Numpy implementations of the episode-head kernels.

Used when the compiled ``_kernels`` extension is unavailable, and as the
reference the compiled kernels are tested against. Every function takes and
returns float64 C-contiguous arrays; label arrays are int64.
"""

import numpy as np


def pairwise_sqdist(a, b):
    """Squared Euclidean distances between the rows of ``a`` (m, e) and ``b`` (n, e)."""
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("mne,mne->mn", diff, diff)


def pairwise_sqdist_backward(a, b, g):
    # d/da_i = 2 sum_j g_ij (a_i - b_j); d/db_j = -2 sum_i g_ij (a_i - b_j)
    row = g.sum(axis=1)
    col = g.sum(axis=0)
    ga = 2.0 * (a * row[:, None] - g @ b)
    gb = 2.0 * (b * col[:, None] - g.T @ a)
    return ga, gb


def proto_xent(d, y):
    """Mean over rows of ``d[i, y_i] + logsumexp(-d[i, :])`` and its gradient wrt ``d``."""
    m = d.shape[0]
    neg = -d
    top = neg.max(axis=1, keepdims=True)
    e = np.exp(neg - top)
    s = e.sum(axis=1, keepdims=True)
    lse = (top + np.log(s))[:, 0]
    rows = np.arange(m)
    loss = float(np.mean(d[rows, y] + lse))
    grad = -e / s
    grad[rows, y] += 1.0
    grad /= m
    return loss, grad


def segment_weighted_mean(z, w, labels, n, normalize):
    """Per-class weighted sums of rows of ``z`` divided by count (or by weight sum)."""
    e = z.shape[1]
    out = np.zeros((n, e))
    np.add.at(out, labels, z * w[:, None])
    if normalize:
        denom = np.bincount(labels, weights=w, minlength=n)
    else:
        denom = np.bincount(labels, minlength=n).astype(np.float64)
    out /= denom[:, None]
    return out


def segment_weighted_mean_backward(z, w, labels, n, g, normalize):
    if normalize:
        denom = np.bincount(labels, weights=w, minlength=n)
        c = segment_weighted_mean(z, w, labels, n, True)
        gl = g[labels] / denom[labels, None]
        gz = gl * w[:, None]
        gw = np.einsum("se,se->s", z - c[labels], gl)
    else:
        denom = np.bincount(labels, minlength=n).astype(np.float64)
        gl = g[labels] / denom[labels, None]
        gz = gl * w[:, None]
        gw = np.einsum("se,se->s", z, gl)
    return gz, gw
