"""Independent reference computations used as test oracles.

Written in plain loops / dense linear algebra on purpose, sharing no code
with the package."""

import math

import numpy as np


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    if not pos or not neg:
        return float("nan")
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def ranked_labels(scores, labels, items):
    order = sorted(range(len(scores)), key=lambda k: (-scores[k], items[k]))
    return [labels[k] for k in order]


def direct_mrr(scores, labels, items):
    for r, y in enumerate(ranked_labels(scores, labels, items), 1):
        if y:
            return 1.0 / r
    return float("nan")


def direct_ndcg(scores, labels, items, k):
    ranked = ranked_labels(scores, labels, items)
    dcg = sum(1.0 / math.log2(r + 1) for r, y in enumerate(ranked, 1) if y and r <= k)
    n_pos = sum(1 for y in labels if y)
    idcg = sum(1.0 / math.log2(r + 1) for r in range(1, min(n_pos, k) + 1))
    return dcg / idcg


def dense_adjacency(n_users, n_items, edges):
    """Symmetric D^-1/2 A D^-1/2 over the bipartite graph, users first."""
    N = n_users + n_items
    A = np.zeros((N, N))
    for u, i in set(zip(*edges)):
        A[u, n_users + i] = 1.0
        A[n_users + i, u] = 1.0
    deg = A.sum(axis=1)
    inv = np.zeros(N)
    inv[deg > 0] = 1.0 / np.sqrt(deg[deg > 0])
    return inv[:, None] * A * inv[None, :]


def dense_propagation(n_users, n_items, edges, X, n_layers):
    """sum_{l=0}^{L} Â^l X via explicit matrix powers."""
    A = dense_adjacency(n_users, n_items, edges)
    out = np.zeros_like(X, dtype=np.float64)
    for l in range(n_layers + 1):
        out = out + np.linalg.matrix_power(A, l) @ X
    return out


def _sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def lstm_reference(x, h, c, gates):
    """Straight-line LSTM step; ``gates[name] = (W_x, W_h, b)`` with
    pre-activation ``x @ W_x + h @ W_h + b``."""
    d = len(h)

    def pre(name, j):
        wx, wh, b = gates[name]
        return sum(x[k] * wx[k, j] for k in range(d)) + sum(h[k] * wh[k, j] for k in range(d)) + b[j]

    h_new, c_new = np.zeros(d), np.zeros(d)
    for j in range(d):
        i = _sig(pre("input", j))
        f = _sig(pre("forget", j))
        g = math.tanh(pre("cell", j))
        o = _sig(pre("output", j))
        c_new[j] = f * c[j] + i * g
        h_new[j] = o * math.tanh(c_new[j])
    return h_new, c_new


def attention_reference(S, wq, wk, wv):
    n, d = S.shape
    Q, K, V = S @ wq, S @ wk, S @ wv
    out = np.zeros_like(S)
    for a in range(n):
        logits = [float(Q[a] @ K[b]) / math.sqrt(d) for b in range(n)]
        m = max(logits)
        w = [math.exp(v - m) for v in logits]
        z = sum(w)
        for b in range(n):
            out[a] += (w[b] / z) * V[b]
    return out + S


def adam_reference(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    traj = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        traj.append(theta)
    return traj
