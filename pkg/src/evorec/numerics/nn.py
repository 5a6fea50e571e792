"""The two neural kernels: a standard LSTM cell and one residual
scaled-dot-product self-attention layer.  Both run on ``Var`` so gradients come
for free; plain arrays are accepted and wrapped."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import EmptyPrefixError, ShapeError
from . import autograd as ag

GATES = ("input", "forget", "cell", "output")


@dataclass
class LstmWeights:
    """Gate blocks are packed column-wise in ``GATES`` order: ``w_x[:, k*d:(k+1)*d]``
    is the d x d input matrix of gate k, likewise ``w_h`` and ``b``."""

    w_x: object
    w_h: object
    b: object

    @property
    def dim(self):
        return _shape(self.w_x)[0]

    def gate(self, name):
        k = GATES.index(name)
        d = self.dim
        sl = slice(k * d, (k + 1) * d)
        return _arr(self.w_x)[:, sl], _arr(self.w_h)[:, sl], _arr(self.b)[sl]

    @classmethod
    def from_gates(cls, gates):
        """``gates`` maps gate name -> (W_x, W_h, b) with d x d matrices."""
        w_x = np.concatenate([gates[g][0] for g in GATES], axis=1)
        w_h = np.concatenate([gates[g][1] for g in GATES], axis=1)
        b = np.concatenate([gates[g][2] for g in GATES])
        return cls(w_x, w_h, b)

    @classmethod
    def zeros(cls, d, dtype=np.float64):
        return cls(np.zeros((d, 4 * d), dtype), np.zeros((d, 4 * d), dtype), np.zeros(4 * d, dtype))

    @classmethod
    def random(cls, d, rng, scale=None, dtype=np.float64):
        s = (1.0 / math.sqrt(d)) if scale is None else scale
        return cls(
            (rng.standard_normal((d, 4 * d)) * s).astype(dtype),
            (rng.standard_normal((d, 4 * d)) * s).astype(dtype),
            np.zeros(4 * d, dtype),
        )


@dataclass
class AttentionWeights:
    w_q: object
    w_k: object
    w_v: object

    @classmethod
    def identity(cls, d, dtype=np.float64):
        eye = np.eye(d, dtype=dtype)
        return cls(eye, eye.copy(), eye.copy())

    @classmethod
    def random(cls, d, rng, scale=None, dtype=np.float64):
        s = (1.0 / math.sqrt(d)) if scale is None else scale
        return cls(*[(rng.standard_normal((d, d)) * s).astype(dtype) for _ in range(3)])


def _arr(x):
    return x.data if isinstance(x, ag.Var) else np.asarray(x)


def _shape(x):
    return tuple(_arr(x).shape)


def _check(name, x, expected):
    got = _shape(x)
    if got != tuple(expected):
        raise ShapeError(name, tuple(expected), got)


def lstm_cell(x, h_prev, c_prev, w: LstmWeights):
    """One LSTM step.  ``x``/``h_prev``/``c_prev`` are (d,) or (n, d)."""
    d = w.dim
    _check("w_x", w.w_x, (d, 4 * d))
    _check("w_h", w.w_h, (d, 4 * d))
    _check("b", w.b, (4 * d,))
    lead = _shape(x)[:-1]
    _check("x", x, lead + (d,))
    _check("h_prev", h_prev, lead + (d,))
    _check("c_prev", c_prev, lead + (d,))

    z = ag.matmul(x, w.w_x) + ag.matmul(h_prev, w.w_h) + w.b
    i = ag.sigmoid(z[..., 0:d])
    f = ag.sigmoid(z[..., d:2 * d])
    g = ag.tanh(z[..., 2 * d:3 * d])
    o = ag.sigmoid(z[..., 3 * d:4 * d])
    c = f * c_prev + i * g
    h = o * ag.tanh(c)
    return h, c


def self_attention_layer(S, w: AttentionWeights, key_mask=None, dropout=0.0, rng=None, return_weights=False):
    """``S + softmax(Q K^T / sqrt(d)) V`` with Q, K, V = S W_q, S W_k, S W_v.

    ``S`` is (n, d) or (batch, n, d).  ``key_mask`` (same leading shape as S
    without d) marks real tokens; padded keys get zero attention weight.
    """
    shp = _shape(S)
    if len(shp) < 2 or shp[-2] == 0:
        raise EmptyPrefixError("self-attention needs at least one token")
    d = shp[-1]
    for name in ("w_q", "w_k", "w_v"):
        _check(name, getattr(w, name), (d, d))

    q = ag.matmul(S, w.w_q)
    k = ag.matmul(S, w.w_k)
    v = ag.matmul(S, w.w_v)
    scores = ag.matmul(q, ag.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d))
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)
        penalty = np.where(km, 0.0, -1e30).astype(scores.dtype)
        scores = scores + penalty[..., None, :]
    attn = ag.softmax(scores, axis=-1)
    mixed = ag.dropout(ag.matmul(attn, v), dropout, rng)
    out = mixed + S
    if return_weights:
        return out, attn.data
    return out
