"""Hot loops, each in two flavours: a numba ``@njit`` kernel and a plain numpy
reference.  Both perform the same arithmetic in the same order, so results
agree bit for bit.

Set ``EVOREC_DISABLE_NUMBA=1`` before import to force the numpy path.
"""

from __future__ import annotations

import os

import numpy as np

DISABLE_ENV = "EVOREC_DISABLE_NUMBA"

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get(DISABLE_ENV, "").strip().lower() not in {"1", "true", "yes", "on"}


def _njit(fn):
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------------------
# sparse propagation: out[dst[k]] += coef[k] * x[src[k]]
# ---------------------------------------------------------------------------


def spmm_numpy(dst, src, coef, x, n_out):
    out = np.zeros((n_out, x.shape[1]), dtype=x.dtype)
    if len(dst):
        np.add.at(out, dst, coef.astype(x.dtype)[:, None] * x[src])
    return out


@_njit
def _spmm_loop(dst, src, coef, x, out):
    d = x.shape[1]
    for k in range(dst.shape[0]):
        r = dst[k]
        s = src[k]
        c = coef[k]
        for j in range(d):
            out[r, j] += c * x[s, j]


def spmm_numba(dst, src, coef, x, n_out):
    x = np.ascontiguousarray(x)
    out = np.zeros((n_out, x.shape[1]), dtype=x.dtype)
    _spmm_loop(dst, src, coef.astype(x.dtype), x, out)
    return out


# ---------------------------------------------------------------------------
# row scatter-add (adjoint of a row gather)
# ---------------------------------------------------------------------------


def _flat_rows(idx, vals):
    return vals.reshape(len(idx), int(np.prod(vals.shape[1:], dtype=np.int64)))


def index_add_numpy(n_rows, idx, vals):
    flat = _flat_rows(idx, vals)
    out = np.zeros((n_rows, flat.shape[1]), dtype=vals.dtype)
    if len(idx):
        np.add.at(out, idx, flat)
    return out.reshape((n_rows,) + vals.shape[1:])


@_njit
def _index_add_loop(idx, vals, out):
    d = vals.shape[1]
    for k in range(idx.shape[0]):
        r = idx[k]
        for j in range(d):
            out[r, j] += vals[k, j]


def index_add_numba(n_rows, idx, vals):
    flat = np.ascontiguousarray(_flat_rows(idx, vals))
    out = np.zeros((n_rows, flat.shape[1]), dtype=vals.dtype)
    _index_add_loop(idx, flat, out)
    return out.reshape((n_rows,) + vals.shape[1:])


# ---------------------------------------------------------------------------
# per-impression AUC: (wins + 0.5 * ties) / (n_pos * n_neg), NaN when undefined
# ---------------------------------------------------------------------------


def impression_auc_numpy(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    pos = labels.astype(bool)
    neg = ~pos
    gt = scores[:, :, None] > scores[:, None, :]
    eq = scores[:, :, None] == scores[:, None, :]
    pair = pos[:, :, None] & neg[:, None, :]
    credit = (gt & pair).sum(axis=(1, 2)) + 0.5 * (eq & pair).sum(axis=(1, 2))
    n_pairs = pair.sum(axis=(1, 2))
    out = np.full(len(scores), np.nan)
    ok = n_pairs > 0
    out[ok] = credit[ok] / n_pairs[ok]
    return out


@_njit
def _impression_auc_loop(scores, labels, out):
    n, c = scores.shape
    for r in range(n):
        credit = 0.0
        pairs = 0
        for a in range(c):
            if labels[r, a] == 0:
                continue
            for b in range(c):
                if labels[r, b] != 0:
                    continue
                pairs += 1
                if scores[r, a] > scores[r, b]:
                    credit += 1.0
                elif scores[r, a] == scores[r, b]:
                    credit += 0.5
        out[r] = credit / pairs if pairs > 0 else np.nan


def impression_auc_numba(scores, labels):
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    out = np.empty(len(scores))
    _impression_auc_loop(scores, np.ascontiguousarray(labels, dtype=np.int64), out)
    return out


# ---------------------------------------------------------------------------
# uniform sampling without replacement from [0, n_items) minus an excluded set.
# Floyd's algorithm picks k distinct ranks in the reduced pool; ranks are then
# mapped past the (sorted) excluded items.  Uniform draws come from the caller
# so both paths consume identical randomness.
# ---------------------------------------------------------------------------


def sample_excluding_numpy(excl_ptr, excl_items, n_items, uniforms):
    n_rows, k = uniforms.shape
    out = np.empty((n_rows, k), dtype=np.int64)
    for r in range(n_rows):
        excl = excl_items[excl_ptr[r]:excl_ptr[r + 1]]
        pool = n_items - len(excl)
        chosen = []
        for step, j in enumerate(range(pool - k, pool)):
            t = int(uniforms[r, step] * (j + 1))
            if t > j:
                t = j
            chosen.append(j if t in chosen else t)
        for step, rank in enumerate(chosen):
            item = rank
            for e in excl:
                if e <= item:
                    item += 1
                else:
                    break
            out[r, step] = item
    return out


@_njit
def _sample_excluding_loop(excl_ptr, excl_items, n_items, uniforms, out):
    n_rows, k = uniforms.shape
    chosen = np.empty(k, dtype=np.int64)
    for r in range(n_rows):
        lo = excl_ptr[r]
        hi = excl_ptr[r + 1]
        pool = n_items - (hi - lo)
        step = 0
        for j in range(pool - k, pool):
            t = np.int64(uniforms[r, step] * (j + 1))
            if t > j:
                t = j
            dup = False
            for q in range(step):
                if chosen[q] == t:
                    dup = True
                    break
            chosen[step] = j if dup else t
            step += 1
        for q in range(k):
            item = chosen[q]
            for e in range(lo, hi):
                if excl_items[e] <= item:
                    item += 1
                else:
                    break
            out[r, q] = item


def sample_excluding_numba(excl_ptr, excl_items, n_items, uniforms):
    out = np.empty(uniforms.shape, dtype=np.int64)
    _sample_excluding_loop(
        np.asarray(excl_ptr, dtype=np.int64),
        np.asarray(excl_items, dtype=np.int64),
        np.int64(n_items),
        np.ascontiguousarray(uniforms, dtype=np.float64),
        out,
    )
    return out


if USE_NUMBA:
    spmm = spmm_numba
    index_add = index_add_numba
    impression_auc = impression_auc_numba
    sample_excluding = sample_excluding_numba
else:
    spmm = spmm_numpy
    index_add = index_add_numpy
    impression_auc = impression_auc_numpy
    sample_excluding = sample_excluding_numpy


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
