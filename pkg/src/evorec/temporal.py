"""Local preference modelling: per-node LSTM over stage tables and
self-attention over each user's cumulative click prefix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyPrefixError, ShapeError
from .numerics import autograd as ag
from .numerics.nn import LstmWeights, lstm_cell, self_attention_layer


@dataclass
class StageState:
    """Evolved tables per stage plus the final recurrent state."""

    evolved: list  # per stage, (N, d)
    hidden: object
    cell: object

    @property
    def n_stages(self):
        return len(self.evolved)


@dataclass
class PrefixSequence:
    user: int
    stage: int
    items: np.ndarray
    tokens: object  # (n, d)

    def __len__(self):
        return len(self.items)


def _values(t):
    return getattr(t, "values", t)


def _run_lstm(inputs, w: LstmWeights):
    n, d = inputs[0].shape
    dtype = inputs[0].dtype
    h = ag.Var(np.zeros((n, d), dtype))
    c = ag.Var(np.zeros((n, d), dtype))
    hs = []
    for x in inputs:
        h, c = lstm_cell(x, h, c, w)
        hs.append(h)
    return hs, h, c


def short_term_evolve(stage_tables, user_weights: LstmWeights, item_weights: LstmWeights, n_users):
    """Run one LSTM per node over the stage sequence (zero initial state).

    Users and items use separate weights.  The output at stage t depends only
    on stage tables 0..t.
    """
    if len(stage_tables) == 0:
        raise ValueError("need at least one stage table")
    tables = [ag.as_var(_values(t)) for t in stage_tables]
    N, d = tables[0].shape
    for k, t in enumerate(tables):
        if t.shape != (N, d):
            raise ShapeError(f"stage_table[{k}]", (N, d), t.shape)
    hu, h_u, c_u = _run_lstm([t[:n_users] for t in tables], user_weights)
    hi, h_i, c_i = _run_lstm([t[n_users:] for t in tables], item_weights)
    evolved = [ag.concat([a, b], axis=0) for a, b in zip(hu, hi)]
    return StageState(evolved, ag.concat([h_u, h_i]), ag.concat([c_u, c_i]))


def build_prefix(partition, user, stage, evolved_items, positions, m_max=None) -> PrefixSequence:
    """Tokens ``evolved_items[i_j] + positions[j]`` over the user's clicks up to
    the end of ``stage`` (oldest first).  Every token uses the same stage's
    evolved table.  Longer histories keep the most recent ``m_max`` clicks."""
    pos = ag.as_var(_values(positions))
    if m_max is None:
        m_max = pos.shape[0]
    items = partition.prefix(user, stage, m_max)
    if len(items) == 0:
        raise EmptyPrefixError(f"user {user} has no clicks up to stage {stage}")
    if len(items) > pos.shape[0]:
        raise ShapeError("positions", (len(items), pos.shape[1]), pos.shape)
    tokens = ag.take_rows(ag.as_var(_values(evolved_items)), items) + pos[: len(items)]
    return PrefixSequence(user, stage, items, tokens)


def long_range_aggregate(tokens, layers):
    """Stack of residual self-attention layers, then sum over positions."""
    S = ag.as_var(getattr(tokens, "tokens", tokens))
    if S.shape[0] == 0:
        raise EmptyPrefixError("cannot aggregate an empty prefix")
    for w in layers:
        S = self_attention_layer(S, w)
    return S.sum(axis=0)


def aggregate_batch(tokens, mask, layers, dropout=0.0, rng=None):
    """Batched ``long_range_aggregate`` over padded (B, M, d) tokens.

    ``mask`` (B, M) marks real tokens; padded keys receive no attention and
    padded rows are left out of the readout."""
    S = tokens
    mask = np.asarray(mask, dtype=bool)
    for w in layers:
        S = self_attention_layer(S, w, key_mask=mask, dropout=dropout, rng=rng)
    keep = mask[..., None].astype(S.dtype)
    return (S * keep).sum(axis=1)


def padded_prefixes(partition, users, stages, m_max):
    """(B, M) item indices and validity mask for many (user, stage) pairs."""
    users = np.asarray(users, dtype=np.int64)
    stages = np.asarray(stages, dtype=np.int64)
    ends = np.where(stages >= 0, partition.cum_counts[users, np.maximum(stages, 0)], 0)
    lens = np.minimum(ends, m_max)
    M = max(int(lens.max()) if len(lens) else 0, 1)
    col = np.arange(M)
    mask = col[None, :] < lens[:, None]
    start = partition.click_ptr[users] + ends - lens
    idx = np.where(mask, start[:, None] + col[None, :], 0)
    items = np.where(mask, partition.click_item[idx], 0)
    return items, mask
