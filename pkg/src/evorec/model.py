"""Model wiring: parameters, ablation variants, forward pass and scoring.

``params`` is a flat ``dict[str, ndarray]``; only tensors that the chosen
wiring actually uses are created, so disabled components are absent from
both the l2 term and the optimiser.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .encoders import init_embeddings, normalize_adjacency, propagate
from .numerics import autograd as ag
from .numerics.nn import AttentionWeights, LstmWeights
from .objective import bce_loss, consistency_loss, smoothness_loss, total_loss
from .temporal import aggregate_batch, padded_prefixes, short_term_evolve

ABLATIONS = ("full", "no_lpm", "no_ste", "no_lra", "no_gpm")


@dataclass(frozen=True)
class Wiring:
    name: str = "full"
    lpm: bool = True  # any local (temporal) modelling at all
    ste: bool = True  # LSTM over stage tables
    lra: bool = True  # self-attention over click prefixes
    gpm: bool = True  # global graph encoder


def apply_ablation(flag) -> Wiring:
    if flag == "full":
        return Wiring("full")
    if flag == "no_lpm":
        return Wiring("no_lpm", lpm=False, ste=False, lra=False)
    if flag == "no_ste":
        return Wiring("no_ste", ste=False)
    if flag == "no_lra":
        return Wiring("no_lra", lra=False)
    if flag == "no_gpm":
        return Wiring("no_gpm", gpm=False)
    raise ValueError(f"unknown ablation {flag!r}; expected one of {', '.join(ABLATIONS)}")


def dtype_for(precision):
    if int(precision) == 64:
        return np.float64
    if int(precision) == 32:
        return np.float32
    raise ValueError("precision must be 32 or 64")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def init_params(cfg, n_users, n_items, wiring: Wiring, rng, item_features=None):
    dtype = dtype_for(cfg.precision)
    d = cfg.d
    _, params = init_embeddings(n_users, n_items, d, rng, item_features, dtype=dtype)
    if wiring.lpm and wiring.ste:
        for side in ("user", "item"):
            w = LstmWeights.random(d, rng, dtype=dtype)
            w.b[d:2 * d] = 1.0  # forget-gate bias
            params[f"lstm_{side}_wx"] = w.w_x
            params[f"lstm_{side}_wh"] = w.w_h
            params[f"lstm_{side}_b"] = w.b
    if wiring.lpm and wiring.lra:
        for layer in range(cfg.attn_layers):
            w = AttentionWeights.random(d, rng, dtype=dtype)
            params[f"attn{layer}_q"] = w.w_q
            params[f"attn{layer}_k"] = w.w_k
            params[f"attn{layer}_v"] = w.w_v
        params["pos_emb"] = (rng.standard_normal((cfg.m_max, d)) * (0.1 / math.sqrt(d))).astype(dtype)
    return params


def as_vars(params):
    return {k: ag.Var(v, requires_grad=True, name=k) for k, v in params.items()}


def _lstm(pv, side):
    return LstmWeights(pv[f"lstm_{side}_wx"], pv[f"lstm_{side}_wh"], pv[f"lstm_{side}_b"])


def _attn_layers(pv, n_layers):
    return [AttentionWeights(pv[f"attn{k}_q"], pv[f"attn{k}_k"], pv[f"attn{k}_v"]) for k in range(n_layers)]


# ---------------------------------------------------------------------------
# graph context: what has been observed so far
# ---------------------------------------------------------------------------


class GraphContext:
    """Graphs built from stages ``0..n_observed-1`` of a partition."""

    def __init__(self, partition, n_observed, item_features=None, dtype=np.float64):
        if n_observed < 1:
            raise ValueError("need at least one observed stage")
        self.partition = partition
        self.n_stages = n_observed
        self.n_users = partition.n_users
        self.n_items = partition.n_items
        U, I = self.n_users, self.n_items
        self.global_adj = normalize_adjacency(partition.global_edges(range(n_observed)), U, I)
        self.stage_adj = [normalize_adjacency(partition.stage_edges(t), U, I) for t in range(n_observed)]
        self.item_features = None if item_features is None else np.asarray(item_features, dtype=dtype)

    @property
    def n_nodes(self):
        return self.n_users + self.n_items


@dataclass
class Encoded:
    initial: object
    global_: object  # None when the global encoder is ablated
    stage_tables: list | None
    evolved: list | None  # clean evolved tables, per stage
    evolved_flat: object | None  # stages stacked (S*N, d), dropout applied when training


def encode(pv, ctx: GraphContext, wiring: Wiring, cfg, rng=None) -> Encoded:
    """Initial -> global -> per-stage -> evolved tables over all nodes."""
    if "item_emb" in pv:
        items0 = pv["item_emb"]
    else:
        items0 = ag.matmul(ctx.item_features, pv["item_proj"])
    e0 = ag.concat([pv["user_emb"], items0], axis=0)
    eg = propagate(ctx.global_adj, e0, cfg.gcn_layers) if wiring.gpm else None
    if not wiring.lpm:
        return Encoded(e0, eg, None, None, None)
    base = eg if wiring.gpm else e0
    stage_tables = [propagate(adj, base, cfg.stage_layers) for adj in ctx.stage_adj]
    if wiring.ste:
        evolved = short_term_evolve(stage_tables, _lstm(pv, "user"), _lstm(pv, "item"), ctx.n_users).evolved
        used = [ag.dropout(e, cfg.dropout, rng) for e in evolved]
    else:
        evolved = used = stage_tables
    return Encoded(e0, eg, stage_tables, evolved, ag.concat(used, axis=0))


def aggregated_users(pv, enc: Encoded, ctx: GraphContext, cfg, users, stages, rng=None):
    """Long-range user vectors for (user, stage) pairs; zero for empty prefixes."""
    items, mask = padded_prefixes(ctx.partition, users, stages, cfg.m_max)
    N = ctx.n_nodes
    rows = np.asarray(stages)[:, None] * N + ctx.n_users + items
    B, M = items.shape
    tokens = ag.take_rows(enc.evolved_flat, rows.reshape(-1)).reshape(B, M, -1) + pv["pos_emb"][:M]
    return aggregate_batch(tokens, mask, _attn_layers(pv, cfg.attn_layers), cfg.dropout, rng)


def pair_user_reps(pv, enc, ctx, wiring, cfg, users, stages, rng=None, mask_empty=True):
    """Fused user vectors for distinct (user, stage) pairs."""
    users = np.asarray(users, dtype=np.int64)
    stages = np.asarray(stages, dtype=np.int64)
    parts = []
    if wiring.lpm:
        N = ctx.n_nodes
        tilde = ag.take_rows(enc.evolved_flat, stages * N + users)
        if wiring.lra:
            tilde = tilde + aggregated_users(pv, enc, ctx, cfg, users, stages, rng)
        if mask_empty:
            has = ctx.partition.cum_counts[users, stages] > 0
            if not has.all():
                tilde = tilde * has[:, None].astype(tilde.dtype)
        parts.append(tilde)
    if wiring.gpm:
        parts.append(ag.take_rows(enc.global_, users))
    return _sum(parts)


def item_reps(enc, ctx, wiring, items, stages):
    items = np.asarray(items, dtype=np.int64)
    node = ctx.n_users + items
    parts = []
    if wiring.lpm:
        parts.append(ag.take_rows(enc.evolved_flat, np.asarray(stages, dtype=np.int64) * ctx.n_nodes + node))
    if wiring.gpm:
        parts.append(ag.take_rows(enc.global_, node))
    return _sum(parts)


def _sum(parts):
    out = parts[0]
    for p in parts[1:]:
        out = out + p
    return out


# ---------------------------------------------------------------------------
# training objective on one batch
# ---------------------------------------------------------------------------


def batch_objective(pv, params, ctx, wiring, cfg, weights, users, stages, pos, negs, rng=None, rep_stages=None):
    """Loss breakdown for tuples ``(user, stage, positive, negatives...)``.

    ``pv`` are the Vars of ``params``.  ``rng`` enables dropout.  Clicks are
    grouped into per-stage losses by ``stages``; the representations used to
    score them come from ``rep_stages`` (default: the same stage)."""
    users = np.asarray(users, dtype=np.int64)
    target = np.asarray(stages, dtype=np.int64)
    stages = target if rep_stages is None else np.asarray(rep_stages, dtype=np.int64)
    negs = np.asarray(negs, dtype=np.int64).reshape(len(users), -1)
    enc = encode(pv, ctx, wiring, cfg, rng)

    U = ctx.n_users
    key = stages * U + users
    uniq, inv = np.unique(key, return_inverse=True)
    p_users, p_stages = uniq % U, uniq // U
    user_pair = pair_user_reps(pv, enc, ctx, wiring, cfg, p_users, p_stages, rng, mask_empty=False)

    k = negs.shape[1]
    row_pair = np.repeat(inv.reshape(-1), 1 + k)
    row_items = np.concatenate([pos[:, None], negs], axis=1).reshape(-1)
    row_stage = np.repeat(stages, 1 + k)
    row_target = np.repeat(target, 1 + k)
    labels = np.zeros((len(users), 1 + k))
    labels[:, 0] = 1.0
    labels = labels.reshape(-1)

    logits = (ag.take_rows(user_pair, row_pair) * item_reps(enc, ctx, wiring, row_items, row_stage)).sum(axis=-1)
    probs = ag.sigmoid(logits)
    stage_losses = {}
    for t in np.unique(target):
        rows = np.flatnonzero(row_target == t)
        stage_losses[int(t)] = bce_loss(ag.take_rows(probs, rows), labels[rows])

    cons = smooth = None
    if wiring.lpm:
        batch_users, user_col = np.unique(p_users, return_inverse=True)
        if wiring.gpm:
            tilde = ag.take_rows(ag.concat(enc.evolved, axis=0), p_stages * ctx.n_nodes + p_users)
            cons = consistency_loss(tilde, ag.take_rows(enc.global_, batch_users), user_col, weights.tau,
                                    n_users=len(batch_users))
        smooth = smoothness_loss([ag.take_rows(e, batch_users) for e in enc.evolved])
    return total_loss(stage_losses, cons, smooth, weights, params)


def objective_and_grads(params, ctx, wiring, cfg, weights, users, stages, pos, negs, rng=None, rep_stages=None):
    """Data-loss gradients (l2 excluded) plus the breakdown."""
    pv = as_vars(params)
    br = batch_objective(pv, params, ctx, wiring, cfg, weights, users, stages, pos, negs, rng, rep_stages)
    br.data_loss.backward()
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in pv.items()}
    return br, grads


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def final_representations(params, ctx, wiring, cfg, chunk=512):
    """Fused user (U, d) and item (I, d) vectors at the last observed stage.

    Users with no clicks in the observed stages fall back to the global part."""
    S = ctx.n_stages - 1
    with ag.no_grad():
        pv = {k: ag.Var(v) for k, v in params.items()}
        enc = encode(pv, ctx, wiring, cfg, None)
        U, I = ctx.n_users, ctx.n_items
        users = np.arange(U)
        blocks = []
        for lo in range(0, U, chunk):
            sl = users[lo:lo + chunk]
            blocks.append(pair_user_reps(pv, enc, ctx, wiring, cfg, sl, np.full(len(sl), S)).data)
        user_final = np.concatenate(blocks) if blocks else np.zeros((0, cfg.d))
        item_final = item_reps(enc, ctx, wiring, np.arange(I), np.full(I, S)).data
    return user_final, item_final


def score_candidates(user_final, item_final, users, candidates):
    """Logits (n, c) for candidate lists; monotone in the click probability."""
    u = user_final[np.asarray(users)]
    return np.einsum("nd,ncd->nc", u, item_final[np.asarray(candidates)])


def stage_drift(params, ctx, wiring, cfg):
    """Mean over users of ``sum_t ||e~_u^t - e~_u^{t-1}||^2`` on the evolved
    tables of ``ctx`` (no dropout).  0 for variants without temporal tables."""
    if not wiring.lpm or ctx.n_stages < 2:
        return 0.0
    with ag.no_grad():
        pv = {k: ag.Var(v) for k, v in params.items()}
        enc = encode(pv, ctx, wiring, cfg, None)
        U = ctx.n_users
        rows = [np.asarray(e.data[:U], dtype=np.float64) for e in enc.evolved]
    return float(sum(np.square(b - a).sum() for a, b in zip(rows[:-1], rows[1:])) / U)
