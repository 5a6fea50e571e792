"""End-to-end training with Adam and early stopping on validation AUC,
evaluation on held-out stages, and checkpoint I/O."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import DatasetSplit, Impressions, sample_negatives
from .errors import NonFiniteError
from .metrics import MetricsReport, freshness_report, summarize_arrays, top_k
from .model import (
    ABLATIONS,
    GraphContext,
    apply_ablation,
    dtype_for,
    final_representations,
    init_params,
    objective_and_grads,
    score_candidates,
)
from .numerics.optim import AdamState, adam_step
from .objective import LossWeights
from .rng import derive_rng

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    d: int = 64
    lr: float = 5e-6
    batch_size: int = 1024
    dropout: float = 0.2
    n_neg: int = 4
    tau: float = 0.1
    lambda_t: float = 0.1
    lambda_cl: float = 0.01
    lambda_sl: float = 0.01
    beta: float = 1e-4
    gcn_layers: int = 2
    stage_layers: int = 2
    attn_layers: int = 2
    m_max: int = 50
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    precision: int = 32
    ablation: str = "full"
    causal: bool = True  # score stage-t clicks from history before t

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("d", "batch_size", "n_neg", "m_max", "max_epochs", "patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("gcn_layers", "stage_layers", "attn_layers"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        dtype_for(self.precision)
        self.loss_weights()

    def loss_weights(self):
        return LossWeights(self.lambda_t, self.lambda_cl, self.lambda_sl, self.beta, self.tau)

    @classmethod
    def from_dict(cls, raw):
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown training option(s): {', '.join(sorted(unknown))}")
        return cls(**raw)

    def to_dict(self):
        return asdict(self)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class TrainState:
    params: dict
    adam: AdamState
    epoch: int = 0
    best_val_auc: float = -np.inf
    best_epoch: int = -1
    since_improvement: int = 0
    best_params: dict | None = None


@dataclass
class TrainResult:
    params: dict
    config: TrainConfig
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_auc: float = float("nan")
    n_users: int = 0
    n_items: int = 0


def training_tuples(split: DatasetSplit):
    """(users, stages, positives) of every deduplicated click in training stages."""
    p = split.partition
    m = np.isin(p.edge_stage, split.train_stages)
    return p.edge_user[m], p.edge_stage[m], p.edge_item[m]


def make_batches(users, stages, batch_size, rng):
    """Shuffle (user, stage) groups and pack whole groups into batches of
    roughly ``batch_size`` tuples, so each pair's prefix is encoded once."""
    key = stages.astype(np.int64) * (users.max() + 1) + users
    uniq, inv = np.unique(key, return_inverse=True)
    perm = rng.permutation(len(uniq))
    rank = np.empty_like(perm)
    rank[perm] = np.arange(len(uniq))
    order = np.lexsort((rng.random(len(users)), rank[inv]))
    group_rank = rank[inv][order]
    batches = []
    start = 0
    n = len(order)
    while start < n:
        stop = min(start + batch_size, n)
        # extend to the end of the current group
        while stop < n and group_rank[stop] == group_rank[stop - 1]:
            stop += 1
        batches.append(order[start:stop])
        start = stop
    return batches


def stage_batches(users, stages, batch_size, rng):
    """``make_batches`` within each stage, then shuffled across stages."""
    out = []
    for t in np.unique(stages):
        sel = np.flatnonzero(stages == t)
        out.extend(sel[b] for b in make_batches(users[sel], stages[sel], batch_size, rng))
    return [out[k] for k in rng.permutation(len(out))]


def _context(split, n_observed, features, cfg):
    return GraphContext(split.partition, n_observed, features, dtype_for(cfg.precision))


def score_impressions(params, ctx, wiring, cfg, imps: Impressions):
    user_final, item_final = final_representations(params, ctx, wiring, cfg)
    return score_candidates(user_final, item_final, imps.users, imps.candidates), user_final, item_final


def validation_auc(params, split, features, cfg, wiring, ctx=None):
    ctx = ctx or _context(split, split.val_stage, features, cfg)
    scores, _, _ = score_impressions(params, ctx, wiring, cfg, split.val)
    return summarize_arrays(scores, split.val.labels, split.val.candidates).auc


def run_training(cfg: TrainConfig, split: DatasetSplit, item_features=None, on_epoch=None) -> TrainResult:
    """Train on ``split.train_stages``, early-stop on validation AUC and return
    the best checkpoint.

    Each optimiser step recomputes the full forward pass (global, stage,
    evolved and aggregated tables) for its batch, so gradients are exact.
    With ``cfg.causal`` the clicks of stage t are scored from a graph of
    stages before t and the state at t-1, the same view evaluation gets of a
    held-out stage.
    """
    wiring = apply_ablation(cfg.ablation)
    dtype = dtype_for(cfg.precision)
    p = split.partition
    params = init_params(cfg, p.n_users, p.n_items, wiring, derive_rng(cfg.seed, "init"), item_features)
    weights = cfg.loss_weights()
    state = TrainState(params, AdamState.for_params(params, lr=cfg.lr, weight_decay=cfg.beta))
    val_ctx = _context(split, split.val_stage, item_features, cfg)

    users, stages, pos = training_tuples(split)
    causal = cfg.causal and len(split.train_stages) > 1
    if cfg.causal and not causal:
        log.warning("a single training stage leaves no history to predict from; using same-stage targets")
    if causal:
        keep = stages >= 1
        users, stages, pos = users[keep], stages[keep], pos[keep]
        contexts = {int(t): _context(split, int(t), item_features, cfg) for t in np.unique(stages)}
    else:
        train_ctx = _context(split, len(split.train_stages), item_features, cfg)
    history = []
    for epoch in range(cfg.max_epochs):
        t_start = time.perf_counter()
        ep_rng = derive_rng(cfg.seed, f"epoch/{epoch}")
        negs, _ = sample_negatives(p, users, stages, cfg.n_neg, ep_rng)
        drop_rng = derive_rng(cfg.seed, f"dropout/{epoch}")
        sums, counts = {}, {}
        batching = stage_batches if causal else make_batches
        for b, idx in enumerate(batching(users, stages, cfg.batch_size, ep_rng)):
            if causal:
                t = int(stages[idx[0]])
                ctx, rep = contexts[t], stages[idx] - 1
            else:
                ctx, rep = train_ctx, None
            br, grads = objective_and_grads(
                state.params, ctx, wiring, cfg, weights,
                users[idx], stages[idx], pos[idx], negs[idx],
                rng=drop_rng if cfg.dropout > 0 else None, rep_stages=rep,
            )
            if not np.isfinite(br.total):
                raise NonFiniteError("training loss", f"epoch {epoch}, batch {b}")
            try:
                adam_step(state.params, grads, state.adam)
            except NonFiniteError as exc:
                raise NonFiniteError("gradient", f"epoch {epoch}, batch {b}, {exc.where}") from exc
            for k, v in br.as_dict().items():
                sums[k] = sums.get(k, 0.0) + v
                counts[k] = counts.get(k, 0) + 1
        val_auc = validation_auc(state.params, split, item_features, cfg, wiring, val_ctx)
        record = {"epoch": epoch, **{k: v / counts[k] for k, v in sorted(sums.items())}, "val_auc": val_auc,
                  "seconds": time.perf_counter() - t_start}
        history.append(record)
        state.epoch = epoch + 1
        if val_auc > state.best_val_auc:
            state.best_val_auc = val_auc
            state.best_epoch = epoch
            state.best_params = {k: v.copy() for k, v in state.params.items()}
            state.since_improvement = 0
        else:
            state.since_improvement += 1
        log.info("epoch %d loss %.5f val_auc %.4f", epoch, record.get("total", float("nan")), val_auc)
        if on_epoch is not None:
            on_epoch(record)
        if state.since_improvement >= cfg.patience:
            break

    best = state.best_params if state.best_params is not None else state.params
    return TrainResult(
        {k: v.astype(dtype, copy=False) for k, v in best.items()},
        copy.deepcopy(cfg),
        history,
        state.best_epoch,
        float(state.best_val_auc),
        p.n_users,
        p.n_items,
    )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate(params, cfg: TrainConfig, split: DatasetSplit, item_features=None, which="test",
             pub_times=None, new_stages=1, hist_stages=1, list_len=10, run_id="", config_hash=""):
    """Ranking metrics on held-out impressions, plus freshness of top-10 lists
    when item publication times are known."""
    wiring = apply_ablation(cfg.ablation)
    imps = split.impressions(which)
    ctx = _context(split, imps.stage, item_features, cfg)
    scores, user_final, item_final = score_impressions(params, ctx, wiring, cfg, imps)
    ranking = summarize_arrays(scores, imps.labels, imps.candidates)
    fresh = None
    if pub_times is not None:
        fresh = freshness_for(split, imps, user_final, item_final, pub_times, new_stages, hist_stages, list_len)
    return MetricsReport(run_id, config_hash, ranking, fresh, cfg.ablation, cfg.seed)


def freshness_for(split, imps, user_final, item_final, pub_times, new_stages=1, hist_stages=1, list_len=10):
    """Top-``list_len`` over all items (minus previously clicked ones) for every
    user with a held-out click.  New items were published in the last
    ``new_stages`` stages up to the held-out one; historical ones in the first
    ``hist_stages`` stages."""
    p = split.partition
    pub = np.asarray(pub_times, dtype=np.float64)
    known = ~np.isnan(pub)
    pub_stage = np.full(len(pub), -1, dtype=np.int64)
    pub_stage[known] = ((pub[known] - p.t0) // p.window).astype(np.int64)
    is_new = known & (pub_stage > imps.stage - new_stages) & (pub_stage <= imps.stage)
    is_hist = known & (pub_stage < hist_stages)

    users = np.unique(imps.users)
    scores = user_final[users] @ item_final.T
    seen = np.zeros(scores.shape, dtype=bool)
    m = p.edge_stage < imps.stage
    row_of = np.full(p.n_users, -1)
    row_of[users] = np.arange(len(users))
    r = row_of[p.edge_user[m]]
    ok = r >= 0
    seen[r[ok], p.edge_item[m][ok]] = True
    lists = top_k(scores, list_len, exclude=seen)
    return freshness_report(lists, is_new, is_hist, list_len)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params, cfg: TrainConfig, extra=None):
    meta = {
        "format": "evorec-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "tensors": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in params.items()},
    }
    if extra:
        meta["extra"] = extra
    arrays = {f"param/{k}": v for k, v in params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path):
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(bytes(z["__meta__"]).decode("utf-8"))
        if meta.get("format") != "evorec-checkpoint":
            raise ValueError(f"{path}: not an evorec checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        params = {k: z[f"param/{k}"].copy() for k in meta["tensors"]}
    for k, info in meta["tensors"].items():
        if list(params[k].shape) != info["shape"]:
            raise ValueError(f"{path}: tensor {k} has shape {params[k].shape}, header says {info['shape']}")
    return params, TrainConfig.from_dict(meta["config"]), meta.get("extra", {})
