"""Interaction logs, stage partitioning, negative sampling, synthetic data and
the chronological train/validation/test split.

Stages are 0-based in code: stage ``t`` covers ``[t0 + t*w, t0 + (t+1)*w)``
where ``t0`` is the earliest timestamp in the log.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DataFormatError, SplitError
from .numerics import kernels
from .rng import derive_rng

log = logging.getLogger(__name__)

WEEK = 7 * 24 * 3600
_UNITS = {"s": 1, "m": 60, "h": 3600, "d": 24 * 3600, "w": WEEK}


def parse_duration(text) -> int:
    """``"2w"`` -> 1209600.  Bare integers are seconds."""
    if isinstance(text, (int, np.integer)):
        return int(text)
    s = str(text).strip().lower()
    if not s:
        raise ValueError("empty duration")
    unit = s[-1]
    if unit.isdigit():
        return int(float(s))
    if unit not in _UNITS:
        raise ValueError(f"unknown duration unit in {text!r} (use s/m/h/d/w)")
    return int(round(float(s[:-1]) * _UNITS[unit]))


# ---------------------------------------------------------------------------
# interaction log
# ---------------------------------------------------------------------------


@dataclass
class InteractionLog:
    user_ids: list
    item_ids: list
    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    item_features: np.ndarray | None = None
    n_duplicates: int = 0

    @property
    def n_users(self):
        return len(self.user_ids)

    @property
    def n_items(self):
        return len(self.item_ids)

    def __len__(self):
        return len(self.timestamps)

    @classmethod
    def from_records(cls, records, features=None, feature_dim=None):
        """Build from ``(user_id, item_id, ts)`` triples.

        Exact duplicate triples are dropped (counted in ``n_duplicates``).
        Records are stably sorted by timestamp and ids are indexed in order of
        first appearance in that sorted stream.
        """
        seen = set()
        kept = []
        dups = 0
        for rec in records:
            if rec in seen:
                dups += 1
                continue
            seen.add(rec)
            kept.append(rec)
        if dups:
            log.warning("dropped %d duplicate (user, item, timestamp) records", dups)
        kept.sort(key=lambda r: r[2])

        user_index, item_index = {}, {}
        users = np.empty(len(kept), dtype=np.int64)
        items = np.empty(len(kept), dtype=np.int64)
        ts = np.empty(len(kept), dtype=np.int64)
        for k, (u, i, t) in enumerate(kept):
            users[k] = user_index.setdefault(u, len(user_index))
            items[k] = item_index.setdefault(i, len(item_index))
            ts[k] = t
        item_ids = list(item_index)

        feat = None
        if features is not None:
            missing = [i for i in item_ids if i not in features]
            if missing:
                raise DataFormatError(f"no feature vector for {len(missing)} item(s), e.g. {missing[0]!r}")
            feat = np.stack([np.asarray(features[i], dtype=np.float64) for i in item_ids]) if item_ids else None
            if feat is not None and feature_dim is not None and feat.shape[1] != feature_dim:
                raise DataFormatError(f"feature dimension {feat.shape[1]} != declared {feature_dim}")
        return cls(list(user_index), item_ids, users, items, ts, feat, dups)

    def records(self):
        for u, i, t in zip(self.users, self.items, self.timestamps):
            yield self.user_ids[u], self.item_ids[i], int(t)

    def write_tsv(self, path):
        path = Path(path)
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            for u, i, t in self.records():
                fh.write(f"{u}\t{i}\t{t}\n")

    def write_features(self, path):
        if self.item_features is None:
            raise ValueError("log carries no item features")
        with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
            for iid, row in zip(self.item_ids, self.item_features):
                fh.write(iid + "\t" + " ".join(repr(float(x)) for x in row) + "\n")


def feature_sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".features.tsv")


def read_features(path, feature_dim=None):
    feats = {}
    dim = feature_dim
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            head, sep, rest = line.rstrip("\n").partition("\t")
            if not sep:
                raise DataFormatError("expected item_id<TAB>values", lineno, path)
            try:
                vec = [float(x) for x in rest.split()]
            except ValueError:
                raise DataFormatError("non-numeric feature value", lineno, path) from None
            if dim is None:
                dim = len(vec)
            if len(vec) != dim:
                raise DataFormatError(f"expected {dim} feature values, got {len(vec)}", lineno, path)
            feats[head] = vec
    return feats, dim


def load_interactions(path, features_path=None, feature_dim=None, fmt="tsv") -> InteractionLog:
    """Read a ``user_id<TAB>item_id<TAB>timestamp`` file (no header).

    A feature sidecar is attached when ``features_path`` is given, or when
    ``<stem>.features.tsv`` sits next to the interaction file.
    """
    if fmt != "tsv":
        raise ValueError(f"unsupported interaction format {fmt!r}")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"interaction file not found: {path}")
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataFormatError(f"expected 3 tab-separated fields, got {len(parts)}", lineno, path)
            u, i, t = parts
            try:
                ts = int(t)
            except ValueError:
                raise DataFormatError(f"timestamp {t!r} is not an integer", lineno, path) from None
            if ts < 0:
                raise DataFormatError("negative timestamp", lineno, path)
            records.append((u, i, ts))

    features = None
    if features_path is None and feature_sidecar_path(path).exists():
        features_path = feature_sidecar_path(path)
    if features_path is not None:
        features, feature_dim = read_features(features_path, feature_dim)
    return InteractionLog.from_records(records, features, feature_dim)


# ---------------------------------------------------------------------------
# stage partition
# ---------------------------------------------------------------------------


@dataclass
class StagePartition:
    window: int
    t0: int
    n_stages: int
    n_users: int
    n_items: int
    record_stage: np.ndarray
    # deduplicated (stage, user, item) edges in chronological order of first click
    edge_stage: np.ndarray
    edge_user: np.ndarray
    edge_item: np.ndarray
    # per-user chronological clicks (CSR over users)
    click_ptr: np.ndarray
    click_item: np.ndarray
    click_stage: np.ndarray
    # cum_counts[u, t] = number of deduplicated clicks of u in stages <= t
    cum_counts: np.ndarray
    _excl_key: np.ndarray = field(default=None, repr=False)
    _excl_ptr: np.ndarray = field(default=None, repr=False)
    _excl_item: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        # sorted (stage, user) -> clicked items, used to build negative pools
        key = self.edge_stage * self.n_users + self.edge_user
        order = np.lexsort((self.edge_item, key))
        skey = key[order]
        uniq, start = np.unique(skey, return_index=True)
        self._excl_key = uniq
        self._excl_ptr = np.append(start, len(skey)).astype(np.int64)
        self._excl_item = self.edge_item[order]

    def stage_bounds(self, t):
        return self.t0 + t * self.window, self.t0 + (t + 1) * self.window

    def stage_edges(self, t):
        m = self.edge_stage == t
        return self.edge_user[m], self.edge_item[m]

    def global_edges(self, stages=None):
        """Union of stage edge sets (each (u, i) once), optionally restricted."""
        if stages is None:
            m = np.ones(len(self.edge_stage), dtype=bool)
        else:
            m = np.isin(self.edge_stage, np.asarray(list(stages)))
        key = self.edge_user[m] * self.n_items + self.edge_item[m]
        uniq = np.unique(key)
        return uniq // self.n_items, uniq % self.n_items

    def user_clicks(self, u):
        lo, hi = self.click_ptr[u], self.click_ptr[u + 1]
        return self.click_item[lo:hi], self.click_stage[lo:hi]

    def prefix(self, u, t, m_max=None):
        """Item indices clicked by ``u`` up to the end of stage ``t``, oldest first,
        keeping only the most recent ``m_max``."""
        end = self.cum_counts[u, t] if t >= 0 else 0
        lo = self.click_ptr[u]
        start = lo if m_max is None else max(lo, lo + end - m_max)
        return self.click_item[start:lo + end]

    def clicked_in_stage(self, u, t):
        k = t * self.n_users + u
        j = np.searchsorted(self._excl_key, k)
        if j < len(self._excl_key) and self._excl_key[j] == k:
            return self._excl_item[self._excl_ptr[j]:self._excl_ptr[j + 1]]
        return self._excl_item[:0]

    def exclusion_csr(self, users, stages):
        """CSR (ptr, items) of the sorted per-stage click sets for each row."""
        keys = np.asarray(stages, dtype=np.int64) * self.n_users + np.asarray(users, dtype=np.int64)
        j = np.searchsorted(self._excl_key, keys)
        jc = np.minimum(j, max(len(self._excl_key) - 1, 0))
        found = (j < len(self._excl_key)) & (self._excl_key[jc] == keys) if len(self._excl_key) else np.zeros(len(keys), bool)
        lo = np.where(found, self._excl_ptr[jc], 0)
        hi = np.where(found, self._excl_ptr[np.minimum(jc + 1, len(self._excl_ptr) - 1)], 0)
        lens = hi - lo
        ptr = np.zeros(len(keys) + 1, dtype=np.int64)
        np.cumsum(lens, out=ptr[1:])
        idx = np.repeat(lo - ptr[:-1], lens) + np.arange(ptr[-1])
        return ptr, self._excl_item[idx]


def partition_stages(log: InteractionLog, window) -> StagePartition:
    w = parse_duration(window)
    if w <= 0:
        raise ValueError("window length must be positive")
    if len(log) == 0:
        raise ValueError("cannot partition an empty interaction log")
    ts = log.timestamps
    t0 = int(ts.min())
    stage = (ts - t0) // w
    n_stages = int(stage.max()) + 1
    U, I = log.n_users, log.n_items

    key = (stage * U + log.users) * I + log.items
    _, first = np.unique(key, return_index=True)
    first.sort()  # chronological order of first occurrence
    e_stage, e_user, e_item = stage[first], log.users[first], log.items[first]

    order = np.argsort(e_user, kind="stable")
    counts = np.bincount(e_user, minlength=U)
    click_ptr = np.zeros(U + 1, dtype=np.int64)
    np.cumsum(counts, out=click_ptr[1:])
    per_stage = np.zeros((U, n_stages), dtype=np.int64)
    np.add.at(per_stage, (e_user, e_stage), 1)

    return StagePartition(
        window=w,
        t0=t0,
        n_stages=n_stages,
        n_users=U,
        n_items=I,
        record_stage=stage,
        edge_stage=e_stage,
        edge_user=e_user,
        edge_item=e_item,
        click_ptr=click_ptr,
        click_item=e_item[order],
        click_stage=e_stage[order],
        cum_counts=np.cumsum(per_stage, axis=1),
    )


# ---------------------------------------------------------------------------
# negative sampling
# ---------------------------------------------------------------------------


class NegativeDraw(NamedTuple):
    items: np.ndarray
    degenerate: bool


def sample_negatives(partition: StagePartition, users, stages, n_neg, rng):
    """For each row draw ``n_neg`` distinct items the user did not click in that
    stage.  Returns ``(items[n, n_neg], degenerate[n])``; degenerate rows (pool
    smaller than ``n_neg``) are drawn with replacement."""
    users = np.asarray(users, dtype=np.int64)
    stages = np.asarray(stages, dtype=np.int64)
    n = len(users)
    uniforms = rng.random((n, n_neg))
    ptr, excl = partition.exclusion_csr(users, stages)
    pool = partition.n_items - np.diff(ptr)
    degenerate = pool < n_neg
    out = np.empty((n, n_neg), dtype=np.int64)
    ok = ~degenerate
    if ok.any():
        rows = np.flatnonzero(ok)
        if ok.all():
            sub_ptr, sub_excl = ptr, excl
        else:
            sub_ptr, sub_excl = partition.exclusion_csr(users[rows], stages[rows])
        out[rows] = kernels.sample_excluding(sub_ptr, sub_excl, partition.n_items, uniforms[rows])
    for r in np.flatnonzero(degenerate):
        clicked = excl[ptr[r]:ptr[r + 1]]
        pool_items = np.setdiff1d(np.arange(partition.n_items), clicked)
        if len(pool_items) == 0:
            pool_items = np.arange(partition.n_items)
        pick = np.minimum((uniforms[r] * len(pool_items)).astype(np.int64), len(pool_items) - 1)
        out[r] = pool_items[pick]
    if degenerate.any():
        log.warning("%d row(s) had fewer than %d negative candidates; sampled with replacement",
                    int(degenerate.sum()), n_neg)
    return out, degenerate


def negative_sample(partition: StagePartition, stage, user, n_neg, rng) -> NegativeDraw:
    items, degenerate = sample_negatives(partition, [user], [stage], n_neg, rng)
    return NegativeDraw(items[0], bool(degenerate[0]))


# ---------------------------------------------------------------------------
# synthetic drifting-interest data
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    n_users: int = 1000
    n_items: int = 500
    n_topics: int = 10
    n_stages: int = 6
    clicks_mean: float = 4.0
    active_prob: float = 0.9
    topic_purity: float = 0.9
    drift_prob: float = 0.5
    initial_item_frac: float = 0.4
    recency_decay: float = 1.0
    feature_dim: int = 32
    feature_noise: float = 0.5
    stage_seconds: int = WEEK
    seed: int = 0

    def validate(self):
        for name in ("n_users", "n_items", "n_topics", "n_stages"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("active_prob", "topic_purity", "drift_prob", "initial_item_frac"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.clicks_mean < 1.0:
            raise ValueError("clicks_mean must be >= 1")
        if self.stage_seconds <= 0:
            raise ValueError("stage_seconds must be positive")


@dataclass
class SynthData:
    log: InteractionLog
    user_topics: np.ndarray  # (n_users, n_stages)
    item_topic: np.ndarray
    item_pub_stage: np.ndarray
    config: SynthConfig

    def item_pub_time(self):
        """Publication times indexed by generator item number."""
        return self.item_pub_stage * self.config.stage_seconds

    def pub_times(self):
        """Publication times aligned to ``log.item_ids`` (the model's indices)."""
        gen = np.array([int(i[1:]) for i in self.log.item_ids], dtype=np.int64)
        return self.item_pub_time()[gen].astype(np.float64)

    def ground_truth(self):
        """JSON-ready sidecar keyed by external ids."""
        cfg = self.config
        uids = [f"u{u:05d}" for u in range(cfg.n_users)]
        iids = [f"i{i:05d}" for i in range(cfg.n_items)]
        return {
            "config": asdict(cfg),
            "stage_seconds": cfg.stage_seconds,
            "user_topics": {uid: self.user_topics[u].tolist() for u, uid in enumerate(uids)},
            "item_topic": {iid: int(self.item_topic[i]) for i, iid in enumerate(iids)},
            "item_pub_stage": {iid: int(self.item_pub_stage[i]) for i, iid in enumerate(iids)},
            "item_pub_time": {iid: int(self.item_pub_stage[i] * cfg.stage_seconds) for i, iid in enumerate(iids)},
        }

    def write(self, out_dir, stem="interactions"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        tsv = out / f"{stem}.tsv"
        self.log.write_tsv(tsv)
        self.log.write_features(feature_sidecar_path(tsv))
        gt = out / f"{stem}.truth.json"
        gt.write_text(json.dumps(self.ground_truth(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
        return tsv


def synth_generate(cfg: SynthConfig) -> SynthData:
    """Users hold one dominant topic per stage which is resampled (uniformly,
    the current topic included) at each boundary with ``drift_prob``.  Each
    click comes from the dominant topic with probability ``topic_purity``,
    otherwise uniformly from published items; within the pool, recently
    published items are favoured by ``exp(-recency_decay * age)``."""
    cfg.validate()
    U, I, K, T = cfg.n_users, cfg.n_items, cfg.n_topics, cfg.n_stages
    rng_items = derive_rng(cfg.seed, "synth/items")
    rng_users = derive_rng(cfg.seed, "synth/users")
    rng_clicks = derive_rng(cfg.seed, "synth/clicks")

    item_topic = rng_items.integers(0, K, size=I)
    n_initial = int(round(cfg.initial_item_frac * I)) if T > 1 else I
    pub = np.zeros(I, dtype=np.int64)
    if T > 1:
        later = np.arange(I - n_initial)
        pub[n_initial:] = 1 + (later * (T - 1)) // max(I - n_initial, 1)
    pub = pub[rng_items.permutation(I)]
    centroids = rng_items.standard_normal((K, cfg.feature_dim))
    features = centroids[item_topic] + cfg.feature_noise * rng_items.standard_normal((I, cfg.feature_dim))

    topics = np.empty((U, T), dtype=np.int64)
    topics[:, 0] = rng_users.integers(0, K, size=U)
    for t in range(1, T):
        redraw = rng_users.random(U) < cfg.drift_prob
        fresh = rng_users.integers(0, K, size=U)
        topics[:, t] = np.where(redraw, fresh, topics[:, t - 1])

    users_out, items_out, ts_out = [], [], []
    W = cfg.stage_seconds
    for t in range(T):
        published = np.flatnonzero(pub <= t)
        age_w = np.exp(-cfg.recency_decay * (t - pub[published]))
        uni_cdf = np.cumsum(age_w / age_w.sum())
        active = rng_clicks.random(U) < cfg.active_prob
        n_clicks = np.where(active, 1 + rng_clicks.poisson(cfg.clicks_mean - 1.0, size=U), 0)
        cu = np.repeat(np.arange(U), n_clicks)
        ck = topics[cu, t]
        from_topic = rng_clicks.random(len(cu)) < cfg.topic_purity
        draw = rng_clicks.random(len(cu))
        offsets = rng_clicks.integers(0, W, size=len(cu))
        item = published[np.minimum(np.searchsorted(uni_cdf, draw, side="right"), len(published) - 1)]
        for k in range(K):
            pool_m = item_topic[published] == k
            rows = np.flatnonzero(from_topic & (ck == k))
            if not pool_m.any() or len(rows) == 0:
                continue
            pool = published[pool_m]
            w = age_w[pool_m]
            cdf = np.cumsum(w / w.sum())
            item[rows] = pool[np.minimum(np.searchsorted(cdf, draw[rows], side="right"), len(pool) - 1)]
        # chronological order within each user-stage
        order = np.lexsort((offsets, cu))
        users_out.append(cu[order])
        items_out.append(item[order])
        ts_out.append(t * W + offsets[order])
    cu = np.concatenate(users_out)
    ci = np.concatenate(items_out)
    cts = np.concatenate(ts_out)
    if len(cts):
        cts[np.argmin(cts)] = 0
    records = [(f"u{u:05d}", f"i{i:05d}", int(s)) for u, i, s in zip(cu, ci, cts)]

    feat_map = {f"i{i:05d}": features[i] for i in range(I)}
    log_ = InteractionLog.from_records(records, feat_map, cfg.feature_dim)
    return SynthData(log_, topics, item_topic, pub, cfg)


def load_pub_times(path, item_ids):
    """Publication timestamps aligned to ``item_ids`` (NaN if unknown).

    Accepts the synthetic truth JSON (``item_pub_time`` map) or a TSV of
    ``item_id<TAB>timestamp``."""
    path = Path(path)
    if path.suffix == ".json":
        mapping = json.loads(path.read_text(encoding="utf-8"))["item_pub_time"]
    else:
        mapping = {}
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 2:
                    raise DataFormatError("expected item_id<TAB>timestamp", lineno, path)
                mapping[parts[0]] = int(parts[1])
    return np.array([mapping.get(i, np.nan) for i in item_ids], dtype=np.float64)


# ---------------------------------------------------------------------------
# chronological split
# ---------------------------------------------------------------------------


@dataclass
class Impressions:
    stage: int
    users: np.ndarray
    candidates: np.ndarray  # (n, 1 + n_neg); column 0 is the clicked item
    labels: np.ndarray

    def __len__(self):
        return len(self.users)


@dataclass
class DatasetSplit:
    partition: StagePartition
    train_stages: list
    val_stage: int
    test_stage: int
    val: Impressions
    test: Impressions
    n_neg: int = 4

    def impressions(self, which):
        return {"val": self.val, "test": self.test}[which]


def build_impressions(partition, stage, n_neg, rng):
    users, items = partition.stage_edges(stage)
    negs, _ = sample_negatives(partition, users, np.full(len(users), stage), n_neg, rng)
    cands = np.concatenate([items[:, None], negs], axis=1)
    labels = np.zeros_like(cands)
    labels[:, 0] = 1
    return Impressions(stage, users.copy(), cands, labels)


def chronological_split(partition: StagePartition, n_neg=4, seed=0) -> DatasetSplit:
    """Last stage tests, the one before validates, the rest trains."""
    T = partition.n_stages
    if T < 3:
        raise SplitError(
            f"need at least 3 stages for train/validation/test, got {T}; "
            "use a smaller window or a longer log"
        )
    val = build_impressions(partition, T - 2, n_neg, derive_rng(seed, "split/val"))
    test = build_impressions(partition, T - 1, n_neg, derive_rng(seed, "split/test"))
    return DatasetSplit(partition, list(range(T - 2)), T - 2, T - 1, val, test, n_neg)
