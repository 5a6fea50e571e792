"""Ranking metrics over impressions and the new-vs-historical freshness
analysis of top-10 lists."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import kernels


@dataclass
class Impression:
    items: np.ndarray
    scores: np.ndarray
    labels: np.ndarray
    user: int = -1
    stage: int = -1
    pub_stage: np.ndarray | None = None

    def __post_init__(self):
        self.items = np.asarray(self.items)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels).astype(np.int64)
        if not (len(self.items) == len(self.scores) == len(self.labels)):
            raise ValueError("items, scores and labels must have equal length")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("impression scores must be finite")


def _ranking(imp: Impression):
    # descending score, ties by ascending item index
    return np.lexsort((imp.items, -imp.scores))


def auc(imp: Impression) -> float:
    """Pairwise AUC; NaN when the impression lacks positives or negatives."""
    return float(kernels.impression_auc(imp.scores[None, :], imp.labels[None, :])[0])


def mrr(imp: Impression) -> float:
    ranked = imp.labels[_ranking(imp)]
    hits = np.flatnonzero(ranked)
    if len(hits) == 0:
        return float("nan")
    return 1.0 / (hits[0] + 1)


def ndcg_at_k(imp: Impression, k: int) -> float:
    if k < 1:
        raise ValueError("K must be >= 1")
    ranked = imp.labels[_ranking(imp)]
    n_pos = int(imp.labels.sum())
    if n_pos == 0:
        return float("nan")
    disc = 1.0 / np.log2(np.arange(2, k + 2))
    dcg = float((ranked[:k] * disc[: len(ranked[:k])]).sum())
    idcg = float(disc[: min(n_pos, k)].sum())
    return dcg / idcg


@dataclass
class RankingSummary:
    auc: float
    mrr: float
    ndcg5: float
    ndcg10: float
    n_impressions: int
    n_skipped: int


def summarize(impressions) -> RankingSummary:
    """Dataset-level means; impressions without both classes are skipped for AUC,
    those without positives for MRR/nDCG."""
    aucs, mrrs, n5, n10 = [], [], [], []
    skipped = 0
    for imp in impressions:
        a = auc(imp)
        if math.isnan(a):
            skipped += 1
        else:
            aucs.append(a)
        m = mrr(imp)
        if not math.isnan(m):
            mrrs.append(m)
            n5.append(ndcg_at_k(imp, 5))
            n10.append(ndcg_at_k(imp, 10))
    return RankingSummary(_mean(aucs), _mean(mrrs), _mean(n5), _mean(n10), len(aucs), skipped)


def summarize_arrays(scores, labels, items=None) -> RankingSummary:
    """Vectorised ``summarize`` for equally sized candidate lists."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if items is None:
        items = np.broadcast_to(np.arange(scores.shape[1]), scores.shape)
    per_auc = kernels.impression_auc(scores, labels)
    ok = ~np.isnan(per_auc)
    order = np.lexsort((items, -scores), axis=1) if scores.size else np.zeros_like(labels)
    ranked = np.take_along_axis(labels, order, axis=1)
    has_pos = ranked.sum(axis=1) > 0
    first = np.argmax(ranked > 0, axis=1)
    rr = 1.0 / (first + 1)
    c = scores.shape[1]

    def ndcg(k):
        disc = np.zeros(c)
        disc[: min(k, c)] = 1.0 / np.log2(np.arange(2, min(k, c) + 2))
        dcg = (ranked * disc).sum(axis=1)
        n_pos = labels.sum(axis=1)
        cum = np.concatenate([[0.0], np.cumsum(disc)])
        idcg = cum[np.minimum(n_pos, c)]
        return np.where(idcg > 0, dcg / np.where(idcg > 0, idcg, 1.0), np.nan)

    return RankingSummary(
        _mean(per_auc[ok]),
        _mean(rr[has_pos]),
        _mean(ndcg(5)[has_pos]),
        _mean(ndcg(10)[has_pos]),
        int(ok.sum()),
        int((~ok).sum()),
    )


def _mean(xs):
    xs = np.asarray(xs, dtype=np.float64)
    if xs.size == 0:
        return float("nan")
    return float(math.fsum(xs.tolist()) / xs.size)


# ---------------------------------------------------------------------------
# freshness
# ---------------------------------------------------------------------------


@dataclass
class FreshnessReport:
    new_pct: float
    hist_pct: float
    nrank: float | None
    orank: float | None
    n_lists: int


def freshness_report(top_lists, is_new, is_hist, list_len=10) -> FreshnessReport:
    """``top_lists`` is a sequence of ranked item-index arrays (best first).

    New% / Historical% average the per-list share over ``list_len`` slots.
    NRank / ORank average the 0-based positions of new / historical items per
    list, then over lists that contain at least one such item (None if none).
    """
    is_new = np.asarray(is_new, dtype=bool)
    is_hist = np.asarray(is_hist, dtype=bool)
    new_share, hist_share, nranks, oranks = [], [], [], []
    for lst in top_lists:
        lst = np.asarray(lst)[:list_len]
        pos = np.arange(len(lst))
        n_mask = is_new[lst]
        h_mask = is_hist[lst]
        new_share.append(n_mask.sum() / list_len)
        hist_share.append(h_mask.sum() / list_len)
        if n_mask.any():
            nranks.append(pos[n_mask].mean())
        if h_mask.any():
            oranks.append(pos[h_mask].mean())
    return FreshnessReport(
        _mean(new_share) if new_share else 0.0,
        _mean(hist_share) if hist_share else 0.0,
        _mean(nranks) if nranks else None,
        _mean(oranks) if oranks else None,
        len(new_share),
    )


def top_k(scores, k, exclude=None):
    """Indices of the k best items per row (ties by ascending index).
    ``exclude`` is a boolean mask of the same shape."""
    s = np.asarray(scores, dtype=np.float64).copy()
    if exclude is not None:
        s[exclude] = -np.inf
    order = np.lexsort((np.broadcast_to(np.arange(s.shape[1]), s.shape), -s), axis=1)
    return order[:, :k]


# ---------------------------------------------------------------------------
# report serialisation
# ---------------------------------------------------------------------------

CSV_COLUMNS = (
    "run_id", "config_hash", "variant", "seed", "auc", "mrr", "ndcg5", "ndcg10",
    "new_pct", "hist_pct", "nrank", "orank", "n_impressions",
)


@dataclass
class MetricsReport:
    run_id: str
    config_hash: str
    ranking: RankingSummary
    freshness: FreshnessReport | None = None
    variant: str = "full"
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def row(self):
        f = self.freshness
        return {
            "run_id": self.run_id,
            "config_hash": self.config_hash,
            "variant": self.variant,
            "seed": self.seed,
            "auc": _fmt(self.ranking.auc),
            "mrr": _fmt(self.ranking.mrr),
            "ndcg5": _fmt(self.ranking.ndcg5),
            "ndcg10": _fmt(self.ranking.ndcg10),
            "new_pct": _fmt(f.new_pct) if f else "",
            "hist_pct": _fmt(f.hist_pct) if f else "",
            "nrank": _fmt(f.nrank) if f and f.nrank is not None else "",
            "orank": _fmt(f.orank) if f and f.orank is not None else "",
            "n_impressions": self.ranking.n_impressions,
        }

    def to_json(self):
        payload = {
            "run_id": self.run_id,
            "config_hash": self.config_hash,
            "variant": self.variant,
            "seed": self.seed,
            "ranking": asdict(self.ranking),
            "freshness": asdict(self.freshness) if self.freshness else None,
        }
        payload.update(self.extra)
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def to_csv(self, header=True):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        if header:
            w.writeheader()
        w.writerow(self.row())
        return buf.getvalue()


def _fmt(x):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.6f}"
