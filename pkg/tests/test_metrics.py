import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evorec.metrics import (
    CSV_COLUMNS,
    FreshnessReport,
    Impression,
    MetricsReport,
    auc,
    freshness_report,
    mrr,
    ndcg_at_k,
    summarize,
    summarize_arrays,
    top_k,
)

from oracles import brute_auc, direct_mrr, direct_ndcg

seeds = st.integers(0, 2**31 - 1)


def imp(pos, neg):
    scores = list(pos) + list(neg)
    labels = [1] * len(pos) + [0] * len(neg)
    return Impression(np.arange(len(scores)), scores, labels)


def ranked(rank, n=10):
    """One positive at 1-based ``rank`` among ``n`` candidates."""
    scores = -np.arange(n, dtype=float)
    labels = np.zeros(n, dtype=int)
    labels[rank - 1] = 1
    return Impression(np.arange(n), scores, labels)


@st.composite
def impressions(draw, max_c=12):
    c = draw(st.integers(2, max_c))
    seed = draw(seeds)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, c)
    labels[rng.integers(c)] = 1
    scores = rng.integers(0, 5, c).astype(float) + (rng.random(c) if draw(st.booleans()) else 0.0)
    return Impression(rng.permutation(40)[:c], scores, labels)


# ---------------------------------------------------------------------------
# worked examples
# ---------------------------------------------------------------------------


def test_auc_examples():
    assert auc(imp([0.9], [0.1, 0.2])) == 1.0
    assert auc(imp([0.5], [0.5])) == 0.5
    assert auc(imp([0.3], [0.1, 0.4])) == 0.5


def test_auc_without_negatives_skipped():
    s = summarize([imp([0.9], []), imp([0.9], [0.1])])
    assert s.n_skipped == 1 and s.auc == 1.0 and s.n_impressions == 1


def test_mrr_examples():
    assert mrr(ranked(1)) == 1.0
    assert mrr(ranked(3)) == pytest.approx(1 / 3, abs=1e-15)
    assert summarize([ranked(2), ranked(4)]).mrr == 0.375


def test_ndcg_examples():
    assert ndcg_at_k(ranked(1), 5) == 1.0
    assert ndcg_at_k(ranked(2), 5) == 1 / math.log2(3)
    assert round(ndcg_at_k(ranked(2), 5), 4) == 0.6309
    assert ndcg_at_k(ranked(6), 5) == 0.0
    assert ndcg_at_k(ranked(6), 10) == 1 / math.log2(7)
    with pytest.raises(ValueError):
        ndcg_at_k(ranked(1), 0)


def test_ties_broken_by_item_index():
    i = Impression([7, 3], [1.0, 1.0], [1, 0])
    assert mrr(i) == 0.5  # item 3 wins the tie
    assert mrr(Impression([3, 7], [1.0, 1.0], [1, 0])) == 1.0


def test_impression_validation():
    with pytest.raises(ValueError):
        Impression([0, 1], [0.1], [1, 0])
    with pytest.raises(ValueError):
        Impression([0, 1], [0.1, np.inf], [1, 0])


# ---------------------------------------------------------------------------
# oracle equivalence and properties
# ---------------------------------------------------------------------------


@given(impressions())
def test_metrics_match_direct_formulas(i):
    a = auc(i)
    ref = brute_auc(i.scores.tolist(), i.labels.tolist())
    assert (math.isnan(a) and math.isnan(ref)) or a == ref
    assert mrr(i) == direct_mrr(i.scores.tolist(), i.labels.tolist(), i.items.tolist())
    for k in (5, 10):
        assert ndcg_at_k(i, k) == pytest.approx(direct_ndcg(i.scores.tolist(), i.labels.tolist(), i.items.tolist(), k),
                                                abs=1e-15)


@given(impressions(), st.sampled_from(["exp", "cube", "affine", "arctan"]))
def test_metrics_invariant_under_monotone_transform(i, kind):
    f = {"exp": np.exp, "cube": lambda x: x**3, "affine": lambda x: 3 * x - 7, "arctan": np.arctan}[kind]
    j = Impression(i.items, f(i.scores), i.labels)
    assert auc(j) == auc(i) or (math.isnan(auc(j)) and math.isnan(auc(i)))
    assert mrr(j) == mrr(i)
    assert ndcg_at_k(j, 5) == ndcg_at_k(i, 5) and ndcg_at_k(j, 10) == ndcg_at_k(i, 10)


@given(st.integers(1, 10), st.integers(0, 10), st.integers(1, 10), seeds)
def test_ndcg_one_when_positives_lead(n_pos, n_neg, k, seed):
    n_pos = min(n_pos, k)
    rng = np.random.default_rng(seed)
    scores = np.concatenate([rng.random(n_pos) + 2, rng.random(n_neg)])
    labels = [1] * n_pos + [0] * n_neg
    assert ndcg_at_k(Impression(rng.permutation(30)[: n_pos + n_neg], scores, labels), k) == pytest.approx(1.0, abs=1e-15)


@given(st.lists(impressions(), min_size=1, max_size=12), st.randoms(use_true_random=False))
def test_dataset_metrics_order_invariant(imps, rnd):
    a = summarize(imps)
    shuffled = list(imps)
    rnd.shuffle(shuffled)
    b = summarize(shuffled)
    assert a == b or all(
        (x == y) or (isinstance(x, float) and math.isnan(x) and math.isnan(y))
        for x, y in zip(vars(a).values(), vars(b).values())
    )


@given(st.integers(1, 30), st.integers(2, 12), seeds)
def test_vectorised_summary_matches_per_impression(n, c, seed):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 4, (n, c)).astype(float)
    labels = rng.integers(0, 2, (n, c))
    items = np.stack([rng.permutation(50)[:c] for _ in range(n)])
    a = summarize_arrays(scores, labels, items)
    b = summarize([Impression(items[r], scores[r], labels[r]) for r in range(n)])
    for x, y in zip(vars(a).values(), vars(b).values()):
        assert x == pytest.approx(y, abs=1e-12, nan_ok=True)


# ---------------------------------------------------------------------------
# freshness
# ---------------------------------------------------------------------------


def test_freshness_examples():
    is_new = np.zeros(20, dtype=bool)
    is_new[[0, 2, 5]] = True
    is_hist = np.zeros(20, dtype=bool)
    rep = freshness_report([np.arange(10)], is_new, is_hist)
    assert rep.new_pct == pytest.approx(0.3) and rep.hist_pct == 0.0 and rep.orank is None
    assert rep.nrank == pytest.approx((0 + 2 + 5) / 3)
    only_two = np.zeros(20, dtype=bool)
    only_two[[0, 2]] = True
    assert freshness_report([np.arange(10)], only_two, is_hist).nrank == 1.0


def test_freshness_rank_averaged_over_lists_with_items():
    is_new = np.array([True, False, False, False])
    rep = freshness_report([[0, 1], [1, 0], [2, 3]], is_new, ~is_new, list_len=2)
    assert rep.nrank == 0.5  # lists 1 and 2 only
    assert rep.new_pct == pytest.approx(1 / 3)
    assert rep.n_lists == 3


@given(st.lists(st.permutations(list(range(12))), min_size=1, max_size=6), seeds)
def test_freshness_bounds(lists, seed):
    rng = np.random.default_rng(seed)
    is_new = rng.random(12) < 0.4
    is_hist = ~is_new & (rng.random(12) < 0.5)
    rep = freshness_report([np.array(l) for l in lists], is_new, is_hist)
    assert 0 <= rep.new_pct <= 1 and 0 <= rep.hist_pct <= 1
    for r in (rep.nrank, rep.orank):
        assert r is None or 0 <= r <= 9


def test_top_k_excludes_and_breaks_ties():
    s = np.array([[1.0, 3.0, 3.0, 0.5]])
    assert top_k(s, 2).tolist() == [[1, 2]]
    assert top_k(s, 2, exclude=np.array([[False, True, False, False]])).tolist() == [[2, 0]]


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------


def test_report_csv_and_json():
    s = summarize([ranked(2), ranked(4)])
    rep = MetricsReport("r1", "abc", s, FreshnessReport(0.3, 0.1, 1.0, None, 2), "no_lpm", 3)
    lines = rep.to_csv().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    row = dict(zip(CSV_COLUMNS, lines[1].split(",")))
    assert row["mrr"] == "0.375000" and row["orank"] == "" and row["variant"] == "no_lpm"
    payload = json.loads(rep.to_json())
    assert payload["ranking"]["mrr"] == 0.375 and payload["freshness"]["orank"] is None
    assert MetricsReport("r", "h", s).to_csv(header=False).count("\n") == 1
