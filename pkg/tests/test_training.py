import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evorec.data import SynthConfig, chronological_split, partition_stages, synth_generate
from evorec.encoders import propagate
from evorec.model import (
    GraphContext,
    apply_ablation,
    as_vars,
    batch_objective,
    encode,
    final_representations,
    init_params,
    objective_and_grads,
    pair_user_reps,
    stage_drift,
)
from evorec.numerics import autograd as ag
from evorec.numerics import finite_diff_check
from evorec.rng import derive_rng
from evorec.training import (
    TrainConfig,
    evaluate,
    load_checkpoint,
    make_batches,
    run_training,
    save_checkpoint,
    stage_batches,
    validation_auc,
)

from toys import toy_batch, toy_config, toy_problem

LSTM_KEYS = {f"lstm_{s}_{p}" for s in ("user", "item") for p in ("wx", "wh", "b")}


def attn_keys(cfg):
    return {f"attn{k}_{m}" for k in range(cfg.attn_layers) for m in "qkv"} | {"pos_emb"}


@pytest.fixture(scope="module")
def tiny():
    sd = synth_generate(SynthConfig(n_users=60, n_items=40, n_topics=4, n_stages=5, feature_dim=8, seed=0))
    split = chronological_split(partition_stages(sd.log, "1w"), seed=0)
    return sd, split


def tiny_cfg(**kw):
    base = dict(d=8, lr=5e-3, max_epochs=3, patience=3, batch_size=128, m_max=8, precision=64)
    base.update(kw)
    return TrainConfig(**base)


def strip_time(history):
    return [{k: v for k, v in r.items() if k != "seconds"} for r in history]


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.d, cfg.lr, cfg.batch_size, cfg.dropout, cfg.n_neg) == (64, 5e-6, 1024, 0.2, 4)
    assert (cfg.tau, cfg.lambda_t, cfg.lambda_cl, cfg.lambda_sl) == (0.1, 0.1, 0.01, 0.01)
    for bad in ({"d": 0}, {"ablation": "no_xyz"}, {"precision": 16}, {"dropout": 1.0}, {"lr": -1}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 1e-3, "nope": 1})
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.hash() == TrainConfig().hash() != TrainConfig(seed=1).hash()


# ---------------------------------------------------------------------------
# ablation wiring
# ---------------------------------------------------------------------------


def test_unknown_ablation():
    with pytest.raises(ValueError):
        apply_ablation("no_everything")


def test_no_lpm_strictly_fewer_params():
    cfg = toy_config()
    full = init_params(cfg, 3, 4, apply_ablation("full"), np.random.default_rng(0))
    no_lpm = init_params(cfg, 3, 4, apply_ablation("no_lpm"), np.random.default_rng(0))
    assert set(no_lpm) < set(full)
    assert sum(v.size for v in no_lpm.values()) < sum(v.size for v in full.values())
    assert not (LSTM_KEYS | attn_keys(cfg)) & set(no_lpm)
    assert set(init_params(cfg, 3, 4, apply_ablation("no_ste"), np.random.default_rng(0))) == set(full) - LSTM_KEYS
    assert set(init_params(cfg, 3, 4, apply_ablation("no_lra"), np.random.default_rng(0))) == set(full) - attn_keys(cfg)


def test_no_lpm_score_independent_of_stage():
    part, cfg, wiring, params, ctx = toy_problem("no_lpm")
    pv = {k: ag.Var(v) for k, v in params.items()}
    enc = encode(pv, ctx, wiring, cfg)
    a = pair_user_reps(pv, enc, ctx, wiring, cfg, [0, 1, 2], [0, 0, 0]).data
    b = pair_user_reps(pv, enc, ctx, wiring, cfg, [0, 1, 2], [1, 1, 1]).data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, enc.global_.data[:3])


def test_no_lra_ignores_prefix():
    # every user's vector is evolved + global whatever their prefix holds
    part, cfg, wiring, params, ctx = toy_problem("no_lra")
    pv = {k: ag.Var(v) for k, v in params.items()}
    enc = encode(pv, ctx, wiring, cfg)
    reps = pair_user_reps(pv, enc, ctx, wiring, cfg, [0, 1, 2], [1, 1, 1], mask_empty=False).data
    N = ctx.n_nodes
    expected = enc.evolved_flat.data[N + np.arange(3)] + enc.global_.data[:3]
    np.testing.assert_allclose(reps, expected, atol=1e-15)


def test_no_gpm_stage_inputs_differ_by_global_minus_initial():
    part, cfg, _, params, ctx = toy_problem("full")
    pv = {k: ag.Var(v) for k, v in params.items()}
    full = encode(pv, ctx, apply_ablation("full"), cfg)
    nog = encode(pv, ctx, apply_ablation("no_gpm"), cfg)
    # stage tables are linear in their input table
    diff = [a.data - b.data for a, b in zip(full.stage_tables, nog.stage_tables)]
    delta = full.global_.data - full.initial.data
    for adj, dtab in zip(ctx.stage_adj, diff):
        np.testing.assert_allclose(dtab, propagate(adj, ag.Var(delta), cfg.stage_layers).data, atol=1e-12)
    assert nog.global_ is None


def test_no_gpm_has_no_consistency_term():
    part, cfg, wiring, params, ctx = toy_problem("no_gpm")
    users, stages, pos, negs = toy_batch(part)
    br = batch_objective(as_vars(params), params, ctx, wiring, cfg, cfg.loss_weights(), users, stages, pos, negs)
    assert br.consistency == 0.0 and br.smoothness > 0


@pytest.mark.parametrize("ablation, dead", [
    ("no_lpm", LSTM_KEYS | attn_keys(toy_config())),
    ("no_ste", LSTM_KEYS),
    ("no_lra", attn_keys(toy_config())),
    ("no_gpm", set()),
])
def test_disabled_components_get_zero_gradient(ablation, dead):
    # full parameter set, reduced wiring: unreachable tensors get exactly zero
    part, cfg, _, params, ctx = toy_problem("full")
    users, stages, pos, negs = toy_batch(part)
    _, grads = objective_and_grads(params, ctx, apply_ablation(ablation), cfg, cfg.loss_weights(),
                                   users, stages, pos, negs)
    for k, g in grads.items():
        if k in dead:
            assert not np.any(g), k
        else:
            assert np.any(g), k


def test_causal_objective_gradients():
    part, cfg, wiring, params, _ = toy_problem("full")
    ctx = GraphContext(part, 1)
    users, stages, pos, negs = toy_batch(part)
    m = stages == 1
    args = (users[m], stages[m], pos[m], negs[m])
    w = cfg.loss_weights()
    br, grads = objective_and_grads(params, ctx, wiring, cfg, w, *args, rep_stages=stages[m] - 1)
    assert set(br.stage_losses) == {1}

    def loss_fn(p):
        with ag.no_grad():
            return batch_objective(as_vars(p), p, ctx, wiring, cfg, w, *args, rep_stages=stages[m] - 1).total

    analytic = {k: grads[k] + 2 * w.beta * params[k] for k in params}
    assert finite_diff_check(loss_fn, params, analytic, h=1e-6) < 1e-4


def test_stage_drift_zero_without_temporal_tables():
    part, cfg, wiring, params, ctx = toy_problem("no_lpm")
    assert stage_drift(params, ctx, wiring, cfg) == 0.0
    part, cfg, wiring, params, ctx = toy_problem("full")
    assert stage_drift(params, ctx, wiring, cfg) > 0.0


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@given(st.integers(0, 2**31 - 1), st.integers(1, 30))
def test_batches_partition_indices(seed, batch_size):
    rng = np.random.default_rng(seed)
    users = rng.integers(0, 10, 80)
    stages = rng.integers(1, 4, 80)
    for fn in (make_batches, stage_batches):
        batches = fn(users, stages, batch_size, np.random.default_rng(seed))
        flat = np.concatenate(batches)
        assert sorted(flat.tolist()) == list(range(80))
        # (user, stage) groups never straddle batches
        owner = {}
        for b, idx in enumerate(batches):
            for k in idx:
                assert owner.setdefault((users[k], stages[k]), b) == b
    for idx in stage_batches(users, stages, batch_size, np.random.default_rng(seed)):
        assert len(set(stages[idx].tolist())) == 1


# ---------------------------------------------------------------------------
# training runs
# ---------------------------------------------------------------------------


def test_zero_lr_leaves_params_unchanged(tiny):
    sd, split = tiny
    cfg = tiny_cfg(lr=0.0, beta=0.0)
    res = run_training(cfg, split, sd.log.item_features)
    init = init_params(cfg, res.n_users, res.n_items, apply_ablation("full"), derive_rng(cfg.seed, "init"),
                       sd.log.item_features)
    for k in init:
        np.testing.assert_array_equal(res.params[k], init[k])
    aucs = [r["val_auc"] for r in res.history]
    assert len(set(aucs)) == 1


def test_same_seed_same_history(tiny):
    sd, split = tiny
    a = run_training(tiny_cfg(max_epochs=2), split, sd.log.item_features)
    b = run_training(tiny_cfg(max_epochs=2), split, sd.log.item_features)
    assert strip_time(a.history) == strip_time(b.history)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


@pytest.mark.parametrize("ablation", ["full", "no_lpm", "no_ste", "no_lra", "no_gpm"])
def test_early_stopping_returns_best_checkpoint(tiny, ablation):
    sd, split = tiny
    cfg = tiny_cfg(max_epochs=6, patience=2, lr=2e-2, ablation=ablation, precision=32)
    res = run_training(cfg, split, sd.log.item_features)
    aucs = [r["val_auc"] for r in res.history]
    assert res.best_val_auc == max(aucs)
    assert res.best_epoch == int(np.argmax(aucs))
    assert validation_auc(res.params, split, sd.log.item_features, cfg, apply_ablation(ablation)) == pytest.approx(
        res.best_val_auc, abs=1e-12)
    # stopped exactly when patience ran out (or at max_epochs)
    assert len(aucs) == min(cfg.max_epochs, res.best_epoch + 1 + cfg.patience)
    assert all(v.dtype == np.float32 for v in res.params.values())


def test_single_training_stage_falls_back(caplog):
    sd = synth_generate(SynthConfig(n_users=40, n_items=30, n_topics=3, n_stages=3, feature_dim=4, seed=1))
    split = chronological_split(partition_stages(sd.log, "1w"))
    res = run_training(tiny_cfg(max_epochs=1), split, sd.log.item_features)
    assert "single training stage" in caplog.text
    assert len(res.history) == 1 and "L_t0" in res.history[0]


def test_evaluate_and_checkpoint_roundtrip(tiny, tmp_path):
    sd, split = tiny
    cfg = tiny_cfg(max_epochs=1)
    res = run_training(cfg, split, sd.log.item_features)
    rep = evaluate(res.params, cfg, split, sd.log.item_features, pub_times=sd.pub_times())
    assert 0 <= rep.ranking.auc <= 1 and rep.freshness is not None
    assert rep.freshness.n_lists == len(np.unique(split.test.users))
    path = save_checkpoint(tmp_path / "ck.npz", res.params, cfg, extra={"note": "x"})
    params, cfg2, extra = load_checkpoint(path)
    assert cfg2 == cfg and extra == {"note": "x"}
    for k in params:
        np.testing.assert_array_equal(params[k], res.params[k])
    rep2 = evaluate(params, cfg2, split, sd.log.item_features, pub_times=sd.pub_times())
    assert rep2.to_csv() == rep.to_csv()


def test_final_representations_fall_back_to_global_for_new_users():
    from evorec.data import InteractionLog

    rows = [("a", "x", 0), ("a", "y", 1), ("b", "y", 2), ("c", "x", 12)]  # c first clicks in stage 1
    part = partition_stages(InteractionLog.from_records(rows), 10)
    cfg = toy_config()
    wiring = apply_ablation("full")
    params = init_params(cfg, 3, 2, wiring, np.random.default_rng(0))
    ctx = GraphContext(part, 1)
    u, _ = final_representations(params, ctx, wiring, cfg)
    enc = encode({k: ag.Var(v) for k, v in params.items()}, ctx, wiring, cfg)
    np.testing.assert_array_equal(u[2], enc.global_.data[2])
    assert not np.allclose(u[:2], enc.global_.data[:2])


def test_training_loss_strictly_decreases_first_five_epochs():
    sd = synth_generate(SynthConfig(seed=0))
    split = chronological_split(partition_stages(sd.log, "1w"), seed=0)
    cfg = TrainConfig(lr=2e-3, max_epochs=5, patience=5, seed=0)
    res = run_training(cfg, split, sd.log.item_features)
    totals = [r["total"] for r in res.history]
    assert len(totals) == 5
    assert all(b < a for a, b in zip(totals, totals[1:])), totals
