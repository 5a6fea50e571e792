import csv
import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from evorec.cli import dispatch, load_run_config
from evorec.metrics import CSV_COLUMNS

ROOT = Path(__file__).resolve().parents[1]
TINY = str(ROOT / "configs" / "tiny.json")


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def row_id(run_dir):
    return read_csv(Path(run_dir) / "metrics.csv")[0]["run_id"]


def files_under(root):
    return {p.relative_to(root) for p in Path(root).rglob("*") if p.is_file()}


@pytest.fixture
def sandbox(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def test_config_overrides_win():
    rc = load_run_config(TINY, {"seed": 7, "ablation": "no_lra", "precision": 64, "window": "2w",
                                "set": {"train.lr": 0.1, "synth.n_users": 30, "new_stages": 2}})
    assert rc.train.seed == rc.synth.seed == 7
    assert rc.train.ablation == "no_lra" and rc.train.precision == 64 and rc.train.lr == 0.1
    assert rc.synth.n_users == 30 and rc.window == "2w" and rc.new_stages == 2
    assert rc.run_id().startswith("no_lra-s7-")
    with pytest.raises(ValueError):
        load_run_config(TINY, {"set": {"train.nope": 1}})


def test_gen_train_eval_pipeline(sandbox):
    assert dispatch(["gen-data", "--config", TINY, "--seed", "1", "--out", "data"]) == 0
    data = sandbox / "data"
    assert {"interactions.tsv", "interactions.features.tsv", "interactions.truth.json", "manifest.json"} <= {
        p.name for p in data.iterdir()}

    args = ["train", "--config", TINY, "--seed", "1", "--data", "data/interactions.tsv",
            "--pub-times", "data/interactions.truth.json"]
    assert dispatch(args + ["--out", "run_a"]) == 0
    assert dispatch(args + ["--out", "run_b"]) == 0
    a, b = sandbox / "run_a", sandbox / "run_b"
    for name in ("manifest.json", "history.csv", "checkpoint.npz", "metrics.json", "metrics.csv"):
        assert (a / name).exists(), name
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "history.csv").read_bytes() == (b / "history.csv").read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["timings"]["status"] == "done" and manifest["config"]["train"]["seed"] == 1
    assert manifest["source_revision"] and manifest["run_id"] == row_id(a)
    row = read_csv(a / "metrics.csv")[0]
    assert list(row) == list(CSV_COLUMNS) and row["new_pct"] != ""

    assert dispatch(["eval", "--checkpoint", "run_a/checkpoint.npz", "--out", "ev"]) == 0
    assert (sandbox / "ev" / "metrics.csv").read_text() == (a / "metrics.csv").read_text()
    # the synthetic path (no --data) regenerates the same log from the seed
    assert dispatch(["train", "--config", TINY, "--seed", "1", "--out", "run_c"]) == 0
    assert read_csv(sandbox / "run_c" / "metrics.csv")[0]["auc"] == row["auc"]


def test_ablate_five_variants(sandbox):
    assert dispatch(["ablate", "--config", TINY, "--out", "abl", "--set", "train.max_epochs=1"]) == 0
    rows = read_csv(sandbox / "abl" / "ablation.csv")
    assert [r["variant"] for r in rows] == ["full", "no_lpm", "no_ste", "no_lra", "no_gpm"]
    assert all(r["auc"] for r in rows)
    for r in rows:
        assert (sandbox / "abl" / r["variant"] / "metrics.csv").exists()


def test_sweep_windows_four_rows(sandbox):
    assert dispatch(["sweep", "--config", TINY, "--out", "sw", "--window", "1w,2w,3w,4w",
                     "--set", "synth.n_stages=12", "--set", "train.max_epochs=1"]) == 0
    rows = read_csv(sandbox / "sw" / "sweep.csv")
    assert [r["value"] for r in rows] == ["1w", "2w", "3w", "4w"]
    assert [r["n_stages"] for r in rows] == ["12", "6", "4", "3"]
    for r in rows:
        assert r["status"] == "ok" and r["auc"] and r["mrr"] and r["ndcg5"] and r["ndcg10"]


def test_sweep_too_few_stages_recorded(sandbox):
    assert dispatch(["sweep", "--config", TINY, "--out", "sw", "--window", "1w,4w",
                     "--set", "train.max_epochs=1"]) == 0
    rows = read_csv(sandbox / "sw" / "sweep.csv")
    assert rows[0]["status"] == "ok" and rows[1]["status"].startswith("skipped")


def test_grid_sweep_and_report(sandbox):
    assert dispatch(["sweep", "--config", TINY, "--out", "g", "--grid", "lambda_sl=0.01,1.0",
                     "--set", "train.max_epochs=1"]) == 0
    rows = read_csv(sandbox / "g" / "sweep.csv")
    assert [r["value"] for r in rows] == ["0.01", "1.0"]
    assert dispatch(["report", "g", "--out", "rep", "--by", "config_hash"]) == 0
    summary = read_csv(sandbox / "rep" / "summary.csv")
    assert len(summary) == 2 and all(r["n_runs"] == "1" for r in summary)
    assert dispatch(["report", "g/sweep.csv", "--out", "rep2", "--by", "param"]) == 0
    assert read_csv(sandbox / "rep2" / "summary.csv")[0]["n_runs"] == "2"


def test_writes_only_under_out(sandbox):
    before = files_under(sandbox)
    assert dispatch(["train", "--config", TINY, "--out", "nested/run"]) == 0
    new = files_under(sandbox) - before
    assert new and all(str(p).startswith("nested/run/") for p in new)


def test_unknown_flag_is_usage_error(sandbox, capsys):
    assert dispatch(["train", "--out", "x", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err
    assert dispatch(["sweep", "--config", TINY, "--out", "x"]) == 2
    assert not (sandbox / "x" / "sweep.csv").exists()


def test_missing_file_names_path(sandbox, capsys):
    rc = dispatch(["train", "--config", TINY, "--out", "r", "--data", "nowhere/log.tsv"])
    assert rc == 1
    assert "nowhere/log.tsv" in capsys.readouterr().err
    assert not (sandbox / "r" / "metrics.csv").exists()
    assert dispatch(["train", "--config", "missing.json", "--out", "r"]) == 1
    assert "missing.json" in capsys.readouterr().err
    assert dispatch(["eval", "--checkpoint", "none.npz", "--out", "r"]) == 1
    assert "none.npz" in capsys.readouterr().err


def test_module_entry_point():
    env = dict(os.environ)
    out = subprocess.run([sys.executable, "-m", "evorec", "--version"], capture_output=True, text=True, env=env)
    assert out.returncode == 0 and out.stdout.startswith("evorec ")
    out = subprocess.run([sys.executable, "-m", "evorec", "nope"], capture_output=True, text=True, env=env)
    assert out.returncode != 0
