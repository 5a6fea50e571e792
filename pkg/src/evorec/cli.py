"""Command-line runner: synthetic data, training, evaluation, ablations,
sweeps and summary reports.

Config is one JSON file with optional sections::

    {"train": {...TrainConfig...}, "synth": {...SynthConfig...},
     "data": "log.tsv", "features": null, "pub_times": null,
     "window": "1w", "new_stages": 1, "hist_stages": 1}

Flags override the file.  ``--seed`` is the root seed: it seeds the
generator, the split and training.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import math
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    SynthConfig,
    chronological_split,
    load_interactions,
    load_pub_times,
    parse_duration,
    partition_stages,
    synth_generate,
)
from .errors import EvorecError
from .metrics import CSV_COLUMNS
from .model import ABLATIONS
from .training import TrainConfig, evaluate, load_checkpoint, run_training, save_checkpoint

log = logging.getLogger("evorec")

CONFIG_KEYS = ("train", "synth", "data", "features", "pub_times", "window", "new_stages", "hist_stages")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig | None = field(default_factory=SynthConfig)
    data: str | None = None
    features: str | None = None
    pub_times: str | None = None
    window: str = "1w"
    new_stages: int = 1
    hist_stages: int = 1

    def to_dict(self):
        return {
            "train": self.train.to_dict(),
            "synth": asdict(self.synth) if self.synth is not None and self.data is None else None,
            "data": self.data,
            "features": self.features,
            "pub_times": self.pub_times,
            "window": self.window,
            "new_stages": self.new_stages,
            "hist_stages": self.hist_stages,
        }

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def run_id(self):
        return f"{self.train.ablation}-s{self.train.seed}-{self.hash()}"


def _synth_from(raw):
    known = {f.name for f in fields(SynthConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown synth option(s): {', '.join(sorted(unknown))}")
    cfg = SynthConfig(**raw)
    cfg.validate()
    return cfg


def load_run_config(path=None, overrides=None) -> RunConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ValueError(f"{p}: expected a JSON object")
    unknown = set(raw) - set(CONFIG_KEYS)
    if unknown:
        raise ValueError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    train = dict(raw.get("train") or {})
    synth = dict(raw.get("synth") or {})
    rc = {k: raw[k] for k in CONFIG_KEYS[2:] if k in raw}

    ov = overrides or {}
    if ov.get("seed") is not None:
        train["seed"] = synth["seed"] = ov["seed"]
    if ov.get("ablation") is not None:
        train["ablation"] = ov["ablation"]
    if ov.get("precision") is not None:
        train["precision"] = ov["precision"]
    for k in ("data", "features", "pub_times", "window"):
        if ov.get(k) is not None:
            rc[k] = ov[k]
    for k, v in (ov.get("set") or {}).items():
        section, _, key = k.partition(".")
        if section == "train" and key:
            train[key] = v
        elif section == "synth" and key:
            synth[key] = v
        elif k in CONFIG_KEYS[2:]:
            rc[k] = v
        else:
            raise ValueError(f"cannot set {k!r}; use train.<key>, synth.<key> or a top-level key")
    if "seed" in train and "seed" not in synth:
        synth["seed"] = train["seed"]
    cfg = RunConfig(TrainConfig.from_dict(train), _synth_from(synth), **rc)
    parse_duration(cfg.window)
    return cfg


# ---------------------------------------------------------------------------
# io helpers; everything goes through these so writes stay under --out
# ---------------------------------------------------------------------------


def _write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".part")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
    return path


def _csv_text(rows, columns):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def source_revision():
    """git revision when available, else a hash of the package sources."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], cwd=here, capture_output=True, text=True, timeout=5
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"git:{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    h = hashlib.sha256()
    for f in sorted(here.rglob("*.py")):
        h.update(f.read_bytes())
    return f"src:{h.hexdigest()[:12]}"


# ---------------------------------------------------------------------------
# data + single run
# ---------------------------------------------------------------------------


@dataclass
class Prepared:
    log: object
    split: object
    pub_times: np.ndarray | None


def prepare(rc: RunConfig) -> Prepared:
    if rc.data is not None:
        log_ = load_interactions(rc.data, rc.features)
        pub = load_pub_times(rc.pub_times, log_.item_ids) if rc.pub_times else None
    else:
        sd = synth_generate(rc.synth)
        log_, pub = sd.log, sd.pub_times()
    part = partition_stages(log_, rc.window)
    split = chronological_split(part, rc.train.n_neg, seed=rc.train.seed)
    return Prepared(log_, split, pub)


def _manifest(rc: RunConfig, out: Path, timings=None, extra=None):
    m = {
        "run_id": rc.run_id(),
        "config": rc.to_dict(),
        "config_hash": rc.hash(),
        "seed": rc.train.seed,
        "source_revision": source_revision(),
        "version": __version__,
        "output_dir": str(out),
        "timings": timings or {},
    }
    if extra:
        m.update(extra)
    return json.dumps(m, sort_keys=True, indent=2) + "\n"


def train_run(rc: RunConfig, out: Path, prepared: Prepared | None = None):
    """Train + test one configuration; writes manifest, history, checkpoint
    and metrics under ``out``.  Returns the MetricsReport."""
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    _write_atomic(out / "manifest.json", _manifest(rc, out, {"status": "started"}))
    prepared = prepared or prepare(rc)
    t_data = time.perf_counter()
    res = run_training(rc.train, prepared.split, prepared.log.item_features)
    t_train = time.perf_counter()
    report = evaluate(
        res.params, rc.train, prepared.split, prepared.log.item_features, "test", prepared.pub_times,
        rc.new_stages, rc.hist_stages, run_id=rc.run_id(), config_hash=rc.hash(),
    )
    report.extra = {"best_epoch": res.best_epoch, "best_val_auc": res.best_val_auc,
                    "epochs_run": len(res.history)}
    t_eval = time.perf_counter()

    hist_cols = sorted({k for h in res.history for k in h} - {"epoch"}, key=lambda k: (k == "seconds", k))
    history = [{k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in h.items() if k != "seconds"}
               for h in res.history]
    _write_atomic(out / "history.csv", _csv_text(history, ["epoch"] + [c for c in hist_cols if c != "seconds"]))
    ckpt = out / "checkpoint.npz"
    save_checkpoint(ckpt.with_name("checkpoint.npz.part"), res.params, rc.train, extra={"run": rc.to_dict()})
    os.replace(ckpt.with_name("checkpoint.npz.part"), ckpt)
    _write_atomic(out / "metrics.json", report.to_json())
    _write_atomic(out / "metrics.csv", report.to_csv())
    timings = {"data_s": t_data - t0, "train_s": t_train - t_data, "eval_s": t_eval - t_train,
               "total_s": time.perf_counter() - t0, "status": "done"}
    _write_atomic(out / "manifest.json", _manifest(rc, out, timings))
    return report


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, rc: RunConfig):
    out = Path(args.out)
    sd = synth_generate(rc.synth)
    tsv = sd.write(out)
    _write_atomic(out / "manifest.json", _manifest(rc, out, extra={
        "files": sorted(p.name for p in out.iterdir() if p.name != "manifest.json"),
        "n_interactions": len(sd.log.users),
    }))
    print(f"wrote {len(sd.log.users)} interactions to {tsv}")
    return 0


def cmd_train(args, rc: RunConfig):
    report = train_run(rc, Path(args.out))
    print(report.to_csv(), end="")
    return 0


def cmd_eval(args, rc_unused):
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    params, tcfg, extra = load_checkpoint(ckpt)
    raw = dict(extra.get("run") or {})
    raw.pop("train", None)
    synth = raw.pop("synth", None)
    rc = RunConfig(tcfg, _synth_from(synth) if synth else SynthConfig(seed=tcfg.seed), **raw)
    for k in ("data", "features", "pub_times", "window"):
        if getattr(args, k, None) is not None:
            setattr(rc, k, getattr(args, k))
    prepared = prepare(rc)
    report = evaluate(
        params, tcfg, prepared.split, prepared.log.item_features, args.which, prepared.pub_times,
        rc.new_stages, rc.hist_stages, run_id=rc.run_id(), config_hash=rc.hash(),
    )
    out = Path(args.out)
    _write_atomic(out / "manifest.json", _manifest(rc, out, extra={"checkpoint": str(ckpt), "split": args.which}))
    _write_atomic(out / "metrics.json", report.to_json())
    _write_atomic(out / "metrics.csv", report.to_csv())
    print(report.to_csv(), end="")
    return 0


def cmd_ablate(args, rc: RunConfig):
    out = Path(args.out)
    variants = args.variants.split(",") if args.variants else list(ABLATIONS)
    for v in variants:
        if v not in ABLATIONS:
            raise ValueError(f"unknown variant {v!r}; expected one of {', '.join(ABLATIONS)}")
    prepared = prepare(rc)
    rows = []
    for v in variants:
        vrc = copy.deepcopy(rc)
        vrc.train.ablation = v
        log.info("ablation variant %s", v)
        rows.append(train_run(vrc, out / v, prepared).row())
    _write_atomic(out / "ablation.csv", _csv_text(rows, CSV_COLUMNS))
    print(_csv_text(rows, CSV_COLUMNS), end="")
    return 0


def _parse_grid(text):
    key, sep, values = text.partition("=")
    if not sep or not values:
        raise UsageError(f"--grid expects key=v1,v2,... got {text!r}")
    return key.strip(), [json.loads(v) for v in values.split(",")]


SWEEP_COLUMNS = ("param", "value", "n_stages", "status") + CSV_COLUMNS


def cmd_sweep(args, rc: RunConfig):
    out = Path(args.out)
    points = []
    if args.grid:
        key, values = _parse_grid(args.grid)
        points = [(key, v) for v in values]
    elif args.window:
        points = [("window", w) for w in args.window.split(",")]
    else:
        raise UsageError("sweep needs --window w1,w2,... or --grid key=v1,v2,...")
    rows = []
    for key, value in points:
        prc = copy.deepcopy(rc)
        if key == "window":
            prc.window = str(value)
        else:
            name = key.split(".", 1)[-1]
            if name not in {f.name for f in fields(TrainConfig)}:
                raise ValueError(f"unknown training option {name!r} in --grid")
            prc.train = TrainConfig.from_dict({**prc.train.to_dict(), name: value})
        tag = f"{key.replace('.', '_')}={value}"
        row = {"param": key, "value": value}
        try:
            prepared = prepare(prc)
        except EvorecError as exc:
            # too few stages for this window: record it and move on
            rows.append({**row, "n_stages": "", "status": f"skipped: {exc}"})
            continue
        row["n_stages"] = prepared.split.partition.n_stages
        report = train_run(prc, out / tag, prepared)
        rows.append({**row, "status": "ok", **report.row()})
    _write_atomic(out / "sweep.csv", _csv_text(rows, SWEEP_COLUMNS))
    print(_csv_text(rows, SWEEP_COLUMNS), end="")
    return 0


def _num(x):
    try:
        v = float(x)
    except (TypeError, ValueError):
        return None
    return None if math.isnan(v) else v


REPORT_METRICS = ("auc", "mrr", "ndcg5", "ndcg10", "new_pct", "hist_pct", "nrank", "orank")


def cmd_report(args, rc_unused):
    rows = []
    for src in args.inputs:
        p = Path(src)
        files = sorted(p.rglob("metrics.csv")) if p.is_dir() else [p]
        if not files or not all(f.exists() for f in files):
            raise FileNotFoundError(f"no metrics found at {p}")
        for f in files:
            with f.open(encoding="utf-8", newline="") as fh:
                rows.extend(r for r in csv.DictReader(fh) if r.get("status", "ok") == "ok")
    by = args.by
    groups = {}
    for r in rows:
        groups.setdefault(r.get(by, ""), []).append(r)
    out_rows = []
    for key in sorted(groups):
        g = groups[key]
        rec = {by: key, "n_runs": len(g)}
        for m in REPORT_METRICS:
            vals = [v for v in (_num(r.get(m)) for r in g) if v is not None]
            rec[f"{m}_mean"] = f"{math.fsum(vals) / len(vals):.6f}" if vals else ""
            rec[f"{m}_std"] = f"{float(np.std(vals)):.6f}" if vals else ""
        out_rows.append(rec)
    cols = [by, "n_runs"] + [f"{m}_{s}" for m in REPORT_METRICS for s in ("mean", "std")]
    text = _csv_text(out_rows, cols)
    _write_atomic(Path(args.out) / "summary.csv", text)
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _set_pair(text):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="root seed (data, split, training)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--ablation", choices=ABLATIONS)
    common.add_argument("--precision", type=int, choices=(32, 64))
    common.add_argument("--set", action="append", type=_set_pair, default=[], metavar="KEY=VALUE",
                        help="override one config value, e.g. train.lr=0.001 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="interaction TSV (user, item, timestamp); synthetic when omitted")
    data.add_argument("--features", help="item feature TSV (default: <stem>.features.tsv if present)")
    data.add_argument("--pub-times", dest="pub_times", help="item publication times (truth JSON or TSV)")

    ap = argparse.ArgumentParser(prog="evorec", description=" ".join(__doc__.split("\n\n")[0].split()))
    ap.add_argument("--version", action="version", version=f"evorec {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="write a synthetic log + sidecars")

    p = sub.add_parser("train", parents=[common, data], help="train and test one configuration")
    p.add_argument("--window", help="stage length, e.g. 1w")

    p = sub.add_parser("eval", parents=[common, data], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--which", choices=("test", "val"), default="test")
    p.add_argument("--window")

    p = sub.add_parser("ablate", parents=[common, data], help="full model and the four ablations")
    p.add_argument("--window")
    p.add_argument("--variants", help="comma list (default: all five)")

    p = sub.add_parser("sweep", parents=[common, data], help="window sizes or a loss-weight grid")
    p.add_argument("--window", help="comma list of windows, e.g. 1w,2w,3w,4w")
    p.add_argument("--grid", help="one training key and values, e.g. lambda_sl=0.001,0.01,0.1")

    p = sub.add_parser("report", parents=[common], help="aggregate metrics CSVs into summary.csv")
    p.add_argument("inputs", nargs="+", help="metrics/ablation/sweep CSVs or run directories")
    p.add_argument("--by", default="variant", help="grouping column (default: variant)")
    return ap


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def dispatch(argv) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {
            "seed": args.seed,
            "ablation": args.ablation,
            "precision": args.precision,
            "data": getattr(args, "data", None),
            "features": getattr(args, "features", None),
            "pub_times": getattr(args, "pub_times", None),
            "set": dict(args.set),
        }
        # a comma list is a sweep axis, not the run's own window
        if args.command != "sweep":
            overrides["window"] = getattr(args, "window", None)
        rc = load_run_config(args.config, overrides)
        return COMMANDS[args.command](args, rc)
    except UsageError as exc:
        ap.print_usage(sys.stderr)
        print(f"evorec: error: {exc}", file=sys.stderr)
        return 2
    except (EvorecError, OSError, ValueError) as exc:
        print(f"evorec: error: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
