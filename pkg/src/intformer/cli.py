"""Command-line entry point: generate, prepare, train, evaluate, explain, benchmark.

Every subcommand reads a flat JSON config (``--config``), optionally
overrides seeds (``--seed-override seed_train=7``) and writes its artifacts
into ``--out``.  Each artifact records the config hash, and replaying a
subcommand with the same config reproduces it byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import io
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import workflow
from .datamodel import APPROACH_COLUMNS, CrashEvent, SnapshotFrame
from .errors import ConfigurationError, DependencyError, IntegrityError, IntformerError
from .eval_explain import explain_windows, metrics_json, summary_export
from .pipeline import WindowSet
from .trainer import TrainResult, loss_csv
from .workflow import RunConfig

log = logging.getLogger("intformer")

SNAPSHOTS = "snapshots.csv"
CRASHES = "crashes.csv"
SELECTION = "selection.json"
TRAIN_WINDOWS = "windows-train.bin"
TEST_WINDOWS = "windows-test.bin"
MANIFEST = "prepare.json"
CHECKPOINT = "checkpoint.json"
LOSSES = "losses.csv"
METRICS = "metrics.json"
ATTRIBUTIONS = "attributions.csv"
SUMMARY = "attribution-summary.csv"
BENCHMARK = "benchmark.csv"
BENCHMARK_JSON = "benchmark.json"

PRODUCER = {
    SNAPSHOTS: "generate",
    CRASHES: "generate",
    SELECTION: "prepare",
    TRAIN_WINDOWS: "prepare",
    TEST_WINDOWS: "prepare",
    MANIFEST: "prepare",
    CHECKPOINT: "train",
}


# ---------------------------------------------------------------- file helpers


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def require(out: Path, name: str) -> Path:
    path = out / name
    if not path.exists():
        raise DependencyError(f"{path} is missing; run `intformer {PRODUCER[name]}` first")
    return path


def dump_json(doc: dict) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def _csv_body(text: str) -> str:
    return "".join(line for line in text.splitlines(keepends=True) if not line.startswith("#"))


def _header(cfg: RunConfig) -> str:
    return f"# config_hash={cfg.hash()}\n"


def write_snapshots(frame: SnapshotFrame, cfg: RunConfig) -> str:
    buf = io.StringIO()
    buf.write(_header(cfg))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["intersection_id", "timestamp", "approach_id", *APPROACH_COLUMNS])
    times = frame.time.astype(str)
    values = frame.values
    for i in range(len(frame)):
        w.writerow([frame.intersection[i], times[i], frame.approach[i], *map(repr, values[i].tolist())])
    return buf.getvalue()


def read_snapshots(text: str) -> SnapshotFrame:
    rows = list(csv.reader(io.StringIO(_csv_body(text))))
    header, rows = rows[0], rows[1:]
    if tuple(header[3:]) != APPROACH_COLUMNS:
        raise ConfigurationError("snapshots.csv columns do not follow the canonical feature order")
    if not rows:
        return SnapshotFrame(np.array([], str), np.array([], str), np.array([], "datetime64[m]"), np.zeros((0, len(APPROACH_COLUMNS))))
    cols = list(zip(*rows))
    return SnapshotFrame(
        np.array(cols[0]),
        np.array(cols[2]),
        np.array(cols[1], dtype="datetime64[m]"),
        np.array(cols[3:], dtype=np.float64).T,
    )


def write_crashes(crashes: Sequence[CrashEvent], cfg: RunConfig) -> str:
    buf = io.StringIO()
    buf.write(_header(cfg))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["intersection_id", "zone", "timestamp", "approach_id"])
    for c in crashes:
        w.writerow([c.intersection_id, c.zone, c.timestamp.isoformat(), c.approach_id or ""])
    return buf.getvalue()


def read_crashes(text: str) -> list[CrashEvent]:
    reader = csv.DictReader(io.StringIO(_csv_body(text)))
    return [
        CrashEvent(r["intersection_id"], r["zone"], dt.datetime.fromisoformat(r["timestamp"]), r["approach_id"] or None)
        for r in reader
    ]


_WINDOW_FIELDS = ("X", "y", "intersection", "approach", "end_time", "rows", "synthetic", "parents", "weight", "columns")


def save_windows(path: Path, ws: WindowSet, cfg: RunConfig) -> None:
    """Sequential ``np.save`` blocks: config hash, then the window fields."""
    with open(path, "wb") as f:
        np.save(f, np.array(cfg.hash()), allow_pickle=False)
        for name in _WINDOW_FIELDS:
            value = np.asarray(getattr(ws, name))
            if name == "columns":
                value = np.array(list(ws.columns), dtype=str)
            np.save(f, value, allow_pickle=False)


def load_windows(path: Path) -> tuple[WindowSet, str]:
    with open(path, "rb") as f:
        config_hash = str(np.load(f, allow_pickle=False))
        fields = {name: np.load(f, allow_pickle=False) for name in _WINDOW_FIELDS}
    fields["columns"] = tuple(fields["columns"].tolist())
    return WindowSet(**fields), config_hash


# ---------------------------------------------------------------- subcommands


def cmd_generate(cfg: RunConfig, out: Path) -> list[Path]:
    """Synthesize snapshots and crashes."""
    frame, crashes = workflow.generate(cfg)
    log.info("generated %d snapshots and %d crashes", len(frame), len(crashes))
    (out / SNAPSHOTS).write_text(write_snapshots(frame, cfg))
    (out / CRASHES).write_text(write_crashes(crashes, cfg))
    return [out / SNAPSHOTS, out / CRASHES]


def cmd_prepare(cfg: RunConfig, out: Path) -> list[Path]:
    """Format, label, select, stack, split and balance windows."""
    frame = read_snapshots(require(out, SNAPSHOTS).read_text())
    crashes = read_crashes(require(out, CRASHES).read_text())
    prepared = workflow.prepare(frame, crashes, cfg)
    save_windows(out / TRAIN_WINDOWS, prepared.train, cfg)
    save_windows(out / TEST_WINDOWS, prepared.test, cfg)
    selection = json.loads(prepared.selection.to_json())
    (out / SELECTION).write_text(dump_json({"config_hash": cfg.hash(), "seeds": cfg.seeds(), "selection": selection}))
    manifest = {
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "run": cfg.run_name,
        "seeds": cfg.seeds(),
        "stats": prepared.stats,
        "sha256": {TRAIN_WINDOWS: sha256_file(out / TRAIN_WINDOWS), TEST_WINDOWS: sha256_file(out / TEST_WINDOWS)},
    }
    (out / MANIFEST).write_text(dump_json(manifest))
    log.info("prepared %s", prepared.stats)
    return [out / TRAIN_WINDOWS, out / TEST_WINDOWS, out / SELECTION, out / MANIFEST]


def _load_train(out: Path) -> WindowSet:
    require(out, MANIFEST)
    return load_windows(require(out, TRAIN_WINDOWS))[0]


def _load_test(out: Path) -> WindowSet:
    """Test windows, refusing them if their bytes changed since ``prepare``."""
    manifest = json.loads(require(out, MANIFEST).read_text())
    path = require(out, TEST_WINDOWS)
    if sha256_file(path) != manifest["sha256"][TEST_WINDOWS]:
        raise IntegrityError(f"{path} changed since `prepare` recorded it; rerun `intformer prepare`")
    return load_windows(path)[0]


def _load_model(out: Path) -> TrainResult:
    return TrainResult.from_json(require(out, CHECKPOINT).read_text())


def cmd_train(cfg: RunConfig, out: Path) -> list[Path]:
    """Train the configured model family."""
    train_ws = _load_train(out)
    result = workflow.fit(train_ws, cfg)
    extra = {"config_hash": cfg.hash(), "seeds": cfg.seeds(), "run": cfg.run_name, "columns": list(train_ws.columns)}
    (out / CHECKPOINT).write_text(result.to_json(extra))
    (out / LOSSES).write_text(loss_csv(result.loss_history, cfg.hash()))
    return [out / CHECKPOINT, out / LOSSES]


def cmd_evaluate(cfg: RunConfig, out: Path) -> list[Path]:
    """Score the model on the untouched test windows."""
    test_ws = _load_test(out)
    doc = workflow.evaluate(_load_model(out), test_ws, cfg)
    (out / METRICS).write_text(metrics_json(doc))
    log.info("sensitivity %s, false alarm rate %s", doc["sensitivity"], doc["false_alarm_rate"])
    return [out / METRICS]


def cmd_explain(cfg: RunConfig, out: Path) -> list[Path]:
    """Shapley attributions for test windows."""
    test_ws = _load_test(out)
    result = _load_model(out)
    # explain crash windows first, then fill with the earliest others
    order = np.concatenate([np.flatnonzero(test_ws.y == 1), np.flatnonzero(test_ws.y == 0)])
    ids = order[: cfg.explain_windows]
    if len(ids) == 0:
        raise ConfigurationError("no test windows to explain")
    report = explain_windows(
        result.predict_proba,
        test_ws.X[ids],
        result.normalizer.mean,
        test_ws.columns,
        method="sampled",
        n_permutations=cfg.explain_permutations,
        seed=cfg.seed_explain,
        window_ids=ids,
    )
    names = report.feature_names
    buf = io.StringIO()
    buf.write(_header(cfg))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["timestep", "feature", "window_id", "shap_value", "feature_value"])
    for k, wid in enumerate(report.window_ids):
        for t, lag in enumerate(report.lags):
            for i, name in enumerate(names):
                w.writerow([int(lag), name, int(wid), repr(float(report.phi[k, t, i])), repr(float(report.values[k, t, i]))])
    (out / ATTRIBUTIONS).write_text(buf.getvalue())
    (out / SUMMARY).write_text(summary_export(report, cfg.top_k, True, cfg.hash()))
    return [out / ATTRIBUTIONS, out / SUMMARY]


BENCHMARK_HEADER = ["model", "run", "sensitivity", "false_alarm_rate", "tp", "fp", "fn", "tn", "final_train_loss", "probabilities_valid"]


def _fmt(v) -> str:
    return "" if v is None else repr(v) if isinstance(v, float) else str(v)


def benchmark_rows(docs: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCHMARK_HEADER)
    for d in docs:
        c = d["counts"]
        w.writerow([d["model"], d["run"], _fmt(d["sensitivity"]), _fmt(d["false_alarm_rate"]), c["tp"], c["fp"], c["fn"], c["tn"],
                    _fmt(d.get("final_train_loss")), _fmt(d.get("probabilities_valid"))])
    return buf.getvalue()


def cmd_benchmark(cfg: RunConfig, out: Path) -> list[Path]:
    """Train and score all model families on the same windows."""
    train_ws = _load_train(out)
    test_ws = _load_test(out)
    docs = []
    for family in cfg.families():
        log.info("benchmark: training %s", family)
        result = workflow.fit(train_ws, cfg, family)
        docs.append(workflow.evaluate(result, test_ws, cfg, family))
    docs.append(workflow.majority_class(test_ws, train_ws, cfg))
    (out / BENCHMARK).write_text(_header(cfg) + benchmark_rows(docs))
    (out / BENCHMARK_JSON).write_text(dump_json({"config_hash": cfg.hash(), "seeds": cfg.seeds(), "results": docs}))
    return [out / BENCHMARK, out / BENCHMARK_JSON]


COMMANDS = {
    "generate": cmd_generate,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "benchmark": cmd_benchmark,
}


# ---------------------------------------------------------------- entry point


def load_config(path: Optional[str], overrides: Sequence[str] = ()) -> RunConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(doc, dict) or any(isinstance(v, (dict, list)) for v in doc.values()):
            raise ConfigurationError("config must be a flat JSON object")
    return RunConfig.from_dict(doc).with_overrides(overrides)


def run(command: str, cfg: RunConfig, out) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return COMMANDS[command](cfg, out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="intformer", description="Intersection crash likelihood prediction pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", help="flat JSON run config (defaults apply to missing keys)")
        p.add_argument("--seed-override", action="append", default=[], metavar="K=V", help="override one seed, e.g. seed_train=7")
        p.add_argument("--out", default=".", help="artifact directory (default: current)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        warnings.showwarning = lambda message, *_a, **_k: print(f"warning: {message}", file=sys.stderr)
        try:
            cfg = load_config(args.config, args.seed_override)
            paths = run(args.command, cfg, args.out)
        except IntformerError as e:
            print(f"intformer {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
            return 2
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
