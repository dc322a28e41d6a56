"""Command-line entry point: synth, train, predict, evaluate, ablate, bench, check.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 divergence,
4 self-check failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, _kernels
from .attention import AttentionCost, track_cost
from .config import DataConfig, RunConfig, load_config, parse_flags
from .data import DataError, Dataset, Normalizer, Schema, load_csv, prepare, synth_wind
from .model import ConfigError, ModelConfig, ablation_grid, build_model, load_checkpoint, save_checkpoint
from .tensor import Tape, Tensor, mean, memory, no_tape, square
from .train import DivergenceError, Metrics, TrainReport, evaluate, predict, train, write_predictions

log = logging.getLogger("fastpowerformer")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_CHECK = 0, 1, 2, 3, 4

CHECKPOINT = "model.npz"
REPORT = "train_report.jsonl"
TIMINGS = "timings.json"
MANIFEST = "manifest.json"
CLEANING = "cleaning_report.json"
PREDICTIONS = "predictions.csv"
ABLATION = "ablation.csv"
BENCH = "bench.csv"

ABLATION_COLUMNS = ["ID", "transpose", "fecam", "lstm", "MSE", "MAE", "MAPE", "MSE_MW", "MAE_MW", "MAPE_MW",
                    "epoch_seconds", "peak_bytes", "score_entries"]
BENCH_COLUMNS = ["tokens", "attention", "token_count", "score_entries", "entries_vs_dense", "forward_seconds",
                 "backward_seconds", "peak_bytes"]
PREDICTION_COLUMNS = ["window", "step", "truth_mw", "prediction_mw"]


def fingerprint(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _run_config(args) -> RunConfig:
    run = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        run = run.with_seed(args.seed)
    if getattr(args, "flags", None):
        run = run.with_flags(parse_flags(args.flags))
    return run


def _dataset(run: RunConfig, data_path, normalizer: Optional[Normalizer] = None) -> tuple[Dataset, Schema]:
    schema = run.data.schema()
    frame = load_csv(data_path, schema)
    ds = prepare(frame, run.seq_len, run.pred_len, schema, run.data.stride,
                 run.data.encode_directions, run.data.include_power, normalizer)
    return ds, schema


def _model_config(run: RunConfig, ds: Dataset) -> ModelConfig:
    cfg = run.model_config(ds.n_channels)
    if cfg.n_channels != ds.n_channels:
        raise DataError(f"config expects {cfg.n_channels} input channels, data provides {ds.n_channels}")
    return cfg


def _write_manifest(out: Path, run: RunConfig, cfg: ModelConfig, data_path, artifacts: dict) -> None:
    manifest = {
        "tool": "fastpowerformer",
        "version": __version__,
        "kernel_backend": _kernels.BACKEND,
        "seed": cfg.seed,
        "config": {"model": cfg.to_dict(), "data": asdict(run.data), "train": run.train.to_dict()},
        "data": {"path": str(data_path), "sha256": fingerprint(data_path)},
        "artifacts": artifacts,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    frame = synth_wind(args.seed, args.rows, args.channels)
    frame.to_csv(args.out)
    print(f"wrote {frame.n_rows} rows x {len(frame.names)} channels to {args.out}")
    return EXIT_OK


def _train_one(run: RunConfig, ds: Dataset, out: Path) -> TrainReport:
    cfg = _model_config(run, ds)
    model = build_model(cfg)
    try:
        report = train(model, ds, run.train)
    except DivergenceError as exc:
        exc.report.write(out / REPORT)
        raise
    extra = {"normalizer": ds.normalizer.to_dict(), "channels": ds.channels, "target": ds.target,
             "data": asdict(run.data)}
    save_checkpoint(out / CHECKPOINT, model, extra)
    report.write(out / REPORT)
    report.write_timings(out / TIMINGS)
    return report


def cmd_train(args) -> int:
    run = _run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds, _ = _dataset(run, args.data)
    cfg = _model_config(run, ds)
    if ds.report is not None:
        ds.report.write(out / CLEANING)
    report = _train_one(run, ds, out)
    _write_manifest(out, run, cfg, args.data, {
        "checkpoint": CHECKPOINT, "report": REPORT, "timings": TIMINGS, "cleaning_report": CLEANING,
    })
    print(f"test MSE {report.test.mse!r} (persistence {report.persistence.mse!r}); artifacts in {out}")
    return EXIT_OK


def _from_checkpoint(args) -> tuple:
    try:
        model, extra = load_checkpoint(args.checkpoint)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError("checkpoint", f"{args.checkpoint}: {exc}") from None
    cfg = model.config
    data_cfg = DataConfig(**extra["data"]) if "data" in extra else DataConfig()
    run = RunConfig({"seq_len": cfg.seq_len, "pred_len": cfg.pred_len}, data_cfg)
    norm = Normalizer.from_dict(extra["normalizer"])
    ds, _ = _dataset(run, args.data, norm)
    if ds.channels != extra.get("channels", ds.channels) or ds.n_channels != cfg.n_channels:
        raise DataError(f"checkpoint expects {cfg.n_channels} channels {extra.get('channels')}, "
                        f"data provides {ds.n_channels}")
    return model, ds


def cmd_predict(args) -> int:
    model, ds = _from_checkpoint(args)
    y_hat = predict(model, ds.test)
    mu, sd = ds.normalizer.mean[ds.target], ds.normalizer.std[ds.target]
    write_predictions(args.out, ds.test, y_hat, mu, sd)
    print(f"test MSE {Metrics.of(ds.test.targets, y_hat).mse!r}; predictions in {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, ds = _from_checkpoint(args)
    rep = evaluate(model, ds, TrainReport({}))
    result = {k: asdict(getattr(rep, k)) for k in ("test", "test_mw", "persistence", "persistence_mw")}
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    run = _run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds, _ = _dataset(run, args.data)
    base = _model_config(run, ds)
    rows = []
    for label, cfg in ablation_grid(base):
        row_dir = out / label
        row_dir.mkdir(exist_ok=True)
        row_run = replace(run, model=cfg.to_dict())
        log.info("ablation row %s flags %s", label, cfg.flags)
        rep = _train_one(row_run, ds, row_dir)
        rows.append({
            "ID": label,
            "transpose": int(cfg.use_transpose), "fecam": int(cfg.use_fecam), "lstm": int(cfg.use_lstm),
            "MSE": rep.test.mse, "MAE": rep.test.mae, "MAPE": rep.test.mape,
            "MSE_MW": rep.test_mw.mse, "MAE_MW": rep.test_mw.mae, "MAPE_MW": rep.test_mw.mape,
            "epoch_seconds": float(np.mean(rep.epoch_seconds)),
            "peak_bytes": rep.peak_bytes, "score_entries": rep.score_entries,
        })
    _write_table(out / ABLATION, ABLATION_COLUMNS, rows)
    _write_manifest(out, run, base, args.data, {"table": ABLATION, **{r["ID"]: r["ID"] for r in rows}})
    for r in rows:
        print(f"{r['ID']:>3}  flags {r['transpose']}{r['fecam']}{r['lstm']}  MSE {r['MSE']:.4f}  "
              f"entries {r['score_entries']}  peak {r['peak_bytes']}")
    return EXIT_OK


def _write_table(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def bench_rows(base: ModelConfig, batch: int = 4, seed: int = 0) -> list[dict]:
    """Forward/backward timing and counters for time vs variate tokens, dense vs LSH."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, base.seq_len, base.n_channels))
    y = rng.standard_normal((batch, base.pred_len))
    rows = []
    dense_entries = {}
    for tokens, transpose in (("time", False), ("variate", True)):
        for attention in ("dense", "lsh"):
            cfg = replace(base, use_transpose=transpose, attention=attention)
            model = build_model(cfg)
            params = model.parameters()
            memory.reset_peak()
            cost = AttentionCost()
            with track_cost(cost):
                t0 = time.perf_counter()
                with Tape() as tape:
                    tape.watch(params)
                    loss = mean(square(model(x).y_hat - Tensor(y)))
                    t1 = time.perf_counter()
                    tape.backward(loss)
                t2 = time.perf_counter()
            # forward entries only: the reversible backward repeats the forward pass
            with no_tape(), track_cost() as fwd:
                model(x)
            if attention == "dense":
                dense_entries[tokens] = fwd.score_entries
            rows.append({
                "tokens": tokens, "attention": attention, "token_count": cfg.token_count,
                "score_entries": fwd.score_entries,
                "entries_vs_dense": fwd.score_entries / dense_entries[tokens],
                "forward_seconds": t1 - t0, "backward_seconds": t2 - t1, "peak_bytes": memory.peak,
            })
    return rows


def cmd_bench(args) -> int:
    run = _run_config(args)
    cfg = run.model_config(run.model.get("n_channels", ModelConfig.n_channels))
    rows = bench_rows(cfg, batch=args.batch, seed=cfg.seed)
    out = Path(args.out)
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / BENCH
    _write_table(out, BENCH_COLUMNS, rows)
    for r in rows:
        print(f"{r['tokens']:>8} {r['attention']:>5}  tokens {r['token_count']:>4}  entries {r['score_entries']:>9}  "
              f"fwd {r['forward_seconds']:.3f}s  bwd {r['backward_seconds']:.3f}s")
    return EXIT_OK


# ---------------------------------------------------------------------------
# self-check
# ---------------------------------------------------------------------------

def _check_csv(path: Path, columns: list[str], numeric: Sequence[str]) -> list[str]:
    problems = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != columns:
            return [f"{path}: header {reader.fieldnames} != {columns}"]
        for i, row in enumerate(reader, start=2):
            for c in numeric:
                try:
                    if not np.isfinite(float(row[c])):
                        problems.append(f"{path}:{i}: {c} is not finite")
                except ValueError:
                    problems.append(f"{path}:{i}: {c}={row[c]!r} is not a number")
    return problems


def check_outputs(directory) -> list[str]:
    """Validate every known artifact found under ``directory``; return problems."""
    root = Path(directory)
    problems: list[str] = []
    seen = 0
    for path in sorted(root.rglob("*")):
        try:
            if path.name == REPORT:
                rep = TrainReport.read(path)
                if not rep.diverged:
                    for e in rep.epochs:
                        if not (np.isfinite(e.train_loss) and np.isfinite(e.val_loss)):
                            problems.append(f"{path}: epoch {e.epoch} has non-finite loss")
                    if rep.epochs and len(rep.epochs) > rep.config["train"]["epochs"]:
                        problems.append(f"{path}: more epochs than configured")
            elif path.name == MANIFEST:
                m = json.loads(path.read_text())
                for key in ("config", "data", "seed", "artifacts", "version"):
                    if key not in m:
                        problems.append(f"{path}: missing {key!r}")
            elif path.name == ABLATION:
                problems += _check_csv(path, ABLATION_COLUMNS, ABLATION_COLUMNS[4:])
                with open(path) as fh:
                    ids = [r["ID"] for r in csv.DictReader(fh)]
                if ids != ["I", "II", "III", "IV", "V"]:
                    problems.append(f"{path}: rows {ids} are not I..V")
            elif path.name == BENCH:
                problems += _check_csv(path, BENCH_COLUMNS, BENCH_COLUMNS[2:])
            elif path.suffix == ".csv" and path.name.startswith("predictions"):
                problems += _check_csv(path, PREDICTION_COLUMNS, PREDICTION_COLUMNS)
            elif path.name == CLEANING:
                d = json.loads(path.read_text())
                if "channels" not in d:
                    problems.append(f"{path}: missing per-channel counts")
            else:
                continue
            seen += 1
        except (ValueError, KeyError, IndexError) as exc:
            problems.append(f"{path}: unreadable ({exc})")
    if not seen:
        problems.append(f"{root}: no known artifacts found")
    return problems


def cmd_check(args) -> int:
    problems = check_outputs(args.dir)
    for p in problems:
        print(p)
    if problems:
        return EXIT_CHECK
    print(f"{args.dir}: all artifacts conform")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fastpf", description="Wind power forecasting with a fast reversible transformer.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, out_help="output directory"):
        sp.add_argument("--config", help="TOML config file (defaults used when omitted)")
        if data:
            sp.add_argument("--data", required=True, help="input CSV")
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--seed", type=int, help="override model and training seed")
        sp.add_argument("--flags", help="ablation override: row label I..V or transpose/fecam/lstm bits like 101")

    sp = sub.add_parser("synth", help="write a synthetic wind-farm CSV")
    sp.add_argument("--out", required=True)
    sp.add_argument("--rows", type=int, default=8000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--channels", type=int, default=12, help="numeric columns including power")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train, then write checkpoint, report and manifest")
    common(sp)
    sp.set_defaults(func=cmd_train)

    for name, func, help_, out_help in (
        ("predict", cmd_predict, "write truth/prediction CSV for the test split", "output CSV"),
        ("evaluate", cmd_evaluate, "print test and persistence metrics", "optional JSON output"),
    ):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--data", required=True)
        sp.add_argument("--out", required=(name == "predict"), help=out_help)
        sp.set_defaults(func=func)

    sp = sub.add_parser("ablate", help="train the five ablation rows and tabulate them")
    common(sp)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("bench", help="time and count attention for token layouts x attention kinds")
    common(sp, data=False, out_help="output directory or .csv path")
    sp.add_argument("--batch", type=int, default=4)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("check", help="validate emitted artifacts against their schemas")
    sp.add_argument("dir")
    sp.set_defaults(func=cmd_check)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get("FASTPF_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
