"""Command-line entry point: ``relcast <subcommand> [flags]``.

Settings resolve as flags > ``--config`` YAML file > built-in defaults.
Exit codes: 0 success, 1 I/O failure, 2 usage or validation error,
3 checkpoint mismatch, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import yaml

from .autodiff.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .data import NormStats, load_dataset, make_mask, save_dataset
from .errors import CheckpointMismatch, ConvergenceError, RelcastError, TrainingDiverged
from .graph import DEFAULT_DAMPING, SpanPolicy, retrieve_scored, target_relations
from .synthesis import SynthesisConfig, SynthesisModel
from .synthetic import synth_data_gen
from .trainer import (
    ExperimentConfig,
    TaskSetup,
    TheoryReport,
    evaluate,
    fit_model,
    prepare,
    uncertainty_delta,
)

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_MISMATCH, EXIT_NUMERIC = 0, 1, 2, 3, 4

SWEEP_COLUMNS = ["setting", "task", "r", "k", "lr", "seed", "rmse", "mae", "sigma", "delta"]
CHECKPOINT_FILE = "checkpoint.json"
HISTORY_FILE = "history.json"


class UsageError(RelcastError, ValueError):
    """Invalid flag or config-file value."""


# -- run configuration ----------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """Every tunable setting of a run. ``r``, ``k`` and ``lr`` hold sweep lists."""

    data: str | None = None
    out: str | None = None
    task: str = "forecast"
    setting: str = "single"
    length: int = 24
    r: tuple[float, ...] = (0.5,)
    k: tuple[int, ...] = (5,)
    lr: tuple[float, ...] = (1e-3,)
    c: float = DEFAULT_DAMPING
    history_only: bool = False
    split_seed: int = 0
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    train_stride: int | None = None
    d: int = 16
    layers: int = 1
    heads: int = 4
    d_ff: int | None = None
    batch_size: int = 100
    patience: int = 10
    max_epochs: int = 200
    seed: int = 0
    loss_on: str = "all"
    eval_seed: int = 1234
    denormalized: bool = False

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def setup(self, r: float | None = None, k: int | None = None) -> TaskSetup:
        return TaskSetup(task=self.task, setting=self.setting, length=self.length,
                         k=self.k[0] if k is None else k, rate=self.r[0] if r is None else r, c=self.c,
                         history_only=self.history_only, split_seed=self.split_seed,
                         fractions=self.fractions, train_stride=self.train_stride)

    def experiment(self, lr: float | None = None) -> ExperimentConfig:
        return ExperimentConfig(d=self.d, layers=self.layers, heads=self.heads, d_ff=self.d_ff,
                                lr=self.lr[0] if lr is None else lr, batch_size=self.batch_size,
                                patience=self.patience, max_epochs=self.max_epochs, seed=self.seed,
                                loss_on=self.loss_on)


_LISTS = {"r": float, "k": int, "lr": float, "fractions": float}


def _coerce(key: str, value):
    """Normalize a raw value (flag string or YAML scalar/list) to the field type."""
    if key in _LISTS:
        if isinstance(value, str):
            value = [p for p in value.split(",") if p.strip()]
        elif not isinstance(value, (list, tuple)):
            value = [value]
        try:
            out = tuple(_LISTS[key](x) for x in value)
        except (TypeError, ValueError):
            raise UsageError(f"{key}: expected a comma-separated list, got {value!r}") from None
        if not out:
            raise UsageError(f"{key}: empty list")
        return out
    default = getattr(RunConfig, key, None)
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"{key}: expected a boolean, got {value!r}")
            return value.lower() in ("true", "1", "yes")
        return bool(value)
    if value is None:
        return None
    kind = {"c": float}.get(key)
    if kind is None and isinstance(default, (int, float)):
        kind = type(default)
    if key in ("d_ff", "train_stride"):
        kind = int
    if kind is not None:
        try:
            if kind is int and isinstance(value, float) and not value.is_integer():
                raise ValueError
            return kind(value)
        except (TypeError, ValueError):
            raise UsageError(f"{key}: expected {kind.__name__}, got {value!r}") from None
    return str(value)


def load_config_file(path) -> dict:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise UsageError(f"config file {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"config file {path} must hold a mapping")
    unknown = sorted(set(raw) - set(RunConfig.keys()))
    if unknown:
        raise UsageError(f"unknown config keys {unknown} in {path}")
    return {k: _coerce(k, v) for k, v in raw.items()}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, the optional config file and explicitly passed flags."""
    merged = {}
    if getattr(args, "config", None):
        merged.update(load_config_file(args.config))
    for key in RunConfig.keys():
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = _coerce(key, value)
    cfg = RunConfig(**merged)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.task not in ("forecast", "impute"):
        raise UsageError(f"task must be 'forecast' or 'impute', got {cfg.task!r}")
    if cfg.setting not in ("single", "spatial_temporal"):
        raise UsageError(f"setting must be 'single' or 'spatial_temporal', got {cfg.setting!r}")
    if any(not 0 < r < 1 for r in cfg.r):
        raise UsageError(f"missing rates must lie in (0, 1), got {list(cfg.r)}")
    if any(k < 0 for k in cfg.k):
        raise UsageError("k must be >= 0")
    if any(lr <= 0 for lr in cfg.lr):
        raise UsageError("learning rates must be positive")
    if not 0 < cfg.c < 1:
        raise UsageError(f"damping c must lie in (0, 1), got {cfg.c}")
    if cfg.loss_on not in ("all", "missing"):
        raise UsageError("loss_on must be 'all' or 'missing'")
    if len(cfg.fractions) != 3:
        raise UsageError("fractions needs three values (train, val, test)")


def _single(cfg: RunConfig, *names: str) -> None:
    for name in names:
        if len(getattr(cfg, name)) != 1:
            raise UsageError(f"this command takes a single --{name}, got {list(getattr(cfg, name))}")


# -- argument parser --------------------------------------------------------------

def _add_run_flags(p: argparse.ArgumentParser, sweep: bool = False) -> None:
    p.add_argument("--config", help="YAML file with run settings (keys as flag names, underscores)")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--task", choices=["forecast", "impute"])
    p.add_argument("--setting", choices=["single", "spatial_temporal"])
    p.add_argument("--length", type=int, help="snippet length T")
    many = " (comma-separated list)" if sweep else ""
    p.add_argument("--r", help="missing rate" + many)
    p.add_argument("--k", help="number of references" + many)
    p.add_argument("--lr", help="learning rate" + many)
    p.add_argument("--c", type=float, help="RWR damping factor")
    p.add_argument("--history-only", dest="history_only", default=None, action="store_const", const=True,
                   help="forecasting references end at the separation step")
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--fractions", help="train,val,test fractions")
    p.add_argument("--train-stride", dest="train_stride", type=int, help="stride of training windows")
    p.add_argument("--d", type=int, help="hidden width")
    p.add_argument("--layers", type=int, help="aggregation blocks")
    p.add_argument("--heads", type=int)
    p.add_argument("--d-ff", dest="d_ff", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--loss-on", dest="loss_on", choices=["all", "missing"])
    p.add_argument("--eval-seed", dest="eval_seed", type=int)
    p.add_argument("--denormalized", default=None, action="store_const", const=True,
                   help="report metrics in original units")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relcast", description="Retrieval-based time series completion.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="write a seeded ring-graph dataset")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--t", type=int, default=96, help="series length T'")
    p.add_argument("--period", type=int, default=24)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--community-size", dest="community_size", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("retrieve", help="print the top-k references of a target as JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--target", help="series id in the dataset")
    p.add_argument("--relations", help="comma-separated series ids related to a new target")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--c", type=float, default=DEFAULT_DAMPING)
    p.add_argument("--start", type=int, help="absolute start step of the target window (default: last window)")
    p.add_argument("--length", type=int, default=24)
    p.add_argument("--task", choices=["forecast", "impute"], default="impute")
    p.add_argument("--r", type=float, default=0.5, help="missing rate (sets the separation step)")
    p.add_argument("--history-only", dest="history_only", action="store_true")
    p.add_argument("--include-self", dest="include_self", action="store_true",
                   help="let the target's own history be retrieved")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("train", help="train one model and write a checkpoint")
    _add_run_flags(p)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="complete one target window with a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target", required=True, help="series id")
    p.add_argument("--start", type=int, help="absolute start step (default: last window)")
    p.add_argument("--input", help="CSV (t,var_1..) of the target window; empty or nan cells are missing")
    p.add_argument("--task", choices=["forecast", "impute"])
    p.add_argument("--r", type=float, help="missing rate used to mask the window when --input is absent")
    p.add_argument("--mask-seed", dest="mask_seed", type=int, default=0)
    p.add_argument("--model-config", dest="model_config",
                   help="YAML synthesis settings that must match the checkpoint")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="train and score every (r, k, lr) cell, write report.json and sweep.csv")
    _add_run_flags(p, sweep=True)
    p.add_argument("--checkpoint", help="score this trained model instead of training")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("theory-check", help="print sigma, delta and MSE and verify their relation")
    p.add_argument("--report", help="report.json written by eval")
    p.add_argument("--sigma", type=float)
    p.add_argument("--v", type=int, default=1)
    p.set_defaults(func=cmd_theory_check)
    return parser


# -- commands ---------------------------------------------------------------------

def cmd_synth_gen(args) -> int:
    if args.period > args.t:
        raise UsageError(f"--period {args.period} exceeds --t {args.t}")
    db = synth_data_gen(args.n, args.t, args.period, noise=args.noise, seed=args.seed,
                        community_size=args.community_size)
    save_dataset(db, args.out)
    print(f"wrote {db.n} series x {db.t_prime} steps to {args.out}")
    return EXIT_OK


def _default_start(db, length: int) -> int:
    return db.end_time - length


def cmd_retrieve(args) -> int:
    db = load_dataset(args.data)
    if (args.target is None) == (args.relations is None):
        raise UsageError("give exactly one of --target or --relations")
    start = _default_start(db, args.length) if args.start is None else args.start
    tau = math.floor(args.length * (1 - args.r) + 1e-9) if args.task == "forecast" else None
    history = args.history_only or (args.task == "forecast" and db.period is None)
    policy = SpanPolicy.for_task(args.task, args.length, db.period, tau, history)
    if args.target is not None:
        node = db.index_of(args.target)
        rel = target_relations(db.graph, node, include_self=args.include_self)
        exclude = [] if args.include_self else [node]
        target_id = args.target
    else:
        rel = [db.index_of(s.strip()) for s in args.relations.split(",") if s.strip()]
        exclude, target_id = [], "query"
    res = retrieve_scored(db, rel, start, args.length, args.k, policy, args.c, exclude, target_id)
    out = res.to_dict()
    out["policy"] = {"mode": policy.mode, "delta_t": policy.delta_t, "length": policy.length}
    out["target_start"] = start
    print(json.dumps(out, indent=2))
    return EXIT_OK


def _checkpoint_config(model_cfg: SynthesisConfig) -> dict:
    return {"model": model_cfg.to_dict()}


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    _single(cfg, "r", "k", "lr")
    if not cfg.data:
        raise UsageError("--data is required")
    out = Path(cfg.out or "run")
    db = load_dataset(cfg.data)
    setup = cfg.setup()
    data = prepare(db, setup)
    result = fit_model(data, cfg.experiment())
    out.mkdir(parents=True, exist_ok=True)
    mcfg = result.model.config
    extra = {
        "stats": data.stats.to_dict(),
        "run": _jsonable(asdict(cfg)),
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
    }
    save_checkpoint(out / CHECKPOINT_FILE, result.model, _checkpoint_config(mcfg), extra)
    (out / HISTORY_FILE).write_text(json.dumps(_jsonable(result.history), indent=2) + "\n", encoding="utf-8")
    print(f"best epoch {result.best_epoch}, val loss {result.best_val_loss:.6f}; wrote {out / CHECKPOINT_FILE}")
    return EXIT_OK


def _load_model(path, override: dict | None = None):
    payload = read_checkpoint(path)
    stored = payload["config"].get("model")
    if stored is None:
        raise CheckpointMismatch(f"{path} has no model config")
    requested = dict(stored)
    if override:
        unknown = set(override) - set(stored)
        if unknown:
            raise UsageError(f"unknown model config keys {sorted(unknown)}")
        requested.update(override)
    mcfg = SynthesisConfig.from_dict(requested)
    model = SynthesisModel(mcfg)
    load_checkpoint(path, model, _checkpoint_config(mcfg))
    return model, payload.get("extra", {})


def _read_window_csv(path, length: int, v: int) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """``[T, v]`` values with NaN for missing cells, the observation mask, and the time column."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header = ["t"] + [f"var_{j + 1}" for j in range(v)]
    if not rows or rows[0] != header:
        raise UsageError(f"{path}: header must be {header}")
    body = [r for r in rows[1:] if r]
    if len(body) != length:
        raise UsageError(f"{path}: expected {length} rows, got {len(body)}")
    values = np.full((length, v), np.nan)
    times = []
    for i, row in enumerate(body):
        if len(row) != v + 1:
            raise UsageError(f"{path}: row {i + 2} needs {v + 1} cells")
        times.append(int(row[0]))
        for j, cell in enumerate(row[1:]):
            cell = cell.strip()
            if cell and cell.lower() != "nan":
                try:
                    values[i, j] = float(cell)
                except ValueError:
                    raise UsageError(f"{path}: row {i + 2} has non-numeric cell {cell!r}") from None
    if not np.all(np.isfinite(values[~np.isnan(values)])):
        raise UsageError(f"{path}: non-finite observed value")
    return values, (~np.isnan(values)).astype(float), times


def splice(observed: np.ndarray, predicted: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Keep observed entries verbatim and fill the rest from ``predicted``."""
    return np.where(mask == 1, observed, predicted)


def cmd_infer(args) -> int:
    override = load_model_override(args.model_config) if args.model_config else None
    model, extra = _load_model(args.checkpoint, override)
    mcfg = model.config
    run = extra.get("run", {})
    task = args.task or run.get("task", "forecast")
    stats = NormStats.from_dict(extra["stats"]) if "stats" in extra else None
    db = load_dataset(args.data)
    if db.v != mcfg.v:
        raise UsageError(f"dataset has {db.v} variates, model expects {mcfg.v}")
    node = db.index_of(args.target)
    T = mcfg.length
    start = _default_start(db, T) if args.start is None else args.start

    if args.input:
        raw, mask, times = _read_window_csv(args.input, T, db.v)
    else:
        rate = args.r if args.r is not None else (run.get("r") or [0.5])[0]
        mask = make_mask(task, T, db.v, rate, args.mask_seed).bits
        raw = np.where(mask == 1, db.snippet(node, start, T).values, np.nan)
        times = list(range(start, start + T))
    if mask.all():
        raise UsageError("target window has no missing cells")
    if not mask.any():
        raise UsageError("target window has no observed cells")

    refs = None
    if mcfg.k > 0:
        if task == "forecast":
            tau = int(mask.all(axis=1).argmin()) if not mask.all(axis=1).all() else T
            history = bool(run.get("history_only")) or db.period is None
            policy = SpanPolicy.for_task("forecast", T, db.period, tau, history)
        else:
            policy = SpanPolicy.imputation(T)
        allow_self = run.get("setting") == "spatial_temporal" and task == "forecast"
        rel = target_relations(db.graph, node, include_self=allow_self)
        res = retrieve_scored(db, rel, start, T, mcfg.k, policy, run.get("c", DEFAULT_DAMPING),
                              [] if allow_self else [node], args.target)
        refs = np.stack([s.values for s in res.snippets])

    filled = np.where(mask == 1, raw, 0.0)
    if stats is not None:
        filled = (filled - stats.mean) / stats.std
        refs = None if refs is None else (refs - stats.mean) / stats.std
    pred = model.predict(filled, mask, refs)
    if stats is not None:
        pred = pred * stats.std + stats.mean
    completed = splice(raw, pred, mask)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t"] + [f"var_{j + 1}" for j in range(db.v)])
    for t, row in zip(times, completed):
        writer.writerow([t] + [repr(float(x)) for x in row])
    Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    print(f"completed {int((mask == 0).sum())} missing cells; wrote {args.out}")
    return EXIT_OK


def load_model_override(path) -> dict:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot read model config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"{path} must hold a mapping")
    return raw


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def _sweep_row(setting, task, r, k, lr, seed, report, theory) -> list[str]:
    return [setting, task, _fmt(r), str(k), _fmt(lr), str(seed), _fmt(report.rmse), _fmt(report.mae),
            _fmt(theory.sigma_hat), _fmt(theory.delta)]


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    if not cfg.data:
        raise UsageError("--data is required")
    out = Path(cfg.out or "eval")
    db = load_dataset(cfg.data)
    cells, rows = [], []
    if args.checkpoint:
        model, extra = _load_model(args.checkpoint)
        lr = (extra.get("run", {}).get("lr") or [float("nan")])[0]
        ks, lrs = [model.config.k], [lr]
    else:
        ks, lrs = list(cfg.k), list(cfg.lr)
    for r in cfg.r:
        for k in ks:
            data = prepare(db, cfg.setup(r=r, k=k))
            for lr in lrs:
                if args.checkpoint:
                    trained_epoch = None
                else:
                    result = fit_model(data, cfg.experiment(lr=lr))
                    model, trained_epoch = result.model, result.best_epoch
                report = evaluate(model, data.test, cfg.task, r, cfg.eval_seed,
                                  stats=data.stats if cfg.denormalized else None,
                                  metadata={"setting": cfg.setting, "lr": lr, "train_seed": cfg.seed,
                                            "best_epoch": trained_epoch})
                report.breakdown[repr(r)] = {"rmse": report.rmse, "mae": report.mae, "n": report.n_eval_points}
                theory = TheoryReport.from_report(report, db.v)
                cells.append({"eval": report.to_dict(), "theory": theory.to_dict()})
                rows.append(_sweep_row(cfg.setting, cfg.task, r, k, lr, cfg.seed, report, theory))
    out.mkdir(parents=True, exist_ok=True)
    report_doc = {"config": _jsonable(asdict(cfg)), "cells": _jsonable(cells)}
    (out / "report.json").write_text(json.dumps(report_doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    writer.writerows(rows)
    (out / "sweep.csv").write_text(buf.getvalue(), encoding="utf-8")
    print(buf.getvalue(), end="")
    return EXIT_OK


def cmd_theory_check(args) -> int:
    if (args.report is None) == (args.sigma is None):
        raise UsageError("give exactly one of --report or --sigma")
    if args.sigma is not None:
        entries = [TheoryReport(args.sigma, uncertainty_delta(args.sigma, args.v), args.sigma ** 2, args.v)]
    else:
        try:
            doc = json.loads(Path(args.report).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read report {args.report}: {exc}") from exc
        entries = [TheoryReport(**cell["theory"]) for cell in doc.get("cells", [])]
        if not entries:
            raise UsageError(f"{args.report} holds no cells")
    ok = True
    for th in entries:
        delta = uncertainty_delta(th.sigma_hat, th.v)
        consistent = th.delta == delta and abs(th.sigma_hat ** 2 - th.mse) <= 1e-12
        ok &= consistent
        print(json.dumps({"sigma_hat": th.sigma_hat, "delta": th.delta, "mse": th.mse, "v": th.v,
                          "consistent": consistent}))
    return EXIT_OK if ok else EXIT_NUMERIC


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CheckpointMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (TrainingDiverged, ConvergenceError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (RelcastError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
