"""Datasets, snippets, masks, normalization and splits.

Time is counted in absolute steps: a database covers
``[start_time, start_time + t_prime)`` and every snippet records the
absolute step of its first row.
"""
from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import DataError

if TYPE_CHECKING:
    from .graph import RelationGraph

SERIES_FILE = "series.csv"
GRAPH_FILE = "graph.csv"
META_FILE = "meta.json"


def natural_key(s: str):
    return [int(tok) if tok.isdigit() else tok for tok in re.split(r"(\d+)", s)]


@dataclass(frozen=True, eq=False)
class TimeSeriesDB:
    """``N`` series of ``t_prime`` steps and ``v`` variates plus their relation graph."""

    values: np.ndarray
    series_ids: tuple[str, ...]
    graph: "RelationGraph"
    start_time: int = 0
    step_unit: str = "step"
    period: int | None = None
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 3 or min(values.shape) < 1:
            raise DataError(f"values must be a non-empty N x T' x v array, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DataError("database values must be finite")
        ids = tuple(str(s) for s in self.series_ids)
        if len(ids) != values.shape[0]:
            raise DataError(f"{len(ids)} series ids for {values.shape[0]} series")
        if len(set(ids)) != len(ids):
            raise DataError("series ids must be unique")
        if self.graph.n_nodes != values.shape[0]:
            raise DataError(f"graph has {self.graph.n_nodes} nodes, database has {values.shape[0]} series")
        if self.period is not None and self.period < 1:
            raise DataError("period must be a positive step count")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "series_ids", ids)
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(ids)})

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def t_prime(self) -> int:
        return self.values.shape[1]

    @property
    def v(self) -> int:
        return self.values.shape[2]

    @property
    def end_time(self) -> int:
        return self.start_time + self.t_prime

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def index_of(self, series_id: str) -> int:
        try:
            return self._index[series_id]
        except KeyError:
            raise DataError(f"unknown series id {series_id!r}") from None

    def snippet(self, series: int | str, start: int, length: int) -> "Snippet":
        """Window of ``length`` steps starting at absolute step ``start``."""
        idx = self.index_of(series) if isinstance(series, str) else int(series)
        lo = start - self.start_time
        if lo < 0 or lo + length > self.t_prime or length < 1:
            raise DataError(
                f"window [{start}, {start + length}) outside database range [{self.start_time}, {self.end_time})"
            )
        return Snippet(self.values[idx, lo:lo + length], start, self.series_ids[idx])

    def with_values(self, values: np.ndarray) -> "TimeSeriesDB":
        return TimeSeriesDB(values, self.series_ids, self.graph, self.start_time, self.step_unit, self.period)


@dataclass(frozen=True, eq=False)
class Snippet:
    values: np.ndarray
    start: int
    series_id: str = ""

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] < 1:
            raise DataError(f"snippet values must be T x v with T >= 1, got {values.shape}")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def v(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary presence mask; 1 = observed, 0 = missing."""

    bits: np.ndarray
    kind: str
    tau: int | None = None
    rate: float | None = None
    seed: int | None = None

    def __post_init__(self):
        bits = np.array(self.bits, dtype=np.float64)
        if bits.ndim == 1:
            bits = bits[:, None]
        if not np.all((bits == 0) | (bits == 1)):
            raise DataError("mask bits must be 0 or 1")
        if self.kind not in ("forecast", "impute"):
            raise DataError(f"unknown mask kind {self.kind!r}")
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    @property
    def n_missing(self) -> int:
        return int(self.bits.size - self.bits.sum())

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Zero out missing entries (``M * X``)."""
        return np.where(self.bits == 1, x, 0.0)


@dataclass(frozen=True, eq=False)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        std = np.atleast_1d(np.asarray(self.std, dtype=np.float64))
        if mean.shape != std.shape or mean.ndim != 1:
            raise DataError("mean and std must be 1-D arrays of equal length")
        if not np.all(std > 0):
            raise DataError(f"degenerate variate: std = {std.tolist()}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def v(self) -> int:
        return self.mean.shape[0]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]))


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "single"
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("single", "spatial_temporal"):
            raise DataError(f"unknown split mode {self.mode!r}")
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions):
            raise DataError("fractions must be three non-negative numbers")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise DataError(f"fractions must sum to 1, got {sum(self.fractions)}")


# -- file io ------------------------------------------------------------------

def _read_meta(root: Path) -> dict:
    path = root / META_FILE
    if not path.is_file():
        raise DataError(f"missing {path}")
    try:
        meta = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    for key in ("n", "t_prime", "v"):
        if not isinstance(meta.get(key), int) or meta[key] < 1:
            raise DataError(f"{path}: '{key}' must be a positive integer")
    return meta


def load_dataset(path) -> TimeSeriesDB:
    """Read a dataset directory (``series.csv``, ``graph.csv``, ``meta.json``)."""
    from .graph import RelationGraph

    root = Path(path)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    meta = _read_meta(root)
    n, t_prime, v = meta["n"], meta["t_prime"], meta["v"]
    start_time = int(meta.get("start_time", 0))

    series_path = root / SERIES_FILE
    if not series_path.is_file():
        raise DataError(f"missing {series_path}")
    cells: dict[str, dict[int, list[float]]] = {}
    with series_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["series_id", "t"] + [f"var_{j + 1}" for j in range(v)]
        if header != expected:
            raise DataError(f"{series_path}: header {header} does not match declared v={v} ({expected})")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != v + 2:
                raise DataError(f"{series_path}:{lineno}: expected {v + 2} cells, got {len(row)}")
            sid = row[0]
            try:
                t = int(row[1])
                vals = [float(c) for c in row[2:]]
            except ValueError as exc:
                raise DataError(f"{series_path}:{lineno}: non-numeric cell ({exc})") from None
            if not all(math.isfinite(x) for x in vals):
                raise DataError(f"{series_path}:{lineno}: non-finite value")
            if not start_time <= t < start_time + t_prime:
                raise DataError(f"{series_path}:{lineno}: t={t} outside [{start_time}, {start_time + t_prime})")
            per_series = cells.setdefault(sid, {})
            if t in per_series:
                raise DataError(f"{series_path}:{lineno}: duplicate cell ({sid}, {t})")
            per_series[t] = vals

    ids = meta.get("series_ids") or sorted(cells, key=natural_key)
    if len(cells) != n or set(ids) != set(cells):
        raise DataError(f"{series_path}: found {len(cells)} series, meta declares n={n}")
    values = np.empty((n, t_prime, v))
    for i, sid in enumerate(ids):
        per_series = cells[sid]
        if len(per_series) != t_prime:
            raise DataError(f"{series_path}: series {sid} has {len(per_series)} steps, meta declares {t_prime}")
        for t, vals in per_series.items():
            values[i, t - start_time] = vals

    graph = RelationGraph.read_csv(root / GRAPH_FILE, ids)
    period = meta.get("period")
    return TimeSeriesDB(
        values, tuple(ids), graph, start_time=start_time,
        step_unit=str(meta.get("step_unit", "step")), period=None if period is None else int(period),
    )


def save_dataset(db: TimeSeriesDB, path) -> Path:
    """Write ``db`` as a dataset directory. Output is byte-stable for equal input."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with (root / SERIES_FILE).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["series_id", "t"] + [f"var_{j + 1}" for j in range(db.v)])
        for i, sid in enumerate(db.series_ids):
            for t in range(db.t_prime):
                writer.writerow([sid, db.start_time + t] + [repr(float(x)) for x in db.values[i, t]])
    db.graph.write_csv(root / GRAPH_FILE, db.series_ids)
    meta = {
        "n": db.n, "t_prime": db.t_prime, "v": db.v, "start_time": db.start_time,
        "step_unit": db.step_unit, "period": db.period, "series_ids": list(db.series_ids),
    }
    (root / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return root


# -- normalization ------------------------------------------------------------

def fit_norm_stats(db: TimeSeriesDB, series: Sequence[int] | None = None,
                   steps: Sequence[int] | None = None) -> NormStats:
    """Per-variate mean/std (population) over the selected training entries.

    ``series`` picks rows of the database, ``steps`` picks relative time
    indices; ``None`` keeps everything along that axis.
    """
    vals = db.values
    if series is not None:
        series = np.asarray(series, dtype=int)
        if series.size == 0:
            raise DataError("training split is empty")
        vals = vals[series]
    if steps is not None:
        steps = np.asarray(steps, dtype=int)
        if steps.size == 0:
            raise DataError("training split is empty")
        vals = vals[:, steps]
    flat = vals.reshape(-1, db.v)
    std = flat.std(axis=0)
    if np.any(std == 0):
        bad = np.flatnonzero(std == 0).tolist()
        raise DataError(f"zero variance in training variate(s) {bad}")
    return NormStats(flat.mean(axis=0), std)


def _check_v(x: Snippet, s: NormStats) -> None:
    if x.v != s.v:
        raise DataError(f"snippet has {x.v} variates, stats have {s.v}")


def normalize(x: Snippet, s: NormStats) -> Snippet:
    _check_v(x, s)
    return Snippet((x.values - s.mean) / s.std, x.start, x.series_id)


def denormalize(x: Snippet, s: NormStats) -> Snippet:
    _check_v(x, s)
    return Snippet(x.values * s.std + s.mean, x.start, x.series_id)


def normalize_db(db: TimeSeriesDB, s: NormStats) -> TimeSeriesDB:
    if db.v != s.v:
        raise DataError(f"database has {db.v} variates, stats have {s.v}")
    return db.with_values((db.values - s.mean) / s.std)


# -- segmentation and masks ---------------------------------------------------

def window_starts(t_prime: int, length: int, stride: int) -> list[int]:
    """Relative start offsets of all full windows."""
    if stride < 1:
        raise DataError("stride must be >= 1")
    if length < 1 or length > t_prime:
        raise DataError(f"snippet length {length} must lie in [1, {t_prime}]")
    return list(range(0, t_prime - length + 1, stride))


def segment(db: TimeSeriesDB, length: int, stride: int | None = None) -> list[Snippet]:
    """Cut every series into windows; ordered by series, then start."""
    stride = length if stride is None else stride
    offsets = window_starts(db.t_prime, length, stride)
    return [
        db.snippet(i, db.start_time + lo, length)
        for i in range(db.n)
        for lo in offsets
    ]


def forecast_tau(length: int, rate: float) -> int:
    return int(math.floor(length * (1.0 - rate) + 1e-9))


def make_forecast_mask(length: int, rate: float, v: int = 1) -> Mask:
    """Observe the first ``floor(T * (1 - r))`` steps, hide the rest."""
    if not 0 < rate < 1:
        raise DataError(f"missing rate must lie in (0, 1), got {rate}")
    tau = forecast_tau(length, rate)
    if tau == 0:
        raise DataError(f"missing rate {rate} leaves no observed step for T={length}")
    if tau >= length:
        raise DataError(f"missing rate {rate} leaves nothing to forecast for T={length}")
    bits = np.zeros((length, v))
    bits[:tau] = 1.0
    return Mask(bits, "forecast", tau=tau, rate=rate)


def impute_missing_count(length: int, v: int, rate: float) -> int:
    return int(math.floor(rate * length * v + 0.5))


def make_impute_mask(length: int, v: int, rate: float, seed: int) -> Mask:
    """Hide exactly ``round(r * T * v)`` entries chosen by a seeded generator."""
    if not 0 < rate < 1:
        raise DataError(f"missing rate must lie in (0, 1), got {rate}")
    total = length * v
    n_missing = impute_missing_count(length, v, rate)
    if n_missing == 0 or n_missing == total:
        raise DataError(f"missing rate {rate} hides {n_missing} of {total} entries")
    rng = np.random.default_rng(seed)
    flat = np.ones(total)
    flat[rng.choice(total, size=n_missing, replace=False)] = 0.0
    return Mask(flat.reshape(length, v), "impute", rate=rate, seed=seed)


def make_mask(task: str, length: int, v: int, rate: float, seed: int = 0) -> Mask:
    if task == "forecast":
        return make_forecast_mask(length, rate, v)
    if task == "impute":
        return make_impute_mask(length, v, rate, seed)
    raise DataError(f"unknown task {task!r}")


# -- splits -------------------------------------------------------------------

def split_indices(count: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shuffle ``range(count)`` and cut it; floors val/test sizes, remainder to train."""
    n_val = int(math.floor(spec.fractions[1] * count + 1e-9))
    n_test = int(math.floor(spec.fractions[2] * count + 1e-9))
    n_train = count - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise DataError(
            f"split of {count} items with fractions {spec.fractions} leaves an empty part "
            f"({n_train}/{n_val}/{n_test})"
        )
    perm = np.random.default_rng(spec.seed).permutation(count)
    train = np.sort(perm[:n_train])
    val = np.sort(perm[n_train:n_train + n_val])
    test = np.sort(perm[n_train + n_val:])
    return train, val, test


def split(db: TimeSeriesDB, spec: SplitSpec, length: int | None = None,
          stride: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Series indices (single mode) or window indices (spatial-temporal mode).

    In spatial-temporal mode ``length`` gives the window size; window ``w``
    starts at relative step ``w * stride``.
    """
    if spec.mode == "single":
        return split_indices(db.n, spec)
    if length is None:
        raise DataError("spatial_temporal split needs the window length")
    n_windows = len(window_starts(db.t_prime, length, stride or length))
    return split_indices(n_windows, spec)
