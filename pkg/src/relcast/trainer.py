"""Sample preparation, training with early stopping, evaluation and baselines."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .autodiff import Adam, mse_loss, no_grad
from .data import (
    NormStats,
    SplitSpec,
    TimeSeriesDB,
    fit_norm_stats,
    forecast_tau,
    make_mask,
    normalize_db,
    split,
    window_starts,
)
from .errors import DataError, TrainingDiverged
from .graph import (
    DEFAULT_DAMPING,
    SpanPolicy,
    proximity,
    select_reference_span,
    target_relations,
    top_k_references,
)
from .synthesis import SynthesisConfig, SynthesisModel

log = logging.getLogger(__name__)

GRID_LRS = (1e-3, 1e-4)
GRID_KS = (1, 5, 10, 20)
SWEEP_RATES = (0.2, 0.4, 0.6, 0.8)


def mask_seed(base: int, index: int) -> int:
    """Per-snippet seed derived from a run seed; stable across processes."""
    return int(np.random.SeedSequence([int(base), int(index)]).generate_state(1)[0])


# -- samples ------------------------------------------------------------------

@dataclass(eq=False)
class SampleSet:
    """Normalized target windows and their rank-ordered reference windows."""

    targets: np.ndarray            # [S, T, v]
    refs: np.ndarray               # [S, K, T, v]
    series: np.ndarray             # [S] database index of the target series
    starts: np.ndarray             # [S] absolute start step
    ref_index: np.ndarray          # [S, K] database index of each reference
    ref_scores: np.ndarray         # [S, K]

    def __len__(self) -> int:
        return self.targets.shape[0]

    @property
    def k(self) -> int:
        return self.refs.shape[1]

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx, dtype=int)
        return SampleSet(self.targets[idx], self.refs[idx], self.series[idx], self.starts[idx],
                         self.ref_index[idx], self.ref_scores[idx])

    def with_k(self, k: int) -> "SampleSet":
        if k > self.k:
            raise ValueError(f"sample set holds {self.k} references, {k} requested")
        return SampleSet(self.targets, self.refs[:, :k], self.series, self.starts,
                         self.ref_index[:, :k], self.ref_scores[:, :k])

    def with_refs(self, refs: np.ndarray) -> "SampleSet":
        return replace(self, refs=np.asarray(refs, dtype=np.float64))


@dataclass(frozen=True)
class TaskSetup:
    """Everything that decides which windows become samples and what they retrieve."""

    task: str = "forecast"
    setting: str = "single"
    length: int = 24
    k: int = 5
    rate: float = 0.5
    c: float = DEFAULT_DAMPING
    history_only: bool = False
    split_seed: int = 0
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    train_stride: int | None = None   # overlapping training windows; None = length

    def __post_init__(self):
        if self.train_stride is not None and self.train_stride < 1:
            raise ValueError("train stride must be >= 1")
        if self.task not in ("forecast", "impute"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.setting not in ("single", "spatial_temporal"):
            raise ValueError(f"unknown setting {self.setting!r}")

    def policy(self, db: TimeSeriesDB) -> SpanPolicy:
        tau = forecast_tau(self.length, self.rate) if self.task == "forecast" else None
        history = self.history_only or (self.task == "forecast" and db.period is None)
        return SpanPolicy.for_task(self.task, self.length, db.period, tau, history)

    @property
    def allow_self(self) -> bool:
        return self.setting == "spatial_temporal" and self.task == "forecast"


@dataclass(eq=False)
class PreparedData:
    train: SampleSet
    val: SampleSet
    test: SampleSet
    stats: NormStats
    splits: tuple[np.ndarray, np.ndarray, np.ndarray]
    db: TimeSeriesDB               # normalized
    setup: TaskSetup


def _references_for(db: TimeSeriesDB, node: int, setup: TaskSetup, candidates: set[int], cache: dict):
    if node not in cache:
        rel = target_relations(db.graph, node, include_self=setup.allow_self)
        p = proximity(db.graph, rel, setup.c)
        exclude = [i for i in range(db.n) if i not in candidates]
        if not setup.allow_self and node not in exclude:
            exclude.append(node)
        idx = top_k_references(p, setup.k, exclude) if setup.k > 0 else []
        cache[node] = (idx, [float(p.p[i]) for i in idx])
    return cache[node]


def build_samples(db: TimeSeriesDB, pairs: list[tuple[int, int]], setup: TaskSetup,
                  candidates: set[int], cache: dict | None = None) -> SampleSet:
    """Samples for ``(series, absolute start)`` pairs; pairs whose reference window
    falls outside the database are skipped."""
    cache = {} if cache is None else cache
    policy = setup.policy(db)
    T, v, K = setup.length, db.v, setup.k
    targets, refs, series, starts, ref_idx, ref_scores = [], [], [], [], [], []
    for node, start in pairs:
        ref_start = start - policy.delta_t
        if ref_start < db.start_time:
            continue
        idx, scores = _references_for(db, node, setup, candidates, cache)
        targets.append(db.snippet(node, start, T).values)
        refs.append([select_reference_span(db, i, start, T, policy).values for i in idx])
        series.append(node)
        starts.append(start)
        ref_idx.append(idx)
        ref_scores.append(scores)
    if not targets:
        raise DataError("no usable target windows (reference windows fall before the database start)")
    return SampleSet(
        np.asarray(targets), np.asarray(refs).reshape(len(targets), K, T, v), np.asarray(series),
        np.asarray(starts), np.asarray(ref_idx, dtype=int).reshape(len(targets), K),
        np.asarray(ref_scores, dtype=np.float64).reshape(len(targets), K),
    )


def prepare(db: TimeSeriesDB, setup: TaskSetup) -> PreparedData:
    """Split, fit normalization on training entries, then retrieve for every window."""
    spec = SplitSpec(setup.setting, setup.fractions, setup.split_seed)
    offsets = window_starts(db.t_prime, setup.length, setup.length)
    parts = split(db, spec, setup.length)
    if setup.setting == "single":
        stats = fit_norm_stats(db, series=parts[0])
        ndb = normalize_db(db, stats)
        candidates = set(parts[0].tolist())
        train_offsets = window_starts(db.t_prime, setup.length, setup.train_stride or setup.length)
        sets = [
            [(int(i), db.start_time + lo) for i in part for lo in (train_offsets if p == 0 else offsets)]
            for p, part in enumerate(parts)
        ]
    else:
        train_steps = np.concatenate([np.arange(offsets[w], offsets[w] + setup.length) for w in parts[0]])
        stats = fit_norm_stats(db, steps=train_steps)
        ndb = normalize_db(db, stats)
        candidates = set(range(db.n))
        sets = [
            [(i, db.start_time + offsets[w]) for w in part for i in range(db.n)]
            for part in parts
        ]
    cache: dict = {}
    built = [build_samples(ndb, pairs, setup, candidates, cache) for pairs in sets]
    return PreparedData(*built, stats=stats, splits=parts, db=ndb, setup=setup)


def make_masks(n: int, task: str, length: int, v: int, rate: float, seed: int) -> np.ndarray:
    """Fixed ``[n, T, v]`` evaluation masks, one seeded draw per snippet."""
    return np.stack([make_mask(task, length, v, rate, mask_seed(seed, i)).bits for i in range(n)])


# -- training -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 100
    patience: int = 10
    max_epochs: int = 200
    seed: int = 0
    task: str = "forecast"
    setting: str = "single"
    missing_rate: float = 0.5
    loss_on: str = "all"
    min_delta: float = 0.0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0 < self.missing_rate < 1:
            raise ValueError("missing rate must lie in (0, 1)")
        if self.loss_on not in ("all", "missing"):
            raise ValueError("loss_on must be 'all' or 'missing'")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch size and max epochs must be >= 1")


class EarlyStopping:
    """Tracks the best validation loss; ``step`` returns True once patience runs out."""

    def __init__(self, patience: int, min_delta: float = 0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = 0
        self.stop_epoch: int | None = None

    def step(self, loss: float, epoch: int) -> bool:
        if loss < self.best - self.min_delta:
            self.best = loss
            self.best_epoch = epoch
        elif epoch - self.best_epoch >= self.patience:
            self.stop_epoch = epoch
            return True
        return False


@dataclass
class TrainResult:
    model: SynthesisModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stop_epoch: int | None = None
    best_val_loss: float = math.inf


def _batch_loss(model: SynthesisModel, s: SampleSet, masks: np.ndarray, loss_on: str):
    pred = model(s.targets, masks, s.refs if model.config.k else None)
    weight = None if loss_on == "all" else 1.0 - masks
    return mse_loss(pred, s.targets, weight=weight)


def validation_loss(model: SynthesisModel, s: SampleSet, masks: np.ndarray, loss_on: str = "all",
                    batch_size: int = 500) -> float:
    total, count = 0.0, 0.0
    with no_grad():
        for lo in range(0, len(s), batch_size):
            idx = np.arange(lo, min(lo + batch_size, len(s)))
            m = masks[idx]
            w = np.ones_like(m) if loss_on == "all" else 1.0 - m
            loss = _batch_loss(model, s.subset(idx), m, loss_on).item()
            total += loss * w.sum()
            count += w.sum()
    return total / count


def train(model: SynthesisModel, train_set: SampleSet, val_set: SampleSet, config: TrainConfig) -> TrainResult:
    """Adam on full-snippet MSE with early stopping; restores the best-validation weights."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    cfg = model.config
    train_set = train_set.with_k(cfg.k)
    val_set = val_set.with_k(cfg.k)
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.parameters(), lr=config.lr)
    v = train_set.targets.shape[2]
    val_masks = make_masks(len(val_set), config.task, cfg.length, v, config.missing_rate, config.seed + 1)
    fixed_train = None
    if config.task == "forecast":
        fixed_train = make_masks(len(train_set), "forecast", cfg.length, v, config.missing_rate, 0)

    stopper = EarlyStopping(config.patience, config.min_delta)
    result = TrainResult(model)
    best_state = model.state_dict()
    for epoch in range(1, config.max_epochs + 1):
        if fixed_train is not None:
            masks = fixed_train
        else:
            epoch_seed = int(rng.integers(2 ** 31))
            masks = make_masks(len(train_set), config.task, cfg.length, v, config.missing_rate, epoch_seed)
        order = rng.permutation(len(train_set))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            opt.zero_grad()
            loss = _batch_loss(model, train_set.subset(idx), masks[idx], config.loss_on)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}, batch starting {lo}")
            loss.backward()
            opt.step()
            losses.append((loss.item(), len(idx)))
        train_loss = sum(l * n for l, n in losses) / len(order)
        val_loss = validation_loss(model, val_set, val_masks, config.loss_on)
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        result.history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        log.debug("epoch %d train %.6f val %.6f", epoch, train_loss, val_loss)
        if val_loss < stopper.best - stopper.min_delta:
            best_state = model.state_dict()
        if stopper.step(val_loss, epoch):
            break
    model.load_state_dict(best_state)
    result.best_epoch = stopper.best_epoch
    result.stop_epoch = stopper.stop_epoch
    result.best_val_loss = stopper.best
    return result


# -- evaluation ---------------------------------------------------------------

@dataclass
class EvalReport:
    rmse: float
    mae: float
    n_eval_points: int
    breakdown: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_predictions(preds: np.ndarray, truths: np.ndarray, masks: np.ndarray,
                         metadata: dict | None = None) -> EvalReport:
    """RMSE/MAE over masked-out entries (``mask == 0``) only."""
    preds, truths, masks = (np.asarray(a, dtype=np.float64) for a in (preds, truths, masks))
    if preds.shape != truths.shape or masks.shape != truths.shape:
        raise ValueError(f"shape mismatch: {preds.shape}, {truths.shape}, {masks.shape}")
    missing = masks == 0
    n = int(missing.sum())
    if n == 0:
        raise ValueError("evaluation set has no masked-out entries")
    err = (preds - truths)[missing]
    return EvalReport(float(np.sqrt(np.mean(err ** 2))), float(np.mean(np.abs(err))), n,
                      metadata=dict(metadata or {}))


def predict_batch(model: SynthesisModel, s: SampleSet, masks: np.ndarray, batch_size: int = 500) -> np.ndarray:
    s = s.with_k(model.config.k)
    out = []
    with no_grad():
        for lo in range(0, len(s), batch_size):
            idx = np.arange(lo, min(lo + batch_size, len(s)))
            out.append(model(s.targets[idx], masks[idx], s.refs[idx] if model.config.k else None).data)
    return np.concatenate(out)


def _to_scale(a: np.ndarray, stats: NormStats | None) -> np.ndarray:
    return a if stats is None else a * stats.std + stats.mean


def evaluate(model: SynthesisModel, samples: SampleSet, task: str, rate: float, seed: int,
             stats: NormStats | None = None, metadata: dict | None = None) -> EvalReport:
    """Metrics on normalized values; pass ``stats`` to report in original units."""
    masks = make_masks(len(samples), task, model.config.length, samples.targets.shape[2], rate, seed)
    preds = predict_batch(model, samples, masks)
    meta = {"k": model.config.k, "r": rate, "task": task, "seed": seed, **(metadata or {})}
    return evaluate_predictions(_to_scale(preds, stats), _to_scale(samples.targets, stats), masks, meta)


def evaluate_baseline(samples: SampleSet, kind: str, task: str, rate: float, seed: int,
                      k: int | None = None, stats: NormStats | None = None) -> EvalReport:
    """Score ``ref`` (rank-1 reference) or ``retrieval_only`` (mean of top-k) predictions."""
    T, v = samples.targets.shape[1:]
    masks = make_masks(len(samples), task, T, v, rate, seed)
    if kind == "ref":
        preds = np.stack([baseline_ref(r) for r in samples.refs])
    elif kind == "retrieval_only":
        kk = samples.k if k is None else k
        preds = np.stack([baseline_retrieval_only(r[:kk]) for r in samples.refs])
    else:
        raise ValueError(f"unknown baseline {kind!r}")
    meta = {"baseline": kind, "k": samples.k if k is None else k, "r": rate, "task": task, "seed": seed}
    return evaluate_predictions(_to_scale(preds, stats), _to_scale(samples.targets, stats), masks, meta)


# -- baselines ----------------------------------------------------------------

def baseline_ref(refs) -> np.ndarray:
    """Prediction = the rank-1 reference verbatim."""
    refs = [np.asarray(getattr(r, "values", r)) for r in refs]
    if not refs:
        raise ValueError("REF baseline needs at least one reference")
    return refs[0].copy()


def baseline_retrieval_only(refs) -> np.ndarray:
    """Prediction = pointwise mean of the references."""
    refs = [np.asarray(getattr(r, "values", r)) for r in refs]
    if not refs:
        raise ValueError("retrieval-only baseline needs K >= 1")
    return np.mean(np.stack(refs), axis=0)


def baseline_first_order(db: TimeSeriesDB, relations, k: int, policy: SpanPolicy, target_start: int,
                         exclude=()) -> list:
    """Direct neighbors as references (no diffusion), ascending index, at most ``k``."""
    excluded = set(exclude)
    neigh = sorted(set(int(r) for r in relations) - excluded)
    if not neigh:
        raise ValueError("target has no direct neighbors")
    return [select_reference_span(db, i, target_start, policy.length, policy) for i in neigh[:k]]


# -- uncertainty --------------------------------------------------------------

def estimate_sigma(preds, truths) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if preds.size == 0 or preds.shape != truths.shape:
        raise ValueError("need equally shaped, non-empty predictions and truths")
    return math.sqrt(float(np.mean((preds - truths) ** 2)))


def uncertainty_delta(sigma: float, v: int) -> float:
    """Gaussian conditional entropy ``(v / 2) * (1 + ln(2 pi sigma^2))`` in nats."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return 0.5 * v * (1.0 + math.log(2.0 * math.pi * sigma * sigma))


@dataclass
class TheoryReport:
    sigma_hat: float
    delta: float
    mse: float
    v: int

    @classmethod
    def from_errors(cls, preds, truths, v: int) -> "TheoryReport":
        preds = np.asarray(preds, dtype=np.float64)
        truths = np.asarray(truths, dtype=np.float64)
        mse = float(np.mean((preds - truths) ** 2))
        sigma = estimate_sigma(preds, truths)
        return cls(sigma, uncertainty_delta(sigma, v), mse, v)

    @classmethod
    def from_report(cls, report: EvalReport, v: int) -> "TheoryReport":
        sigma = report.rmse
        return cls(sigma, uncertainty_delta(sigma, v), sigma * sigma, v)

    def to_dict(self) -> dict:
        return asdict(self)


# -- experiments --------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    """Model and optimizer settings for one desk-scale run."""

    d: int = 16
    layers: int = 1
    heads: int = 4
    d_ff: int | None = None
    lr: float = 1e-3
    batch_size: int = 100
    patience: int = 10
    max_epochs: int = 200
    seed: int = 0
    loss_on: str = "all"

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def model_config(exp: ExperimentConfig, setup: TaskSetup, v: int, k: int | None = None) -> SynthesisConfig:
    return SynthesisConfig(d=exp.d, layers=exp.layers, heads=exp.heads, k=setup.k if k is None else k,
                           length=setup.length, v=v, d_ff=exp.d_ff, seed=exp.seed)


def train_config(exp: ExperimentConfig, setup: TaskSetup) -> TrainConfig:
    return TrainConfig(lr=exp.lr, batch_size=exp.batch_size, patience=exp.patience, max_epochs=exp.max_epochs,
                       seed=exp.seed, task=setup.task, setting=setup.setting, missing_rate=setup.rate,
                       loss_on=exp.loss_on)


def fit_model(data: PreparedData, exp: ExperimentConfig, k: int | None = None) -> TrainResult:
    cfg = model_config(exp, data.setup, data.db.v, k)
    return train(SynthesisModel(cfg), data.train, data.val, train_config(exp, data.setup))


def run_cell(data: PreparedData, exp: ExperimentConfig, k: int | None = None, eval_seed: int = 1234,
             denormalized: bool = False) -> tuple[EvalReport, TheoryReport, TrainResult]:
    """Train one model and score it on the test split."""
    res = fit_model(data, exp, k)
    s = data.setup
    report = evaluate(res.model, data.test, s.task, s.rate, eval_seed,
                      stats=data.stats if denormalized else None,
                      metadata={"setting": s.setting, "lr": exp.lr, "train_seed": exp.seed,
                                "best_epoch": res.best_epoch})
    report.breakdown[str(s.rate)] = {"rmse": report.rmse, "mae": report.mae, "n": report.n_eval_points}
    return report, TheoryReport.from_report(report, data.db.v), res


def grid_search(db: TimeSeriesDB, setup: TaskSetup, exp: ExperimentConfig, lrs=GRID_LRS, ks=GRID_KS):
    """Pick ``(lr, k)`` by validation RMSE over masked entries."""
    best = None
    data = prepare(db, replace(setup, k=max(ks)))
    for k in ks:
        for lr in lrs:
            res = fit_model(data, replace(exp, lr=lr), k)
            val = evaluate(res.model, data.val, setup.task, setup.rate, exp.seed + 1)
            log.info("grid k=%d lr=%g val_rmse=%.5f", k, lr, val.rmse)
            if best is None or val.rmse < best[0]:
                best = (val.rmse, lr, k, res)
    return {"val_rmse": best[0], "lr": best[1], "k": best[2], "result": best[3]}


@dataclass
class BenefitResult:
    with_refs: EvalReport
    without_refs: EvalReport
    theory_with: TheoryReport
    theory_without: TheoryReport

    @property
    def relative_gain(self) -> float:
        return 1.0 - self.with_refs.rmse / self.without_refs.rmse


def reference_benefit_experiment(db: TimeSeriesDB, setup: TaskSetup, exp: ExperimentConfig,
                                 noise_refs: bool = False, eval_seed: int = 1234) -> BenefitResult:
    """Train two models identical except for K (``setup.k`` vs 0) and score both.

    With ``noise_refs`` every reference is replaced by standard normal noise,
    which should remove the benefit.
    """
    data = prepare(db, setup)
    if noise_refs:
        rng = np.random.default_rng(exp.seed + 99)
        for part in (data.train, data.val, data.test):
            part.refs = rng.normal(size=part.refs.shape)
    with_refs, th_with, _ = run_cell(data, exp, setup.k, eval_seed)
    without, th_without, _ = run_cell(data, exp, 0, eval_seed)
    return BenefitResult(with_refs, without, th_with, th_without)
