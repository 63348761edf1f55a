"""Gather / intervene / re-optimize loop over simulated users, with NDCG trajectories."""
from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .clicksim import BiasParams, paper_bias, simulate_log
from .dataset import Dataset, load_dataset, synthetic_dataset
from .estimators import DeltaKind, ExposureStats, accumulate_exposure, extend_segment
from .metrics import ndcg
from .optimizer import OptimizerConfig, SupervisedConfig, optimize, supervised_bootstrap
from .policy import Policy

logger = logging.getLogger(__name__)

RESULT_HEADER = ("run_id", "timestep", "ndcg_trained", "ndcg_logging")
SUMMARY_HEADER = ("timestep", "mean_trained", "lo_trained", "hi_trained", "mean_logging", "lo_logging", "hi_logging")


@dataclass(frozen=True)
class DatasetConfig:
    """Either three LETOR files or the shape of a synthetic corpus."""

    train_path: str | None = None
    validation_path: str | None = None
    test_path: str | None = None
    n_train: int = 200
    n_validation: int = 20
    n_test: int = 100
    n_docs: int = 20
    n_features: int = 16
    noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        paths = (self.train_path, self.validation_path, self.test_path)
        if any(p is not None for p in paths) and not all(p is not None for p in paths):
            raise ValueError("train_path, validation_path and test_path must be given together")
        for name in ("n_train", "n_validation", "n_test", "n_docs", "n_features"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def synthetic(self) -> bool:
        return self.train_path is None

    def load(self) -> Dataset:
        if self.synthetic:
            return synthetic_dataset(
                self.n_train, self.n_validation, self.n_test, self.n_docs, self.n_features, self.seed, self.noise
            )
        return load_dataset(self.train_path, self.validation_path, self.test_path)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    bias: BiasParams = field(default_factory=paper_bias)
    T: int = 20_000
    n_interventions: int = 0
    t_min: int = 100
    kind: DeltaKind = DeltaKind.INTERVENTION_AWARE
    # A sharp production ranker (low temperature) and a larger SGD step than the
    # optimizer's own default: this is the desk-scale setup where interventions
    # have item-selection bias left to fix.
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(learning_rate=0.3))
    bootstrap: SupervisedConfig = field(default_factory=lambda: SupervisedConfig(temperature=0.03))
    bootstrap_fraction: float = 0.01
    n_runs: int = 20
    eval_points: tuple[int, ...] | None = None
    seed: int = 0
    # Monte-Carlo samples for exposure expectations and test NDCG on large candidate sets.
    marginal_samples: int = 1000
    eval_samples: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "kind", DeltaKind(self.kind))
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if self.n_interventions < 0:
            raise ValueError("n_interventions must be >= 0")
        if not 1 <= self.t_min < self.T:
            raise ValueError("t_min must satisfy 1 <= t_min < T")
        if self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        if not 0 < self.bootstrap_fraction <= 1:
            raise ValueError("bootstrap_fraction must lie in (0, 1]")
        if self.marginal_samples < 1 or self.eval_samples < 1:
            raise ValueError("sample counts must be positive")
        if self.eval_points is not None:
            pts = tuple(int(p) for p in self.eval_points)
            if not pts or any(not 1 <= p <= self.T for p in pts):
                raise ValueError("eval_points must be a nonempty subset of [1, T]")
            object.__setattr__(self, "eval_points", tuple(sorted(set(pts))))

    def resolved_eval_points(self) -> tuple[int, ...]:
        if self.eval_points is not None:
            return self.eval_points
        return default_eval_points(self.T, self.t_min)


def intervention_schedule(m: int, T: int, t_min: int) -> list[int]:
    """m timesteps spread evenly on a log scale strictly between t_min and T."""
    if m < 0:
        raise ValueError("m must be >= 0")
    if not 1 <= t_min < T:
        raise ValueError("need 1 <= t_min < T")
    steps = (round(t_min * (T / t_min) ** (i / (m + 1))) for i in range(1, m + 1))
    return sorted({s for s in steps if s < T})


def default_eval_points(T: int, t_min: int, n: int = 20) -> tuple[int, ...]:
    pts = np.geomspace(t_min, T, n)
    return tuple(sorted({min(T, max(1, int(round(p)))) for p in pts} | {T}))


@dataclass
class ResultSeries:
    run_id: int
    timesteps: list[int] = field(default_factory=list)
    ndcg_trained: list[float] = field(default_factory=list)
    ndcg_logging: list[float] = field(default_factory=list)

    def append(self, t: int, trained: float, logging_: float) -> None:
        if self.timesteps and t <= self.timesteps[-1]:
            raise ValueError("timesteps must be strictly increasing")
        self.timesteps.append(t)
        self.ndcg_trained.append(trained)
        self.ndcg_logging.append(logging_)

    @property
    def final_trained(self) -> float:
        return self.ndcg_trained[-1]


def _derive(seed_seq: np.random.SeedSequence, *tags: int) -> int:
    return int(np.random.SeedSequence([*seed_seq.generate_state(2), *tags]).generate_state(1)[0])


def run_single(cfg: ExperimentConfig, run_id: int, data: Dataset | None = None) -> ResultSeries:
    """One run of the online/counterfactual procedure; seeds derive from (cfg.seed, run_id)."""
    data = data or cfg.dataset.load()
    pool = data.logging_pool()
    ss = np.random.SeedSequence(cfg.seed).spawn(cfg.n_runs)[run_id]
    click_rng = np.random.default_rng(_derive(ss, 1))
    exposure_rng = np.random.default_rng(_derive(ss, 2))
    eval_seed = _derive(ss, 3)

    pi0 = supervised_bootstrap(cfg.bootstrap_fraction, data.train, replace(cfg.bootstrap, seed=_derive(ss, 4)))
    schedule = set(intervention_schedule(cfg.n_interventions, cfg.T, cfg.t_min))
    evals = set(cfg.resolved_eval_points())
    boundaries = sorted(schedule | evals | {cfg.T})

    ndcg_cache: dict[int, float] = {}

    def test_ndcg(policy: Policy) -> float:
        key = id(policy)
        if key not in ndcg_cache:
            ndcg_cache[key] = ndcg(
                policy, data.test, n_samples=cfg.eval_samples, rng=np.random.default_rng(eval_seed)
            )
        return ndcg_cache[key]

    log: list = []
    stats = ExposureStats()
    logging_policy = pi0
    segment = 0
    fresh_segment = True
    result = ResultSeries(run_id)
    keep_alive = [pi0]  # id() keys of cached NDCGs must stay unique
    for b in boundaries:
        n_new = b - len(log)
        if n_new > 0:
            log += simulate_log(
                logging_policy, pool, cfg.bias, n_new, click_rng, start=len(log) + 1, segment_id=segment
            )
            if fresh_segment:
                stats = accumulate_exposure(
                    stats, logging_policy, n_new, cfg.bias, pool, n_samples=cfg.marginal_samples, rng=exposure_rng
                )
                fresh_segment = False
            else:
                stats = extend_segment(stats, n_new)
        trained = None
        if b in schedule or b == cfg.T or b in evals:
            assert stats.T == len(log)
            opt_cfg = replace(cfg.optimizer, seed=_derive(ss, 5, b))
            trained = optimize(log, stats, cfg.bias, pi0, cfg.kind, opt_cfg, pool)
            keep_alive.append(trained)
        if b in evals:
            result.append(b, test_ndcg(trained), test_ndcg(logging_policy))
            logger.info(
                "run %d t=%d trained=%.4f logging=%.4f", run_id, b, result.ndcg_trained[-1], result.ndcg_logging[-1]
            )
        if b in schedule:
            logging_policy = trained
            segment += 1
            fresh_segment = True
    return result


def _run_job(args) -> ResultSeries:
    cfg, run_id = args
    return run_single(cfg, run_id)


def run_experiment(cfg: ExperimentConfig, parallel: int = 1) -> list[ResultSeries]:
    if parallel > 1 and cfg.n_runs > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_run_job, [(cfg, r) for r in range(cfg.n_runs)]))
    data = cfg.dataset.load()
    return [run_single(cfg, r, data) for r in range(cfg.n_runs)]


@dataclass(frozen=True)
class SummaryRow:
    timestep: int
    mean_trained: float
    lo_trained: float
    hi_trained: float
    mean_logging: float
    lo_logging: float
    hi_logging: float


def summarize(series: Sequence[ResultSeries], confidence: float = 0.9) -> list[SummaryRow]:
    """Per eval point: mean over runs and two-sided percentile bounds at ``confidence``."""
    if len(series) < 2:
        raise ValueError("summarize needs at least 2 runs")
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")
    steps = series[0].timesteps
    if any(s.timesteps != steps for s in series):
        raise ValueError("runs do not share eval points")
    q = [50 * (1 - confidence), 50 * (1 + confidence)]
    trained = np.array([s.ndcg_trained for s in series])
    logged = np.array([s.ndcg_logging for s in series])
    def mean(x: np.ndarray) -> float:
        # Offset by the first value so identical runs give that value exactly.
        return float(x[0] + (x - x[0]).mean())

    rows = []
    for j, t in enumerate(steps):
        lt, ht = np.percentile(trained[:, j], q)
        ll, hl = np.percentile(logged[:, j], q)
        rows.append(
            SummaryRow(
                t,
                mean(trained[:, j]), float(lt), float(ht),
                mean(logged[:, j]), float(ll), float(hl),
            )
        )
    return rows


def paired_difference_interval(
    a: Sequence[float], b: Sequence[float], confidence: float = 0.9, n_boot: int = 10_000, seed: int = 0
) -> tuple[float, float, float]:
    """Mean of a - b over paired runs with a percentile-bootstrap interval for that mean."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    rng = np.random.default_rng(seed)
    means = d[rng.integers(len(d), size=(n_boot, len(d)))].mean(axis=1)
    lo, hi = np.percentile(means, [50 * (1 - confidence), 50 * (1 + confidence)])
    return float(d.mean()), float(lo), float(hi)


def format_results(series: Sequence[ResultSeries]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_HEADER)
    for s in series:
        for t, tr, lg in zip(s.timesteps, s.ndcg_trained, s.ndcg_logging):
            w.writerow((s.run_id, t, repr(tr), repr(lg)))
    return buf.getvalue()


def parse_results(text: str) -> list[ResultSeries]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != RESULT_HEADER:
        raise ValueError("unexpected results header")
    by_run: dict[int, ResultSeries] = {}
    for run_id, t, tr, lg in rows[1:]:
        s = by_run.setdefault(int(run_id), ResultSeries(int(run_id)))
        s.append(int(t), float(tr), float(lg))
    return [by_run[k] for k in sorted(by_run)]


def format_summary(rows: Sequence[SummaryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for r in rows:
        w.writerow((r.timestep, *(repr(getattr(r, h)) for h in SUMMARY_HEADER[1:])))
    return buf.getvalue()
