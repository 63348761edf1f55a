"""Click-debiasing corrections and the estimated reward of a ranking policy.

Every estimator turns a click ``c_t(d)`` into a relevance signal Δ; the
estimated reward of a policy is ``1/T * sum_t sum_d lambda(d) * Δ(d | t)``.
The intervention-aware correction conditions on the whole sequence of
logging policies, so its weights change retroactively as data is added.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping

import numpy as np

from .clicksim import BiasParams, InteractionLog, exposure_expectations
from .dataset import Corpus
from .metrics import corpus_lambdas
from .policy import EXACT_THRESHOLD, N_MARGINAL_SAMPLES, Policy, corpus_marginals

CLIP_NUMERATOR = 10.0

logger = logging.getLogger(__name__)


class DeltaKind(str, enum.Enum):
    IPS = "ips"
    POLICY_AWARE = "policy_aware"
    AFFINE = "affine"
    INTERVENTION_OBLIVIOUS = "intervention_oblivious"
    INTERVENTION_AWARE = "intervention_aware"


class EstimatorError(ValueError):
    """An estimator's support assumption is violated (zero denominator)."""


@dataclass(frozen=True)
class SegmentExposure:
    """Expected alpha/beta/examination of every document under one logging policy."""

    length: int
    e_alpha: Mapping[str, np.ndarray]
    e_beta: Mapping[str, np.ndarray]
    e_exam: Mapping[str, np.ndarray]


@dataclass(frozen=True)
class ExposureStats:
    segments: tuple[SegmentExposure, ...] = ()

    @property
    def T(self) -> int:
        return sum(s.length for s in self.segments)

    @property
    def segment_lengths(self) -> list[int]:
        return [s.length for s in self.segments]

    def segment(self, segment_id: int) -> SegmentExposure:
        return self.segments[segment_id]

    @cached_property
    def _means(self) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        # Weighted average with weights length/T: a single segment reproduces
        # its own expectations bit for bit.
        total = self.T
        alpha: dict[str, np.ndarray] = {}
        beta: dict[str, np.ndarray] = {}
        for s in self.segments:
            w = s.length / total
            for qid, v in s.e_alpha.items():
                alpha[qid] = alpha[qid] + w * v if qid in alpha else w * v
            for qid, v in s.e_beta.items():
                beta[qid] = beta[qid] + w * v if qid in beta else w * v
        return alpha, beta

    def mean_alpha(self, qid: str) -> np.ndarray:
        """E[alpha_d | Pi_T, q] for every document of the query."""
        return self._means[0][qid]

    def mean_beta(self, qid: str) -> np.ndarray:
        return self._means[1][qid]

    def sum_alpha(self, qid: str) -> np.ndarray:
        return sum(s.length * s.e_alpha[qid] for s in self.segments)

    def sum_beta(self, qid: str) -> np.ndarray:
        return sum(s.length * s.e_beta[qid] for s in self.segments)


def add_segment(
    stats: ExposureStats,
    length: int,
    e_alpha: Mapping[str, np.ndarray],
    e_beta: Mapping[str, np.ndarray],
    e_exam: Mapping[str, np.ndarray] | None = None,
) -> ExposureStats:
    if length < 1:
        raise ValueError("segment_length must be >= 1")
    seg = SegmentExposure(
        length,
        {q: np.asarray(v, dtype=np.float64) for q, v in e_alpha.items()},
        {q: np.asarray(v, dtype=np.float64) for q, v in e_beta.items()},
        {q: np.asarray(v, dtype=np.float64) for q, v in (e_exam or {}).items()},
    )
    return ExposureStats(stats.segments + (seg,))


def extend_segment(stats: ExposureStats, extra: int) -> ExposureStats:
    """Lengthen the most recent segment: the same logging policy gathered ``extra`` more steps."""
    if not stats.segments:
        raise ValueError("no segment to extend")
    if extra < 1:
        raise ValueError("extra must be >= 1")
    last = stats.segments[-1]
    grown = SegmentExposure(last.length + extra, last.e_alpha, last.e_beta, last.e_exam)
    return ExposureStats(stats.segments[:-1] + (grown,))


def accumulate_exposure(
    stats: ExposureStats,
    policy: Policy,
    segment_length: int,
    bias: BiasParams,
    corpus: Corpus,
    *,
    exact_threshold: int = EXACT_THRESHOLD,
    n_samples: int = N_MARGINAL_SAMPLES,
    rng: np.random.Generator | None = None,
) -> ExposureStats:
    """Append a segment of ``segment_length`` steps logged by ``policy`` on ``corpus``."""
    if segment_length < 1:
        raise ValueError("segment_length must be >= 1")
    marginals = corpus_marginals(
        policy, corpus, exact_threshold=exact_threshold, n_samples=n_samples, rng=rng, n_ranks=bias.cutoff
    )
    e_alpha, e_beta, e_exam = {}, {}, {}
    for q, m in zip(corpus, marginals):
        e_alpha[q.id], e_beta[q.id], e_exam[q.id] = exposure_expectations(m, bias)
    return add_segment(stats, segment_length, e_alpha, e_beta, e_exam)


# ---------------------------------------------------------------------------
# Per-click corrections.


def _checked_ratio(numerator: float, denominator: float, what: str) -> float:
    if denominator == 0:
        raise EstimatorError(f"zero {what}")
    return numerator / denominator


def delta_ips(click: int, exam_prob: float) -> float:
    if click == 0:
        return 0.0
    return _checked_ratio(click, exam_prob, "examination probability for a clicked document")


def delta_policy_aware(click: int, exam_prob_under_policy: float) -> float:
    if click == 0:
        return 0.0
    return _checked_ratio(click, exam_prob_under_policy, "policy examination probability for a clicked document")


def delta_affine(click: int, rank: int, bias: BiasParams) -> float:
    return _checked_ratio(click - bias.beta_at(rank), bias.alpha_at(rank), f"alpha at rank {rank}")


def delta_intervention_oblivious(click: int, e_alpha_t: float, e_beta_t: float) -> float:
    return _checked_ratio(click - e_beta_t, e_alpha_t, "expected alpha under the logging policy")


def delta_intervention_aware(click: int, stats: ExposureStats, query_id: str, doc: int) -> float:
    return _checked_ratio(
        click - stats.mean_beta(query_id)[doc],
        stats.mean_alpha(query_id)[doc],
        "expected alpha over all logging policies",
    )


# ---------------------------------------------------------------------------
# Aggregated corrections: sum_t Δ(d | t) per query, the quantity the reward
# estimate and its gradient actually need.


@dataclass
class _Counts:
    n_docs: int
    n_ranks: int
    n: int = 0
    clicks: np.ndarray = field(init=False)
    shown: np.ndarray = field(init=False)
    clicked_at: np.ndarray = field(init=False)

    def __post_init__(self):
        self.clicks = np.zeros(self.n_docs)
        self.shown = np.zeros((self.n_docs, self.n_ranks))
        self.clicked_at = np.zeros((self.n_docs, self.n_ranks))


def _aggregate(log: Iterable, n_docs: Mapping[str, int], n_ranks: int) -> dict[tuple[int, str], _Counts]:
    counts: dict[tuple[int, str], _Counts] = {}
    for e in log:
        key = (e.segment_id, e.query_id)
        c = counts.get(key)
        if c is None:
            c = counts[key] = _Counts(n_docs[e.query_id], n_ranks)
        c.n += 1
        for r, (d, click) in enumerate(zip(e.displayed_ranking, e.clicks)):
            c.shown[d, r] += 1
            if click:
                c.clicks[d] += 1
                c.clicked_at[d, r] += 1
    return counts


def _denominator(values: np.ndarray, clip_threshold: float | None) -> np.ndarray:
    return values if clip_threshold is None else np.maximum(values, clip_threshold)


def _divide(num: np.ndarray, den: np.ndarray, needed: np.ndarray, what: str) -> np.ndarray:
    if np.any(needed & (den == 0)):
        raise EstimatorError(f"zero {what}")
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(needed, num / np.where(den == 0, 1.0, den), 0.0)


def clip_threshold_for(n: int) -> float:
    return CLIP_NUMERATOR / math.sqrt(n)


def click_weights(
    log: InteractionLog,
    stats: ExposureStats,
    bias: BiasParams,
    kind: DeltaKind | str,
    corpus: Corpus,
    clip_threshold: float | None = None,
) -> dict[str, np.ndarray]:
    """Per query, the summed correction ``sum_{t: q_t = q} Δ(d | t)`` for every candidate document.

    Rank-conditioned corrections (ips, affine) only touch documents displayed
    at t; policy-conditioned ones (intervention oblivious/aware) include every
    candidate of ``q_t`` through their -E[beta]/E[alpha] terms.
    """
    kind = DeltaKind(kind)
    if kind in (DeltaKind.IPS, DeltaKind.POLICY_AWARE) and bias.p_exam is None:
        logger.info("no examination probabilities given: using alpha + beta as the IPS propensity")
    n_docs = {q.id: q.n_docs for q in corpus}
    n_ranks = max((len(e.displayed_ranking) for e in log), default=1)
    alpha, beta, exam = bias.vectors(n_ranks)
    counts = _aggregate(log, n_docs, n_ranks)
    weights: dict[str, np.ndarray] = {}

    def acc(qid, w):
        weights[qid] = weights[qid] + w if qid in weights else w

    if kind is DeltaKind.INTERVENTION_AWARE:
        per_query: dict[str, list[_Counts]] = {}
        for (_, qid), c in counts.items():
            per_query.setdefault(qid, []).append(c)
        for qid, cs in per_query.items():
            clicks = sum(c.clicks for c in cs)
            n = sum(c.n for c in cs)
            den = _denominator(stats.mean_alpha(qid), clip_threshold)
            num = clicks - n * stats.mean_beta(qid)
            weights[qid] = _divide(num, den, np.ones(len(den), bool), "expected alpha over all logging policies")
        return weights

    for (seg_id, qid), c in counts.items():
        if kind is DeltaKind.INTERVENTION_OBLIVIOUS:
            seg = stats.segment(seg_id)
            den = _denominator(seg.e_alpha[qid], clip_threshold)
            num = c.clicks - c.n * seg.e_beta[qid]
            acc(qid, _divide(num, den, np.ones(len(den), bool), "expected alpha under the logging policy"))
        elif kind is DeltaKind.POLICY_AWARE:
            seg = stats.segment(seg_id)
            den = _denominator(seg.e_exam[qid], clip_threshold)
            acc(qid, _divide(c.clicks, den, c.clicks > 0, "policy examination probability for a clicked document"))
        elif kind is DeltaKind.IPS:
            den = _denominator(exam, clip_threshold)[None, :]
            w = _divide(c.clicked_at, den, c.clicked_at > 0, "examination probability for a clicked document")
            acc(qid, w.sum(axis=1))
        else:
            den = _denominator(alpha, clip_threshold)[None, :]
            num = c.clicked_at - c.shown * beta[None, :]
            acc(qid, _divide(num, den, c.shown > 0, "alpha at a displayed rank").sum(axis=1))
    return weights


def reward_from_weights(
    weights: Mapping[str, np.ndarray], lambdas: Mapping[str, np.ndarray], n_timesteps: int
) -> float:
    total = 0.0
    for qid in sorted(weights):
        total += float(lambdas[qid] @ weights[qid])
    return total / n_timesteps


def estimate_reward(
    policy: Policy,
    log: InteractionLog,
    stats: ExposureStats,
    kind: DeltaKind | str,
    clip: bool,
    *,
    bias: BiasParams,
    corpus: Corpus,
    **marginal_kw,
) -> float:
    """Estimated reward of ``policy`` from the log; with ``clip`` every denominator is floored at 10/sqrt(T)."""
    if not log:
        raise ValueError("cannot estimate reward from an empty log")
    threshold = clip_threshold_for(len(log)) if clip else None
    weights = click_weights(log, stats, bias, kind, corpus, threshold)
    logged = Corpus(tuple(q for q in corpus if q.id in weights), corpus.partition, corpus.feature_dim)
    lams = dict(zip((q.id for q in logged), corpus_lambdas(policy, logged, **marginal_kw)))
    return reward_from_weights(weights, lams, len(log))
