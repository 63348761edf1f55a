"""Click simulation under position, item-selection and trust bias.

Click probability of a document with relevance P(R=1|d,q) = 0.25 * label
shown at rank k is ``alpha[k] * P(R=1|d,q) + beta[k]``; ranks beyond the
display cutoff are never examined.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np

from .dataset import Corpus, Query
from .policy import Policy, corpus_logits, gumbel_topk, n_displayed, rank_marginals, sample_ranking

# Trust-bias parameters for the top-5 used in the semi-synthetic setup.
PAPER_ALPHA = (0.35, 0.53, 0.55, 0.54, 0.52)
PAPER_BETA = (0.65, 0.26, 0.15, 0.11, 0.08)


@dataclass(frozen=True)
class BiasParams:
    alpha: tuple[float, ...]
    beta: tuple[float, ...]
    # Examination probability per rank, used only by the IPS estimators.
    # None means it was not supplied and alpha + beta stands in for it.
    p_exam: tuple[float, ...] | None = None

    def __post_init__(self):
        alpha = tuple(float(a) for a in self.alpha)
        beta = tuple(float(b) for b in self.beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)
        if len(alpha) == 0 or len(alpha) != len(beta):
            raise ValueError("alpha and beta must be nonempty and of equal length")
        for k, (a, b) in enumerate(zip(alpha, beta), start=1):
            if a < 0 or b < 0 or a + b > 1 + 1e-12:
                raise ValueError(f"rank {k}: need alpha >= 0, beta >= 0, alpha + beta <= 1")
        if self.p_exam is not None:
            p_exam = tuple(float(p) for p in self.p_exam)
            if len(p_exam) != len(alpha) or any(not 0 <= p <= 1 for p in p_exam):
                raise ValueError("p_exam must match alpha in length and lie in [0, 1]")
            object.__setattr__(self, "p_exam", p_exam)

    @property
    def cutoff(self) -> int:
        return len(self.alpha)

    def alpha_at(self, rank: int) -> float:
        return self.alpha[rank - 1] if 1 <= rank <= self.cutoff else 0.0

    def beta_at(self, rank: int) -> float:
        return self.beta[rank - 1] if 1 <= rank <= self.cutoff else 0.0

    def exam_at(self, rank: int) -> float:
        if not 1 <= rank <= self.cutoff:
            return 0.0
        if self.p_exam is None:
            return self.alpha[rank - 1] + self.beta[rank - 1]
        return self.p_exam[rank - 1]

    def vectors(self, n_ranks: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """alpha, beta and examination probability for ranks 1..n_ranks (zero past the cutoff)."""
        ranks = range(1, n_ranks + 1)
        return (
            np.array([self.alpha_at(r) for r in ranks]),
            np.array([self.beta_at(r) for r in ranks]),
            np.array([self.exam_at(r) for r in ranks]),
        )


def paper_bias() -> BiasParams:
    return BiasParams(PAPER_ALPHA, PAPER_BETA)


def bias_from_examination_model(
    p_exam: Sequence[float], p_click_rel: Sequence[float], p_click_nonrel: Sequence[float]
) -> BiasParams:
    """Fold examination and per-rank click-given-relevance probabilities into alpha/beta."""
    e, cr, cn = (np.asarray(v, dtype=np.float64) for v in (p_exam, p_click_rel, p_click_nonrel))
    if not (e.shape == cr.shape == cn.shape) or e.ndim != 1:
        raise ValueError("p_exam, p_click_rel and p_click_nonrel must have equal length")
    for v in (e, cr, cn):
        if np.any((v < 0) | (v > 1)):
            raise ValueError("probabilities must lie in [0, 1]")
    if np.any(cr < cn):
        raise ValueError("p_click_rel must be >= p_click_nonrel at every rank")
    return BiasParams(tuple(e * (cr - cn)), tuple(e * cn), tuple(e))


def click_probability(label: int, rank: int, bias: BiasParams) -> float:
    if rank < 1:
        raise ValueError("rank is 1-based")
    return bias.alpha_at(rank) * (0.25 * label) + bias.beta_at(rank)


@dataclass(frozen=True)
class LogEntry:
    timestep: int
    segment_id: int
    query_id: str
    displayed_ranking: tuple[int, ...]
    clicks: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "displayed_ranking", tuple(int(d) for d in self.displayed_ranking))
        object.__setattr__(self, "clicks", tuple(int(c) for c in self.clicks))
        if len(self.clicks) != len(self.displayed_ranking):
            raise ValueError("clicks must align with the displayed ranking")
        if len(set(self.displayed_ranking)) != len(self.displayed_ranking):
            raise ValueError("displayed ranking contains duplicates")
        if any(c not in (0, 1) for c in self.clicks):
            raise ValueError("clicks must be 0/1")


InteractionLog = list[LogEntry]


def _draw_clicks(labels_shown: np.ndarray, probs_a: np.ndarray, probs_b: np.ndarray, rng) -> np.ndarray:
    p = probs_a * (0.25 * labels_shown) + probs_b
    return (rng.random(p.shape[0]) < p).astype(np.int64)


def simulate_interaction(
    policy: Policy,
    query: Query,
    bias: BiasParams,
    timestep: int,
    segment_id: int,
    rng: np.random.Generator,
) -> LogEntry:
    ranking = sample_ranking(policy, query, rng)
    a, b, _ = bias.vectors(len(ranking))
    clicks = _draw_clicks(query.labels[ranking], a, b, rng)
    return LogEntry(timestep, segment_id, query.id, tuple(ranking), tuple(clicks.tolist()))


def simulate_log(
    policy: Policy,
    pool: Corpus,
    bias: BiasParams,
    n_steps: int,
    rng: np.random.Generator,
    *,
    start: int = 1,
    segment_id: int = 0,
) -> InteractionLog:
    """Gather ``n_steps`` interactions with queries drawn uniformly from ``pool``."""
    if len(pool) == 0:
        raise ValueError("cannot sample queries from an empty corpus")
    logits = None if policy.deterministic else corpus_logits(policy, pool)
    vec_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    log = []
    for t in range(start, start + n_steps):
        qi = int(rng.integers(len(pool)))
        q = pool.queries[qi]
        k = n_displayed(policy, q.n_docs)
        if logits is None:
            ranking = sample_ranking(policy, q, rng)
        else:
            ranking = gumbel_topk(logits[qi][None, :], k, 1, rng)[0, 0].tolist()
        if k not in vec_cache:
            vec_cache[k] = bias.vectors(k)[:2]
        a, b = vec_cache[k]
        clicks = _draw_clicks(q.labels[ranking], a, b, rng)
        log.append(LogEntry(t, segment_id, q.id, tuple(ranking), tuple(clicks.tolist())))
    return log


def exposure_expectations(marginals: np.ndarray, bias: BiasParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-document E[alpha_d], E[beta_d] and E[P(E=1)] under a policy's rank marginals."""
    a, b, e = bias.vectors(marginals.shape[1])
    return marginals @ a, marginals @ b, marginals @ e


def policy_click_probability(policy: Policy, doc: int, query: Query, bias: BiasParams, **marginal_kw) -> float:
    """E_y[alpha_d | pi, q] * P(R=1|d,q) + E_y[beta_d | pi, q]."""
    if not 0 <= doc < query.n_docs:
        raise ValueError(f"document {doc} not in query {query.id}")
    m = rank_marginals(policy, query, **marginal_kw)
    e_alpha, e_beta, _ = exposure_expectations(m, bias)
    return float(e_alpha[doc] * query.relevance[doc] + e_beta[doc])


# ---------------------------------------------------------------------------
# Log serialization: ``t segment qid id id ... clicks`` with clicks as a 0/1 string.


def format_log(log: Iterable[LogEntry]) -> str:
    lines = []
    for e in log:
        ids = " ".join(str(d) for d in e.displayed_ranking)
        clicks = "".join(str(c) for c in e.clicks)
        lines.append(f"{e.timestep} {e.segment_id} {e.query_id} {ids} {clicks}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_log(stream: TextIO | str | Iterable[str]) -> InteractionLog:
    if isinstance(stream, str):
        stream = stream.splitlines()
    log = []
    for lineno, line in enumerate(stream, start=1):
        tokens = line.split()
        if not tokens:
            continue
        try:
            t, seg, qid, *ids, clicks = tokens
            entry = LogEntry(int(t), int(seg), qid, tuple(int(d) for d in ids), tuple(int(c) for c in clicks))
        except ValueError as exc:
            raise ValueError(f"log line {lineno}: {exc}") from None
        log.append(entry)
    return log


def write_log(log: Iterable[LogEntry], path) -> None:
    with open(path, "w") as fh:
        fh.write(format_log(log))


def read_log(path) -> InteractionLog:
    with open(path) as fh:
        return parse_log(fh)
