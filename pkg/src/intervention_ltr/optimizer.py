"""Policy optimization on estimated reward with click-based early stopping."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .clicksim import BiasParams, InteractionLog
from .dataset import Corpus, Query, sample_fraction
from .estimators import (
    DeltaKind,
    ExposureStats,
    click_weights,
    clip_threshold_for,
    reward_from_weights,
)
from .metrics import dcg_discounts, lambda_from_marginals
from .policy import (
    Policy,
    corpus_logits,
    gumbel_noise,
    gumbel_topk,
    init_model,
    pl_marginals_exact,
    pl_marginals_mc,
    pl_score_gradients,
    pl_weighted_score_gradient,
)

logger = logging.getLogger(__name__)

# Validation uses exact marginals up to this candidate-set size.
_EXACT_EVAL_MAX = 6


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.1
    n_epochs_max: int = 30
    gradient_samples: int = 32
    batch_size: int = 32
    validation_fraction: float = 0.15
    patience: int = 5
    seed: int = 0
    # Monte-Carlo samples for the validation estimate on large candidate sets.
    eval_samples: int = 200
    update: str = "sgd"  # or "adam"

    def __post_init__(self):
        for name in ("learning_rate", "n_epochs_max", "gradient_samples", "batch_size", "patience", "eval_samples"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.update not in ("sgd", "adam"):
            raise ValueError("update must be 'sgd' or 'adam'")


@dataclass(frozen=True)
class SupervisedConfig:
    model: str = "mlp"
    temperature: float = 1.0
    cutoff: int = 5
    learning_rate: float = 0.01
    steps: int = 1000
    batch_size: int = 64
    seed: int = 0


class Adam:
    """Adam step rule on a flat parameter vector; ``step`` returns the increment to add."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def split_clicks(log: InteractionLog, fraction: float, seed: int) -> tuple[InteractionLog, InteractionLog]:
    """Random timestep-level split into (train, validation); validation gets round(fraction * n) entries."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    if len(log) < 2:
        raise ValueError("need at least 2 log entries to split")
    n_val = min(max(1, int(round(fraction * len(log)))), len(log) - 1)
    perm = np.random.default_rng(seed).permutation(len(log))
    val_idx = np.zeros(len(log), dtype=bool)
    val_idx[perm[:n_val]] = True
    train = [e for e, v in zip(log, val_idx) if not v]
    val = [e for e, v in zip(log, val_idx) if v]
    return train, val


# ---------------------------------------------------------------------------
# Score-function gradients.


def score_function_gradient(
    policy: Policy,
    query: Query,
    rankings: np.ndarray,
    returns: np.ndarray,
    baselines: np.ndarray,
) -> np.ndarray:
    """mean_i (returns[i] - baselines[i]) * grad log pi(rankings[i] | q)."""
    z = policy.model.forward(query.features) / policy.temperature
    g = pl_score_gradients(z[None, :], np.asarray(rankings)[None])[0]
    coef = (np.asarray(returns) - np.asarray(baselines)) / len(returns)
    return policy.model.backward(query.features, (coef @ g) / policy.temperature)


def leave_one_out_baselines(returns: np.ndarray) -> np.ndarray:
    n = returns.shape[-1]
    if n < 2:
        return np.zeros_like(returns)
    return (returns.sum(axis=-1, keepdims=True) - returns) / (n - 1)


def ranking_returns(rankings: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """sum_r weights[ranking[r]] * discount(r) for every sampled prefix."""
    disc = dcg_discounts(rankings.shape[-1])
    return np.take_along_axis(
        np.broadcast_to(weights[..., None, :], rankings.shape[:-1] + weights.shape[-1:]), rankings, axis=-1
    ) @ disc


def policy_gradient_estimate(
    policy: Policy, per_doc_weights: np.ndarray, query: Query, n_samples: int, rng: np.random.Generator
) -> np.ndarray:
    """Monte-Carlo gradient of sum_d lambda(d) * w_d.

    The baseline of each sample is the mean return of the other samples, which
    keeps the estimate unbiased while reducing its variance.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    w = np.asarray(per_doc_weights, dtype=np.float64)
    k = min(policy.cutoff, query.n_docs)
    z = policy.model.forward(query.features) / policy.temperature
    rankings = gumbel_topk(z[None, :], k, n_samples, rng)[0]
    returns = ranking_returns(rankings, w)
    return score_function_gradient(policy, query, rankings, returns, leave_one_out_baselines(returns))


def _batch_gradient(
    policy: Policy, corpus: Corpus, qidx: Sequence[int], weights: Sequence[np.ndarray], n_samples: int, rng
) -> np.ndarray:
    """Sum of policy_gradient_estimate over the batch, with one backward pass."""
    feats_all, offsets = corpus.stacked
    rows = np.concatenate([np.arange(offsets[i], offsets[i + 1]) for i in qidx])
    x = feats_all[rows]
    z_all = policy.model.forward(x) / policy.temperature
    grad_z = np.zeros_like(z_all)
    pos = 0
    spans = []
    for i in qidx:
        n = offsets[i + 1] - offsets[i]
        spans.append((pos, n))
        pos += n
    # Queries of equal size are processed together.
    by_size: dict[int, list[int]] = {}
    for j, (_, n) in enumerate(spans):
        by_size.setdefault(int(n), []).append(j)
    for n, js in by_size.items():
        k = min(policy.cutoff, n)
        z = np.stack([z_all[spans[j][0] : spans[j][0] + n] for j in js])
        w = np.stack([weights[j] for j in js])
        rankings = gumbel_topk(z, k, n_samples, rng)
        returns = ranking_returns(rankings, w)
        coef = (returns - leave_one_out_baselines(returns)) / n_samples
        g = pl_weighted_score_gradient(z, rankings, coef)
        for row, j in enumerate(js):
            grad_z[spans[j][0] : spans[j][0] + n] = g[row]
    return policy.model.backward(x, grad_z / policy.temperature)


# ---------------------------------------------------------------------------
# Optimization.


class _ValidationObjective:
    """Unclipped estimated reward on the validation split.

    Sampling noise for the Monte-Carlo marginals is drawn once, so epochs are
    compared under common random numbers.
    """

    def __init__(self, weights: Mapping[str, np.ndarray], corpus: Corpus, n_timesteps: int, cfg: OptimizerConfig, seed: int):
        self.weights = weights
        self.queries = Corpus(tuple(q for q in corpus if q.id in weights), corpus.partition, corpus.feature_dim)
        self.n = n_timesteps
        rng = np.random.default_rng(seed)
        self.noise = {
            n: gumbel_noise((len(idx), cfg.eval_samples, n), rng)
            for n, idx in self.queries.buckets.items()
            if n > _EXACT_EVAL_MAX
        }

    def __call__(self, policy: Policy) -> float:
        if not self.weights:
            return 0.0
        logits = corpus_logits(policy, self.queries)
        ids = [q.id for q in self.queries]
        lams = {}
        for n, idx in self.queries.buckets.items():
            k = min(policy.cutoff, n)
            if n <= _EXACT_EVAL_MAX:
                for i in idx:
                    lams[ids[i]] = lambda_from_marginals(pl_marginals_exact(logits[i], k))
                continue
            noise = self.noise[n]
            m = pl_marginals_mc(np.stack([logits[i] for i in idx]), k, noise.shape[1], noise=noise)
            for i, mi in zip(idx, m):
                lams[ids[i]] = lambda_from_marginals(mi)
        return reward_from_weights(self.weights, lams, self.n)


def optimize(
    log: InteractionLog,
    stats: ExposureStats,
    bias: BiasParams,
    init_policy: Policy,
    kind: DeltaKind | str,
    cfg: OptimizerConfig,
    corpus: Corpus,
) -> Policy:
    """SGD on the clipped training estimate, keeping the best epoch on the unclipped validation estimate.

    Epoch 0 (``init_policy`` itself) is a candidate, so the result never
    scores below it on the validation split.
    """
    if not log:
        raise ValueError("cannot optimize on an empty log")
    kind = DeltaKind(kind)
    if stats.T != len(log):
        raise ValueError(f"exposure statistics cover {stats.T} steps but the log has {len(log)}")
    train_log, val_log = split_clicks(log, cfg.validation_fraction, cfg.seed)
    clip = clip_threshold_for(len(log))
    train_w = click_weights(train_log, stats, bias, kind, corpus, clip)
    val_w = click_weights(val_log, stats, bias, kind, corpus, None)

    train_ids = [qid for qid in sorted(train_w) if np.any(train_w[qid] != 0)]
    qindex = corpus.index
    train_idx = np.array([qindex[qid] for qid in train_ids], dtype=np.int64)
    validate = _ValidationObjective(val_w, corpus, len(val_log), cfg, cfg.seed + 1)

    rng = np.random.default_rng([cfg.seed, 2])
    best = init_policy
    best_value = validate(init_policy)
    logger.debug("epoch 0: validation estimate %.6f", best_value)
    if len(train_idx) == 0:
        return init_policy

    theta = init_policy.model.flat()
    policy = init_policy
    adam = Adam(cfg.learning_rate) if cfg.update == "adam" else None
    # Unbiased per-step estimate of the gradient of (1/T_train) sum_q lambda_q . w_q.
    scale = len(train_idx) / len(train_log)
    stale = 0
    for epoch in range(1, cfg.n_epochs_max + 1):
        order = train_idx[rng.permutation(len(train_idx))]
        for s in range(0, len(order), cfg.batch_size):
            batch = order[s : s + cfg.batch_size]
            ws = [train_w[corpus.queries[i].id] for i in batch]
            grad = scale / len(batch) * _batch_gradient(policy, corpus, batch, ws, cfg.gradient_samples, rng)
            theta = theta + (adam.step(grad) if adam else cfg.learning_rate * grad)
            policy = policy.with_params(theta)
        value = validate(policy)
        logger.debug("epoch %d: validation estimate %.6f", epoch, value)
        if value > best_value:
            best, best_value, stale = policy, value, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best


def supervised_bootstrap(corpus_fraction: float, corpus: Corpus, cfg: SupervisedConfig) -> Policy:
    """Production ranker: squared-error regression of scores onto 0.25 * label on a query sample.

    Minibatches are drawn with replacement from the sampled documents and
    updated with Adam.
    """
    rng = np.random.default_rng([cfg.seed, 3])
    sample = sample_fraction(corpus, corpus_fraction, rng)
    if len(sample) == 0:
        raise ValueError("the sampled fraction contains no queries")
    x, _ = sample.stacked
    y = np.concatenate([q.relevance for q in sample])
    model = init_model(cfg.model, corpus.feature_dim, rng)
    theta = model.flat()
    adam = Adam(cfg.learning_rate)
    for _ in range(cfg.steps):
        idx = rng.integers(len(y), size=cfg.batch_size)
        resid = model.forward(x[idx]) - y[idx]
        theta = theta - adam.step(model.backward(x[idx], 2.0 * resid / len(idx)))
        model = model.with_flat(theta)
    return Policy(model, cfg.temperature, cfg.cutoff)
