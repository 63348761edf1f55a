"""Scoring models and the Plackett-Luce ranking policies they induce.

A policy turns document scores into logits ``score / temperature`` and
displays the top-``cutoff`` prefix of a ranking drawn by repeated softmax
sampling without replacement.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .dataset import Corpus, Query

HIDDEN_UNITS = 32
EXACT_THRESHOLD = 12
N_MARGINAL_SAMPLES = 10_000
# Below this temperature the policy ranks deterministically by descending score.
DETERMINISTIC_TEMPERATURE = 1e-8
CHECKPOINT_FORMAT = "intervention-ltr-policy"
CHECKPOINT_VERSION = 1

_PARAM_NAMES = {
    "linear": ("w", "b"),
    "mlp": ("W1", "b1", "W2", "b2", "w3", "b3"),
}


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True, eq=False)
class ScoringModel:
    kind: str
    params: dict[str, np.ndarray]

    def __post_init__(self):
        if self.kind not in _PARAM_NAMES:
            raise ValueError(f"unknown model kind {self.kind!r}")
        names = _PARAM_NAMES[self.kind]
        if set(self.params) != set(names):
            raise ValueError(f"{self.kind} model expects parameters {names}")
        params = {}
        for name in names:
            arr = np.array(self.params[name], dtype=np.float64)
            arr.setflags(write=False)
            params[name] = arr
        if self.kind == "mlp":
            f, h = params["W1"].shape
            if (
                params["b1"].shape != (h,)
                or params["W2"].shape[0] != h
                or params["b2"].shape != (params["W2"].shape[1],)
                or params["w3"].shape != (params["W2"].shape[1],)
                or params["b3"].shape != ()
            ):
                raise ValueError("inconsistent mlp parameter shapes")
        elif params["w"].ndim != 1 or params["b"].shape != ():
            raise ValueError("linear model needs a weight vector and a scalar intercept")
        object.__setattr__(self, "params", params)

    @property
    def feature_dim(self) -> int:
        return self.params["w"].shape[0] if self.kind == "linear" else self.params["W1"].shape[0]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in _PARAM_NAMES[self.kind]])

    def with_flat(self, theta: np.ndarray) -> "ScoringModel":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        out, i = {}, 0
        for name in _PARAM_NAMES[self.kind]:
            shape = self.params[name].shape
            size = int(np.prod(shape))
            out[name] = theta[i : i + size].reshape(shape)
            i += size
        return ScoringModel(self.kind, out)

    def __eq__(self, other):
        if not isinstance(other, ScoringModel):
            return NotImplemented
        return self.kind == other.kind and all(
            np.array_equal(self.params[n], other.params[n]) for n in _PARAM_NAMES[self.kind]
        )

    __hash__ = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Scores for a (n, F) feature matrix."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.feature_dim:
            raise ValueError(f"expected features of dimension {self.feature_dim}, got shape {x.shape}")
        p = self.params
        if self.kind == "linear":
            return x @ p["w"] + p["b"]
        h1 = _sigmoid(x @ p["W1"] + p["b1"])
        h2 = _sigmoid(h1 @ p["W2"] + p["b2"])
        return h2 @ p["w3"] + p["b3"]

    def backward(self, x: np.ndarray, grad_scores: np.ndarray) -> np.ndarray:
        """Flat gradient of ``sum(grad_scores * forward(x))`` w.r.t. the parameters."""
        p = self.params
        g = np.asarray(grad_scores, dtype=np.float64)
        if self.kind == "linear":
            return np.concatenate([x.T @ g, [g.sum()]])
        h1 = _sigmoid(x @ p["W1"] + p["b1"])
        h2 = _sigmoid(h1 @ p["W2"] + p["b2"])
        d2 = np.outer(g, p["w3"]) * h2 * (1.0 - h2)
        d1 = (d2 @ p["W2"].T) * h1 * (1.0 - h1)
        grads = {
            "W1": x.T @ d1,
            "b1": d1.sum(axis=0),
            "W2": h1.T @ d2,
            "b2": d2.sum(axis=0),
            "w3": h2.T @ g,
            "b3": np.array(g.sum()),
        }
        return np.concatenate([grads[n].ravel() for n in _PARAM_NAMES["mlp"]])


def init_model(kind: str, feature_dim: int, rng: np.random.Generator | None = None, hidden: int = HIDDEN_UNITS):
    """Zero linear model, or an MLP with U(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
    if kind == "linear":
        return ScoringModel("linear", {"w": np.zeros(feature_dim), "b": np.array(0.0)})
    if rng is None:
        rng = np.random.default_rng(0)

    def unif(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return ScoringModel(
        "mlp",
        {
            "W1": unif(feature_dim, (feature_dim, hidden)),
            "b1": unif(feature_dim, hidden),
            "W2": unif(hidden, (hidden, hidden)),
            "b2": unif(hidden, hidden),
            "w3": unif(hidden, hidden),
            "b3": unif(hidden, ()),
        },
    )


@dataclass(frozen=True, eq=False)
class Policy:
    model: ScoringModel
    temperature: float = 1.0
    cutoff: int = 5

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.cutoff < 1:
            raise ValueError("cutoff must be positive")

    @property
    def deterministic(self) -> bool:
        return self.temperature < DETERMINISTIC_TEMPERATURE

    def with_params(self, theta: np.ndarray) -> "Policy":
        return replace(self, model=self.model.with_flat(theta))

    def __eq__(self, other):
        if not isinstance(other, Policy):
            return NotImplemented
        return (
            self.model == other.model
            and self.temperature == other.temperature
            and self.cutoff == other.cutoff
        )

    __hash__ = None


class NonFiniteScoreError(ValueError):
    pass


def _finite(scores: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(scores)):
        raise NonFiniteScoreError("scoring model produced non-finite scores")
    return scores


def score_documents(policy: Policy, query: Query) -> np.ndarray:
    return _finite(policy.model.forward(query.features))


def query_logits(policy: Policy, query: Query) -> np.ndarray:
    return score_documents(policy, query) / policy.temperature


def corpus_logits(policy: Policy, corpus: Corpus) -> list[np.ndarray]:
    """Logits for every query of a corpus, from a single forward pass."""
    feats, offsets = corpus.stacked
    z = _finite(policy.model.forward(feats)) / policy.temperature if len(feats) else np.zeros(0)
    return [z[offsets[i] : offsets[i + 1]] for i in range(len(corpus))]


def n_displayed(policy: Policy, n_docs: int) -> int:
    return min(policy.cutoff, n_docs)


# ---------------------------------------------------------------------------
# Batched Plackett-Luce primitives. ``logits`` has shape (B, n): B queries
# that share the candidate-set size n.


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    # -log(Exp(1)) is Gumbel(0, 1) distributed and cheaper to draw.
    return -np.log(rng.standard_exponential(size=shape))


def gumbel_topk(
    logits: np.ndarray,
    k: int,
    n_samples: int,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """(B, S, k) top-k prefixes of Plackett-Luce rankings via the Gumbel-max trick.

    ``noise`` (shape (B, S, n)) replaces fresh draws from ``rng``; reusing it
    gives common random numbers across policies.
    """
    b, n = logits.shape
    if noise is None:
        noise = gumbel_noise((b, n_samples, n), rng)
    keys = logits[:, None, :] + noise
    if k < n:
        part = np.argpartition(-keys, k - 1, axis=2)[:, :, :k]
        order = np.argsort(-np.take_along_axis(keys, part, axis=2), axis=2, kind="stable")
        return np.take_along_axis(part, order, axis=2)
    return np.argsort(-keys, axis=2, kind="stable")


class _Remaining:
    """Softmax over the documents not yet placed, for (B, S) prefixes sharing (B, n) logits.

    Works with exp-weights relative to each row's maximum and only falls back
    to a log-space computation when the remaining mass underflows.
    """

    def __init__(self, logits: np.ndarray, n_samples: int):
        b, n = logits.shape
        self.logits = logits
        self.weights = np.exp(logits - logits.max(axis=1, keepdims=True))
        self.avail = np.ones((b, n_samples, n))
        self._bi = np.arange(b)[:, None]
        self._si = np.arange(n_samples)[None, :]

    def totals(self) -> np.ndarray | None:
        """(B, S) remaining mass, or None when some row underflows."""
        total = np.einsum("bsn,bn->bs", self.avail, self.weights)
        return None if np.any(total < 1e-250) else total

    def weighted_mean(self, coef: np.ndarray) -> np.ndarray:
        """sum_s coef[b, s] * probs()[b, s, :] without materializing probs()."""
        total = self.totals()
        if total is None:
            return np.einsum("bs,bsn->bn", coef, self.probs())
        return self.weights * np.einsum("bsn,bs->bn", self.avail, coef / total)

    def probs(self) -> np.ndarray:
        p = self.avail * self.weights[:, None, :]
        total = p.sum(axis=2, keepdims=True)
        small = total[..., 0] < 1e-250
        if np.any(small):
            bi, si = np.nonzero(small)
            z = np.where(self.avail[bi, si] > 0, self.logits[bi], -np.inf)
            e = np.exp(z - z.max(axis=1, keepdims=True))
            p[bi, si] = e
            total[bi, si, 0] = e.sum(axis=1)
        return p / total

    def remove(self, picked: np.ndarray) -> None:
        self.avail[self._bi, self._si, picked] = 0.0


def pl_marginals_mc(
    logits: np.ndarray,
    k: int,
    n_samples: int,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """Monte-Carlo rank marginals (B, n, k).

    Each sampled prefix contributes the conditional placement probabilities at
    every rank rather than a 0/1 indicator; the estimate stays unbiased and
    every document keeps strictly positive mass at every rank.
    """
    b, n = logits.shape
    rankings = gumbel_topk(logits, k, n_samples, rng, noise)
    rem = _Remaining(logits, n_samples)
    out = np.empty((b, n, k))
    coef = np.full((b, n_samples), 1.0 / n_samples)
    for j in range(k):
        out[:, :, j] = rem.weighted_mean(coef)
        rem.remove(rankings[:, :, j])
    return out


def pl_score_gradients(logits: np.ndarray, rankings: np.ndarray) -> np.ndarray:
    """d log pi(ranking) / d logits for every sampled prefix: (B, S, n)."""
    b, s, k = rankings.shape
    rem = _Remaining(logits, s)
    grad = np.zeros((b, s, logits.shape[1]))
    bi = np.arange(b)[:, None]
    si = np.arange(s)[None, :]
    for j in range(k):
        grad -= rem.probs()
        grad[bi, si, rankings[:, :, j]] += 1.0
        rem.remove(rankings[:, :, j])
    return grad


def pl_weighted_score_gradient(logits: np.ndarray, rankings: np.ndarray, coef: np.ndarray) -> np.ndarray:
    """sum_s coef[b, s] * pl_score_gradients(logits, rankings)[b, s]: shape (B, n)."""
    b, s, k = rankings.shape
    rem = _Remaining(logits, s)
    grad = np.zeros(logits.shape)
    for j in range(k):
        grad -= rem.weighted_mean(coef)
        np.add.at(grad, (np.arange(b)[:, None], rankings[:, :, j]), coef)
        rem.remove(rankings[:, :, j])
    return grad


def pl_log_prob(logits: np.ndarray, ranking: Sequence[int]) -> float:
    """log pi(prefix) for one query's logits."""
    logits = np.asarray(logits, dtype=np.float64)
    remaining = np.ones(logits.shape[0], dtype=bool)
    total = 0.0
    for d in ranking:
        z = logits[remaining]
        m = z.max()
        total += logits[d] - (m + np.log(np.exp(z - m).sum()))
        remaining[d] = False
    return float(total)


def pl_marginals_exact(logits: np.ndarray, k: int) -> np.ndarray:
    """Exact (n, k) rank marginals by dynamic programming over placed-document sets."""
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[0]
    k = min(k, n)
    out = np.zeros((n, k))
    layer = {0: 1.0}
    for j in range(k):
        nxt: dict[int, float] = {}
        for placed, prob in layer.items():
            free = np.array([d for d in range(n) if not placed >> d & 1])
            z = logits[free] - logits[free].max()
            p = np.exp(z)
            p *= prob / p.sum()
            for d, pd in zip(free.tolist(), p.tolist()):
                out[d, j] += pd
                key = placed | (1 << d)
                nxt[key] = nxt.get(key, 0.0) + pd
        layer = nxt
    return out


# ---------------------------------------------------------------------------
# Single-query API.


def _deterministic_order(policy: Policy, query: Query) -> np.ndarray:
    return np.argsort(-score_documents(policy, query), kind="stable")


def sample_ranking(policy: Policy, query: Query, rng: np.random.Generator) -> list[int]:
    """Displayed prefix of one Plackett-Luce ranking, as document indices."""
    k = n_displayed(policy, query.n_docs)
    if policy.deterministic:
        return _deterministic_order(policy, query)[:k].tolist()
    z = query_logits(policy, query)
    return gumbel_topk(z[None, :], k, 1, rng)[0, 0].tolist()


def rank_marginals(
    policy: Policy,
    query: Query,
    *,
    exact_threshold: int = EXACT_THRESHOLD,
    n_samples: int = N_MARGINAL_SAMPLES,
    rng: np.random.Generator | None = None,
    n_ranks: int | None = None,
) -> np.ndarray:
    """P[d, r] = probability that document d is displayed at rank r+1.

    Exact for candidate sets up to ``exact_threshold``, Monte-Carlo otherwise.
    Ranks run up to ``min(n_ranks or cutoff, n_docs)``.
    """
    k = min(n_ranks or policy.cutoff, query.n_docs)
    if policy.deterministic:
        out = np.zeros((query.n_docs, k))
        out[_deterministic_order(policy, query)[:k], np.arange(k)] = 1.0
        return out
    z = query_logits(policy, query)
    if query.n_docs <= exact_threshold:
        return pl_marginals_exact(z, k)
    if rng is None:
        rng = np.random.default_rng(0)
    return pl_marginals_mc(z[None, :], k, n_samples, rng)[0]


def corpus_marginals(
    policy: Policy,
    corpus: Corpus,
    *,
    exact_threshold: int = EXACT_THRESHOLD,
    n_samples: int = N_MARGINAL_SAMPLES,
    rng: np.random.Generator | None = None,
    n_ranks: int | None = None,
) -> list[np.ndarray]:
    """rank_marginals for every query, batching Monte-Carlo queries by size."""
    if rng is None:
        rng = np.random.default_rng(0)
    logits = corpus_logits(policy, corpus)
    out: list[np.ndarray | None] = [None] * len(corpus)
    for n, idx in corpus.buckets.items():
        k = min(n_ranks or policy.cutoff, n)
        if policy.deterministic:
            for i in idx:
                out[i] = rank_marginals(policy, corpus.queries[i], n_ranks=n_ranks)
        elif n <= exact_threshold:
            for i in idx:
                out[i] = pl_marginals_exact(logits[i], k)
        else:
            # Chunk to bound memory at B * S * n floats.
            chunk = max(1, 2_000_000 // (n_samples * n))
            for s in range(0, len(idx), chunk):
                part = idx[s : s + chunk]
                res = pl_marginals_mc(np.stack([logits[i] for i in part]), k, n_samples, rng)
                for i, m in zip(part, res):
                    out[i] = m
    return out


def _check_ranking(policy: Policy, query: Query, ranking: Sequence[int]) -> list[int]:
    ranking = [int(d) for d in ranking]
    k = n_displayed(policy, query.n_docs)
    if len(ranking) != k or len(set(ranking)) != k or not all(0 <= d < query.n_docs for d in ranking):
        raise ValueError(f"invalid ranking {ranking} for query {query.id} (expected {k} distinct docs)")
    return ranking


def log_prob(policy: Policy, query: Query, ranking: Sequence[int]) -> float:
    ranking = _check_ranking(policy, query, ranking)
    return pl_log_prob(query_logits(policy, query), ranking)


def log_prob_gradient(policy: Policy, query: Query, ranking: Sequence[int]) -> np.ndarray:
    """Gradient of log pi(ranking | q) w.r.t. the flat model parameters."""
    ranking = _check_ranking(policy, query, ranking)
    z = query_logits(policy, query)
    g = pl_score_gradients(z[None, :], np.array(ranking)[None, None, :])[0, 0]
    return policy.model.backward(query.features, g / policy.temperature)


# ---------------------------------------------------------------------------
# Checkpoints.


def policy_to_dict(policy: Policy) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": policy.model.kind,
        "temperature": policy.temperature,
        "cutoff": policy.cutoff,
        "params": {
            name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in policy.model.params.items()
        },
    }


def policy_from_dict(blob: dict) -> Policy:
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a policy checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
    params = {
        name: np.array(p["data"], dtype=np.float64).reshape(p["shape"]) for name, p in blob["params"].items()
    }
    return Policy(ScoringModel(blob["kind"], params), float(blob["temperature"]), int(blob["cutoff"]))


def save_policy(policy: Policy, path) -> None:
    with open(path, "w") as fh:
        json.dump(policy_to_dict(policy), fh)


def load_policy(path) -> Policy:
    with open(path) as fh:
        return policy_from_dict(json.load(fh))
