"""DCG metric weights, true reward and NDCG of stochastic ranking policies."""
from __future__ import annotations

import numpy as np

from .dataset import Corpus, Query
from .policy import Policy, corpus_marginals, rank_marginals


def dcg_discounts(n_ranks: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, n_ranks + 2))


def lambda_from_marginals(marginals: np.ndarray) -> np.ndarray:
    return marginals @ dcg_discounts(marginals.shape[1])


def dcg_lambda(policy: Policy, query: Query, **marginal_kw) -> np.ndarray:
    """Expected DCG discount of every document under the policy; zero past the cutoff."""
    return lambda_from_marginals(rank_marginals(policy, query, **marginal_kw))


def corpus_lambdas(policy: Policy, corpus: Corpus, **marginal_kw) -> list[np.ndarray]:
    return [lambda_from_marginals(m) for m in corpus_marginals(policy, corpus, **marginal_kw)]


def true_reward(policy: Policy, corpus: Corpus, **marginal_kw) -> float:
    """Sum over uniformly weighted queries of sum_d lambda(d) * P(R=1|d,q)."""
    if len(corpus) == 0:
        return 0.0
    lams = corpus_lambdas(policy, corpus, **marginal_kw)
    return float(np.mean([lam @ q.relevance for lam, q in zip(lams, corpus)]))


def ideal_dcg(query: Query, cutoff: int) -> float:
    gains = np.sort(query.relevance)[::-1][:cutoff]
    return float(gains @ dcg_discounts(gains.shape[0]))


def ndcg(policy: Policy, corpus: Corpus, cutoff: int | None = None, **marginal_kw) -> float:
    """Mean expected DCG@cutoff over ideal DCG@cutoff; queries without relevant documents are skipped."""
    cutoff = cutoff or policy.cutoff
    lams = corpus_lambdas(policy, corpus, n_ranks=cutoff, **marginal_kw)
    values = []
    for lam, q in zip(lams, corpus):
        ideal = ideal_dcg(q, cutoff)
        if ideal > 0:
            values.append(min(1.0, float(lam @ q.relevance) / ideal))
    if not values:
        raise ValueError("every query has only zero labels; NDCG is undefined")
    return float(np.mean(values))
