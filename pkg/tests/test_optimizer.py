import itertools

import numpy as np
import pytest

from intervention_ltr.clicksim import PAPER_ALPHA, PAPER_BETA, BiasParams, LogEntry, simulate_log
from intervention_ltr.dataset import Corpus, Query, generate_synthetic_corpus
from intervention_ltr.estimators import ExposureStats, accumulate_exposure, add_segment
from intervention_ltr.metrics import ndcg
from intervention_ltr.optimizer import (
    Adam,
    OptimizerConfig,
    SupervisedConfig,
    _batch_gradient,
    leave_one_out_baselines,
    optimize,
    policy_gradient_estimate,
    ranking_returns,
    score_function_gradient,
    split_clicks,
    supervised_bootstrap,
)
from intervention_ltr.policy import Policy, ScoringModel, init_model, log_prob_gradient, query_logits, rank_marginals

from oracles import dcg_lambda_by_enumeration, enumerate_prefixes, finite_difference, logit_policy, logit_query

PAPER3 = BiasParams(PAPER_ALPHA[:3], PAPER_BETA[:3])


def _entries(n):
    return [LogEntry(t, t % 3, f"q{t % 4}", (0,), (t % 2,)) for t in range(1, n + 1)]


# -- click split -----------------------------------------------------------


def test_split_sizes():
    train, val = split_clicks(_entries(10), 0.2, seed=0)
    assert (len(train), len(val)) == (8, 2)


def test_split_is_deterministic_partition():
    log = _entries(57)
    a = split_clicks(log, 0.15, seed=4)
    assert a == split_clicks(log, 0.15, seed=4)
    train, val = a
    ts = [e.timestep for e in train] + [e.timestep for e in val]
    assert sorted(ts) == list(range(1, 58))
    assert {e.segment_id for e in train} <= {0, 1, 2}


def test_split_rejects_tiny_logs_and_bad_fractions():
    with pytest.raises(ValueError):
        split_clicks(_entries(1), 0.5, 0)
    with pytest.raises(ValueError):
        split_clicks(_entries(10), 1.0, 0)


# -- gradients ---------------------------------------------------------------


def _instance():
    q = Query("q", [[0.3, -1.2], [1.0, 0.4], [-0.5, 0.8]], [4, 1, 0])
    pol = Policy(ScoringModel("linear", {"w": [0.5, -0.25], "b": 0.1}), 1.0, 3)
    return q, pol


def _exact_objective(pol, q, w):
    return float(dcg_lambda_by_enumeration(query_logits(pol, q), pol.cutoff) @ w)


def _enumeration_gradient(pol, q, w):
    z = query_logits(pol, q)
    k = min(pol.cutoff, q.n_docs)
    disc = 1 / np.log2(np.arange(2, k + 2))
    return sum(p * (w[list(y)] @ disc) * log_prob_gradient(pol, q, y) for y, p in enumerate_prefixes(z, k))


def test_zero_weights_give_zero_gradient():
    q, pol = _instance()
    assert np.all(policy_gradient_estimate(pol, np.zeros(3), q, 16, np.random.default_rng(0)) == 0.0)


def test_single_document_gives_zero_gradient():
    q = Query("q", [[1.0, 2.0]], [3])
    pol = Policy(ScoringModel("linear", {"w": [0.3, 0.1], "b": 0.0}))
    assert np.all(policy_gradient_estimate(pol, np.array([2.5]), q, 8, np.random.default_rng(0)) == 0.0)


def test_enumeration_gradient_matches_finite_differences():
    q, pol = _instance()
    w = np.array([1.0, 0.3, -0.2])
    exact = _enumeration_gradient(pol, q, w)
    fd = finite_difference(lambda th: _exact_objective(pol.with_params(th), q, w), pol.model.flat())
    assert np.linalg.norm(exact - fd) / np.linalg.norm(fd) < 1e-4


@pytest.mark.parametrize("n_docs,k,n_samples", [(3, 3, 2), (3, 2, 3), (4, 2, 2)])
def test_monte_carlo_gradient_is_unbiased(n_docs, k, n_samples):
    rng = np.random.default_rng(n_docs * 10 + k)
    q = Query("q", rng.normal(size=(n_docs, 2)), [0] * n_docs)
    pol = Policy(ScoringModel("linear", {"w": rng.normal(size=2), "b": 0.0}), 0.8, k)
    w = rng.normal(size=n_docs)
    z = query_logits(pol, q)
    prefixes = enumerate_prefixes(z, k)
    expectation = 0.0
    for combo in itertools.product(prefixes, repeat=n_samples):
        rankings = np.array([y for y, _ in combo])
        prob = np.prod([p for _, p in combo])
        returns = ranking_returns(rankings, w)
        expectation = expectation + prob * score_function_gradient(
            pol, q, rankings, returns, leave_one_out_baselines(returns)
        )
    assert np.abs(expectation - _enumeration_gradient(pol, q, w)).max() < 1e-9


def test_monte_carlo_gradient_converges():
    q, pol = _instance()
    w = np.array([1.0, 0.3, -0.2])
    est = policy_gradient_estimate(pol, w, q, 100_000, np.random.default_rng(0))
    exact = _enumeration_gradient(pol, q, w)
    assert est @ exact / (np.linalg.norm(est) * np.linalg.norm(exact)) > 0.99


def test_batched_gradient_agrees_with_single_query_estimates():
    rng = np.random.default_rng(0)
    qs = tuple(Query(f"q{i}", rng.normal(size=(n, 3)), [0] * n) for i, n in enumerate((3, 5, 3, 7)))
    corpus = Corpus(qs, "train", 3)
    pol = Policy(init_model("mlp", 3, rng), 1.0, 3)
    ws = [rng.normal(size=q.n_docs) for q in qs]
    est = _batch_gradient(pol, corpus, np.arange(4), ws, 40_000, np.random.default_rng(1))
    exact = sum(_enumeration_gradient(pol, q, w) for q, w in zip(qs, ws))
    assert np.linalg.norm(est - exact) < 0.05 * np.linalg.norm(exact)


def test_leave_one_out_baseline():
    r = np.array([1.0, 2.0, 6.0])
    assert leave_one_out_baselines(r).tolist() == [4.0, 3.5, 1.5]
    assert leave_one_out_baselines(np.array([3.0])).tolist() == [0.0]


def test_adam_first_step_is_learning_rate_sized():
    step = Adam(0.01).step(np.array([3.0, -0.2, 0.0]))
    assert np.allclose(step, [0.01, -0.01, 0.0], atol=1e-8)


# -- optimize ----------------------------------------------------------------


def _one_query_setup(n_steps=4000, seed=0):
    q = logit_query([4, 0, 0])
    corpus = Corpus((q,), "train", 3)
    pi0 = logit_policy([0.0, 0.5, 0.3], 3)
    stats = accumulate_exposure(ExposureStats(), pi0, n_steps, PAPER3, corpus)
    log = simulate_log(pi0, corpus, PAPER3, n_steps, np.random.default_rng(seed))
    return corpus, pi0, stats, log


def test_ample_clicks_put_the_relevant_document_first():
    corpus, pi0, stats, log = _one_query_setup()
    cfg = OptimizerConfig(learning_rate=1.0, n_epochs_max=200, patience=200, gradient_samples=64, seed=1)
    best = optimize(log, stats, PAPER3, pi0, "intervention_aware", cfg, corpus)
    assert rank_marginals(best, corpus.queries[0])[0, 0] > 0.9


def test_optimize_is_deterministic():
    corpus, pi0, stats, log = _one_query_setup(500)
    cfg = OptimizerConfig(n_epochs_max=5, seed=3)
    a = optimize(log, stats, PAPER3, pi0, "affine", cfg, corpus)
    b = optimize(log, stats, PAPER3, pi0, "affine", cfg, corpus)
    assert np.array_equal(a.model.flat(), b.model.flat())


def test_no_click_signal_returns_the_initial_policy():
    bias = BiasParams((0.5, 0.3, 0.2), (0.0, 0.0, 0.0))
    q = logit_query([0, 0, 0])
    corpus = Corpus((q,), "train", 3)
    pi0 = logit_policy([0.2, 0.0, -0.3], 3)
    stats = accumulate_exposure(ExposureStats(), pi0, 100, bias, corpus)
    log = simulate_log(pi0, corpus, bias, 100, np.random.default_rng(0))
    assert all(sum(e.clicks) == 0 for e in log)
    assert optimize(log, stats, bias, pi0, "intervention_aware", OptimizerConfig(), corpus) is pi0


def test_optimize_requires_matching_exposure():
    corpus, pi0, stats, log = _one_query_setup(50)
    with pytest.raises(ValueError):
        optimize(log[:-1], stats, PAPER3, pi0, "affine", OptimizerConfig(), corpus)
    with pytest.raises(ValueError):
        optimize([], add_segment(ExposureStats(), 1, {}, {}), PAPER3, pi0, "affine", OptimizerConfig(), corpus)


# -- supervised bootstrap ----------------------------------------------------


def test_bootstrap_on_noiseless_corpus_with_full_data():
    train = generate_synthetic_corpus(60, 10, 5, seed=0, noise=0.0, model_seed=3)
    test = generate_synthetic_corpus(30, 10, 5, seed=1, noise=0.0, model_seed=3, partition="test")
    cfg = SupervisedConfig(model="linear", temperature=1e-9, steps=3000, seed=0)
    pol = supervised_bootstrap(1.0, train, cfg)
    assert ndcg(pol, test) > 0.95


def test_bootstrap_is_deterministic():
    train = generate_synthetic_corpus(20, 5, 4, seed=0)
    cfg = SupervisedConfig(steps=50, seed=7)
    assert supervised_bootstrap(0.5, train, cfg) == supervised_bootstrap(0.5, train, cfg)


@pytest.mark.slow
def test_small_fraction_lands_between_random_and_full_data():
    from intervention_ltr.dataset import synthetic_dataset

    data = synthetic_dataset(200, 20, 50, 20, 16, seed=0)
    kw = dict(n_samples=300)
    small, full, rand = [], [], []
    for seed in range(20):
        cfg = SupervisedConfig(temperature=0.1, steps=400, seed=seed)
        small.append(ndcg(supervised_bootstrap(0.01, data.train, cfg), data.test, rng=np.random.default_rng(seed), **kw))
        full.append(ndcg(supervised_bootstrap(1.0, data.train, cfg), data.test, rng=np.random.default_rng(seed), **kw))
        random_pol = Policy(init_model("mlp", 16, np.random.default_rng(seed)), 1.0, 5)
        rand.append(ndcg(random_pol, data.test, rng=np.random.default_rng(seed), **kw))
    assert np.mean(rand) < np.mean(small) < np.mean(full)
