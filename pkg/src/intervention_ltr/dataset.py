"""Ranking corpora: LETOR/SVMrank parsing, synthetic generation and partitions."""
from __future__ import annotations

import io
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

PARTITIONS = ("train", "validation", "test")
MAX_LABEL = 4

# Thresholds on the standardized hidden relevance score; yields a label
# distribution skewed towards 0/1 like commercial LTR corpora.
_LABEL_THRESHOLDS = np.array([0.0, 0.8, 1.5, 2.2])


class CorpusFormatError(ValueError):
    """A line of a LETOR file could not be parsed."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class CorpusValidationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Query:
    id: str
    features: np.ndarray  # (n_docs, feature_dim) float64
    labels: np.ndarray  # (n_docs,) int64

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or labels.ndim != 1 or features.shape[0] != labels.shape[0]:
            raise CorpusValidationError(f"query {self.id}: features/labels shape mismatch")
        if labels.shape[0] == 0:
            raise CorpusValidationError(f"query {self.id}: no candidate documents")
        if labels.min() < 0 or labels.max() > MAX_LABEL:
            raise CorpusValidationError(f"query {self.id}: label outside [0, {MAX_LABEL}]")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def n_docs(self) -> int:
        return self.labels.shape[0]

    @property
    def relevance(self) -> np.ndarray:
        """P(R=1 | d, q) = 0.25 * label."""
        return 0.25 * self.labels

    def __eq__(self, other):
        if not isinstance(other, Query):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.labels, other.labels)
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Corpus:
    queries: tuple[Query, ...]
    partition: str = "train"
    feature_dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "queries", tuple(self.queries))
        if self.partition not in PARTITIONS:
            raise CorpusValidationError(f"unknown partition {self.partition!r}")
        if self.feature_dim < 1:
            raise CorpusValidationError("feature_dim must be positive")
        seen = set()
        for q in self.queries:
            if q.features.shape[1] != self.feature_dim:
                raise CorpusValidationError(
                    f"query {q.id}: feature length {q.features.shape[1]} != {self.feature_dim}"
                )
            if q.id in seen:
                raise CorpusValidationError(f"duplicate query id {q.id}")
            seen.add(q.id)

    def __len__(self) -> int:
        return len(self.queries)

    def __iter__(self):
        return iter(self.queries)

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return (
            self.partition == other.partition
            and self.feature_dim == other.feature_dim
            and self.queries == other.queries
        )

    __hash__ = None

    @cached_property
    def index(self) -> dict[str, int]:
        return {q.id: i for i, q in enumerate(self.queries)}

    def query(self, qid: str) -> Query:
        return self.queries[self.index[qid]]

    @cached_property
    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """All documents in one (sum n_docs, F) matrix plus query offsets of length Q+1."""
        sizes = [q.n_docs for q in self.queries]
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        feats = (
            np.concatenate([q.features for q in self.queries])
            if self.queries
            else np.zeros((0, self.feature_dim))
        )
        feats.setflags(write=False)
        return feats, offsets

    @cached_property
    def buckets(self) -> dict[int, np.ndarray]:
        """Query indices grouped by candidate-set size, for batched computation."""
        groups: dict[int, list[int]] = {}
        for i, q in enumerate(self.queries):
            groups.setdefault(q.n_docs, []).append(i)
        return {n: np.array(idx) for n, idx in sorted(groups.items())}


@dataclass(frozen=True)
class Dataset:
    train: Corpus
    validation: Corpus
    test: Corpus

    @property
    def feature_dim(self) -> int:
        return self.train.feature_dim

    def logging_pool(self) -> Corpus:
        """Train and validation queries merged: the pool users issue queries from."""
        return Corpus(self.train.queries + self.validation.queries, "train", self.feature_dim)


def _parse_label(token: str, lineno: int) -> int:
    try:
        value = float(token)
    except ValueError:
        raise CorpusFormatError(lineno, f"bad label {token!r}") from None
    if value != int(value):
        raise CorpusFormatError(lineno, f"non-integer label {token!r}")
    label = int(value)
    if not 0 <= label <= MAX_LABEL:
        raise CorpusValidationError(f"line {lineno}: label {label} outside [0, {MAX_LABEL}]")
    return label


def parse_ranking_corpus(stream: TextIO | str | Iterable[str], partition: str = "train") -> Corpus:
    """Parse ``<label> qid:<id> <fid>:<value> ... [# comment]`` lines.

    Documents are grouped by qid in order of first appearance; feature ids are
    1-based and missing ones are filled with 0.0.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    order: list[str] = []
    docs: dict[str, list[tuple[dict[int, float], int]]] = {}
    max_fid = 0
    for lineno, raw in enumerate(stream, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) < 2 or not tokens[1].startswith("qid:") or len(tokens[1]) == 4:
            raise CorpusFormatError(lineno, "expected '<label> qid:<id> ...'")
        label = _parse_label(tokens[0], lineno)
        qid = tokens[1][4:]
        feats: dict[int, float] = {}
        for tok in tokens[2:]:
            fid_s, sep, val_s = tok.partition(":")
            try:
                fid, val = int(fid_s), float(val_s)
            except ValueError:
                raise CorpusFormatError(lineno, f"bad feature token {tok!r}") from None
            if not sep or fid < 1:
                raise CorpusFormatError(lineno, f"bad feature token {tok!r}")
            feats[fid] = val
            max_fid = max(max_fid, fid)
        if qid not in docs:
            docs[qid] = []
            order.append(qid)
        docs[qid].append((feats, label))

    dim = max(max_fid, 1)
    queries = []
    for qid in order:
        x = np.zeros((len(docs[qid]), dim))
        for row, (feats, _) in enumerate(docs[qid]):
            for fid, val in feats.items():
                x[row, fid - 1] = val
        queries.append(Query(qid, x, np.array([lab for _, lab in docs[qid]])))
    return Corpus(tuple(queries), partition, dim)


def format_ranking_corpus(corpus: Corpus) -> str:
    """Serialize to LETOR text; every feature is written so the round trip is exact."""
    lines = []
    for q in corpus:
        for x, label in zip(q.features, q.labels):
            feats = " ".join(f"{i + 1}:{v!r}" for i, v in enumerate(x.tolist()))
            lines.append(f"{label} qid:{q.id} {feats}")
    return "\n".join(lines) + ("\n" if lines else "")


def load_corpus(path: str | Path, partition: str = "train") -> Corpus:
    with open(path) as fh:
        return parse_ranking_corpus(fh, partition)


def generate_synthetic_corpus(
    n_queries: int,
    n_docs: int,
    n_features: int,
    seed: int,
    *,
    partition: str = "train",
    model_seed: int | None = None,
    noise: float = 0.5,
) -> Corpus:
    """Draw a corpus whose labels threshold a hidden linear function of the features.

    The hidden weight vector depends only on ``model_seed`` (default ``seed``),
    so partitions drawn with different ``seed`` but a shared ``model_seed``
    share one relevance function.
    """
    if min(n_queries, n_docs, n_features) < 1:
        raise ValueError("n_queries, n_docs and n_features must be positive")
    w = np.random.default_rng([model_seed if model_seed is not None else seed, 0]).normal(
        size=n_features
    )
    w /= np.linalg.norm(w)
    rng = np.random.default_rng([seed, 1])
    queries = []
    for i in range(n_queries):
        x = rng.normal(size=(n_docs, n_features))
        z = x @ w + noise * rng.normal(size=n_docs)
        if noise > 0:
            z /= np.sqrt(1.0 + noise**2)
        labels = np.digitize(z, _LABEL_THRESHOLDS)
        queries.append(Query(f"{partition}-{i}", x, labels))
    return Corpus(tuple(queries), partition, n_features)


def minmax_normalize(train: Corpus, *others: Corpus) -> list[Corpus]:
    """Min-max scale every feature with statistics from ``train``; constant features map to 0."""
    allx = np.concatenate([q.features for q in train]) if len(train) else np.zeros((1, train.feature_dim))
    lo, hi = allx.min(axis=0), allx.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)

    def scale(c: Corpus) -> Corpus:
        qs = tuple(Query(q.id, (q.features - lo) / span, q.labels) for q in c)
        return Corpus(qs, c.partition, c.feature_dim)

    return [scale(c) for c in (train, *others)]


def synthetic_dataset(
    n_train: int,
    n_validation: int,
    n_test: int,
    n_docs: int,
    n_features: int,
    seed: int,
    noise: float = 0.5,
    normalize: bool = True,
) -> Dataset:
    parts = [
        generate_synthetic_corpus(
            n, n_docs, n_features, seed * 3 + k, partition=p, model_seed=seed, noise=noise
        )
        for k, (n, p) in enumerate(zip((n_train, n_validation, n_test), PARTITIONS))
    ]
    if normalize:
        parts = minmax_normalize(*parts)
    return Dataset(*parts)


def load_dataset(train: str | Path, validation: str | Path, test: str | Path, normalize: bool = True) -> Dataset:
    parts = [load_corpus(p, part) for p, part in zip((train, validation, test), PARTITIONS)]
    dim = max(c.feature_dim for c in parts)
    parts = [_pad_features(c, dim) for c in parts]
    if normalize:
        parts = minmax_normalize(*parts)
    return Dataset(*parts)


def _pad_features(corpus: Corpus, dim: int) -> Corpus:
    if corpus.feature_dim == dim:
        return corpus
    qs = tuple(
        Query(q.id, np.pad(q.features, ((0, 0), (0, dim - corpus.feature_dim))), q.labels) for q in corpus
    )
    return Corpus(qs, corpus.partition, dim)


def sample_fraction(corpus: Corpus, fraction: float, rng: np.random.Generator) -> Corpus:
    """Uniformly sample ``ceil(fraction * |Q|)`` queries without replacement."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    n = int(np.ceil(fraction * len(corpus))) if len(corpus) else 0
    idx = np.sort(rng.choice(len(corpus), size=n, replace=False)) if n else np.array([], dtype=int)
    return Corpus(tuple(corpus.queries[i] for i in idx), corpus.partition, corpus.feature_dim)
