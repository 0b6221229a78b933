"""Similarity evaluations: MSCM, clustering pairs and relatedness correlation."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Sequence

import numpy as np
from scipy.stats import spearmanr


def _discounts(k: int) -> np.ndarray:
    """Rank discounts 1/log2(i + 1) for ranks i = 1..k."""
    return 1.0 / np.log2(np.arange(2, k + 2))


def mscm_upper_bound(k: int) -> float:
    return float(_discounts(k).sum())


def _unit_rows(X):
    X = np.asarray(X, dtype=np.float64)
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def neighbor_lists(embeddings: np.ndarray, k: int) -> np.ndarray:
    """Top-``k`` cosine neighbours of every row, self excluded, ties to lower index."""
    U = _unit_rows(embeddings)
    sims = U @ U.T
    n = len(U)
    out = np.empty((n, min(k, n - 1)), dtype=np.int64)
    rows = np.arange(n)
    for i in range(n):
        keep = rows != i
        order = np.lexsort((rows[keep], -sims[i, keep]))
        out[i] = rows[keep][order][: out.shape[1]]
    return out


@dataclass
class TypedConceptSet:
    concepts: list[str]
    types: list[str]
    embeddings: np.ndarray

    def __post_init__(self):
        if not len(self.concepts) == len(self.types) == len(self.embeddings):
            raise ValueError("every concept needs exactly one type and one embedding")


def mscm(concept_set: TypedConceptSet, semantic_type: str, k: int = 40, neighbors: np.ndarray | None = None):
    """Rank-discounted share of same-type neighbours among concepts of one type.

    Returns ``None`` when no concept has ``semantic_type``.
    """
    if len(concept_set.concepts) < k + 1:
        raise ValueError(f"need at least {k + 1} concepts for k={k}")
    members = [i for i, t in enumerate(concept_set.types) if t == semantic_type]
    if not members:
        return None
    if neighbors is None:
        neighbors = neighbor_lists(concept_set.embeddings, k)
    discount = _discounts(k)
    types = np.asarray(concept_set.types, dtype=object)
    total = 0.0
    for v in members:
        hit = types[neighbors[v, :k]] == semantic_type
        total += float(discount[hit].sum())
    return total / len(members)


def mscm_report(concept_set: TypedConceptSet, k: int = 40) -> dict[str, float]:
    """Per-type scores plus their unweighted mean under ``"average"``."""
    neighbors = neighbor_lists(concept_set.embeddings, k)
    out = {}
    for t in sorted(set(concept_set.types)):
        out[t] = mscm(concept_set, t, k, neighbors)
    out["average"] = float(np.mean(list(out.values())))
    return out


@dataclass
class ClusteringReport:
    theta: float
    accuracy: float
    f1: float
    precision: float
    recall: float


def default_theta_grid():
    return np.round(np.arange(0.50, 0.995, 0.01), 2)


def pair_metrics(sims: np.ndarray, gold: np.ndarray, theta: float) -> ClusteringReport:
    """Metrics over upper-triangle pairs for one threshold."""
    pred = sims > theta
    tp = int(np.sum(pred & gold))
    fp = int(np.sum(pred & ~gold))
    fn = int(np.sum(~pred & gold))
    tn = int(np.sum(~pred & ~gold))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return ClusteringReport(float(theta), (tp + tn) / len(gold), f1, precision, recall)


def clustering_pair_eval(embeddings: np.ndarray, terms: Sequence[str], gold_pairs, thetas=None) -> ClusteringReport:
    """Synonym detection by cosine threshold; the F1-best threshold (smallest on ties) wins."""
    if len(terms) < 2:
        raise ValueError("need at least two terms")
    if not gold_pairs:
        raise ValueError("empty gold pair set")
    pos = {t: i for i, t in enumerate(terms)}
    gold_idx = set()
    for a, b in gold_pairs:
        i, j = pos[a], pos[b]
        gold_idx.add((min(i, j), max(i, j)))
    U = _unit_rows(embeddings)
    iu, ju = np.triu_indices(len(terms), k=1)
    sims = np.einsum("ij,ij->i", U[iu], U[ju])
    gold = np.array([(i, j) in gold_idx for i, j in zip(iu, ju)], dtype=bool)
    best = None
    for theta in (default_theta_grid() if thetas is None else thetas):
        rep = pair_metrics(sims, gold, theta)
        if best is None or rep.f1 > best.f1 or (rep.f1 == best.f1 and rep.theta < best.theta):
            best = rep
    return best


def synonym_pairs(concept_terms: dict[str, list[str]]):
    return [(a, b) for terms in concept_terms.values() for a, b in combinations(terms, 2)]


@dataclass
class RelatednessDataset:
    pairs: list[tuple[str, str, float]]
    low: float = 0.0
    high: float = 4.0

    def __post_init__(self):
        seen = set()
        for a, b, s in self.pairs:
            key = frozenset((a, b))
            if key in seen:
                raise ValueError(f"duplicate pair {a!r}/{b!r}")
            seen.add(key)
            if not self.low <= s <= self.high:
                raise ValueError(f"score {s} outside [{self.low}, {self.high}]")

    @classmethod
    def load(cls, path, low=None, high=None) -> "RelatednessDataset":
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                parts = line.rstrip("\n").split("\t")
                if len(parts) >= 3:
                    pairs.append((parts[0].lower(), parts[1].lower(), float(parts[2])))
        scores = [s for _, _, s in pairs]
        return cls(pairs, min(scores) if low is None else low, max(scores) if high is None else high)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for a, b, s in self.pairs:
                fh.write(f"{a}\t{b}\t{s}\n")


def spearman_relatedness(model: Callable[[str], np.ndarray], dataset: RelatednessDataset) -> float:
    """Spearman correlation between cosine similarities and gold scores.

    ``model`` maps a term to its vector.
    """
    if len(dataset.pairs) < 2:
        raise ValueError("need at least two pairs")
    cache = {}

    def vec(term):
        if term not in cache:
            v = np.asarray(model(term), dtype=np.float64)
            cache[term] = v / np.linalg.norm(v)
        return cache[term]

    sims = [float(vec(a) @ vec(b)) for a, b, _ in dataset.pairs]
    gold = [s for _, _, s in dataset.pairs]
    return float(spearmanr(sims, gold).statistic)
