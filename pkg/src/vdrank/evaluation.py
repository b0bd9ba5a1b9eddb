"""Candidate ranking and retrieval metrics (Mean rank, R@k, MRR, NDCG)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class UndefinedMetric(ValueError):
    """NDCG has no meaning without at least one relevant candidate."""


@dataclass
class CandidateSet:
    candidates: list[str]
    gt_index: int
    dense_relevance: list[float] | None = None

    def __post_init__(self):
        n = len(self.candidates)
        if not 0 <= self.gt_index < n:
            raise ValueError(f"gt_index {self.gt_index} outside [0, {n})")
        if self.dense_relevance is not None and len(self.dense_relevance) != n:
            raise ValueError(f"{len(self.dense_relevance)} relevance values for {n} candidates")

    def relevance(self) -> np.ndarray:
        """Dense relevance, or a one-hot on the human answer when none is given."""
        if self.dense_relevance is not None:
            return np.asarray(self.dense_relevance, dtype=np.float64)
        rel = np.zeros(len(self.candidates))
        rel[self.gt_index] = 1.0
        return rel


@dataclass
class RankingResult:
    scores: list[float]
    order: list[int]

    def rank_of(self, index: int) -> int:
        return self.order.index(index) + 1


@dataclass
class MetricReport:
    ndcg: float
    mrr: float
    r_at_1: float
    r_at_5: float
    r_at_10: float
    mean_rank: float
    num_examples: int
    ndcg_examples: int = 0

    def as_dict(self) -> dict:
        return {
            "ndcg": self.ndcg,
            "mrr": self.mrr,
            "r@1": self.r_at_1,
            "r@5": self.r_at_5,
            "r@10": self.r_at_10,
            "mean": self.mean_rank,
            "n": self.num_examples,
        }

    def format(self) -> str:
        return (
            f"NDCG {100 * self.ndcg:.2f}  MRR {100 * self.mrr:.2f}  R@1 {100 * self.r_at_1:.2f}  "
            f"R@5 {100 * self.r_at_5:.2f}  R@10 {100 * self.r_at_10:.2f}  Mean {self.mean_rank:.2f}  "
            f"(n={self.num_examples})"
        )


def rank(scores: Sequence[float]) -> RankingResult:
    """Descending by score; equal scores keep ascending candidate index."""
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    order = np.argsort(-s, kind="stable")
    return RankingResult(list(map(float, s)), [int(i) for i in order])


def mrr_of(result: RankingResult, gt_index: int) -> float:
    return 1.0 / result.rank_of(gt_index)


def r_at_k(result: RankingResult, gt_index: int, k: int) -> int:
    return int(result.rank_of(gt_index) <= k)


def mean_rank_of(result: RankingResult, gt_index: int) -> int:
    return result.rank_of(gt_index)


def ndcg_of(result: RankingResult, dense_relevance: Sequence[float]) -> float:
    """NDCG truncated at K, the number of candidates with positive relevance."""
    rel = np.asarray(dense_relevance, dtype=np.float64)
    K = int((rel > 0).sum())
    if K == 0:
        raise UndefinedMetric("no candidate has positive relevance")
    discount = 1.0 / np.log2(np.arange(2, K + 2))
    dcg = float((rel[np.asarray(result.order[:K])] * discount).sum())
    idcg = float((np.sort(rel)[::-1][:K] * discount).sum())
    return dcg / idcg


def aggregate(rankings: Iterable[tuple[RankingResult, CandidateSet]]) -> MetricReport:
    """Average per-example metrics; NDCG only over examples where it is defined."""
    ranks, ndcgs = [], []
    for result, cset in rankings:
        ranks.append(result.rank_of(cset.gt_index))
        try:
            ndcgs.append(ndcg_of(result, cset.relevance()))
        except UndefinedMetric:
            pass
    if not ranks:
        raise ValueError("cannot evaluate an empty dataset")
    r = np.asarray(ranks, dtype=np.float64)
    return MetricReport(
        ndcg=float(np.mean(ndcgs)) if ndcgs else math.nan,
        mrr=float(np.mean(1.0 / r)),
        r_at_1=float(np.mean(r <= 1)),
        r_at_5=float(np.mean(r <= 5)),
        r_at_10=float(np.mean(r <= 10)),
        mean_rank=float(np.mean(r)),
        num_examples=len(ranks),
        ndcg_examples=len(ndcgs),
    )


Scorer = Callable[[object, CandidateSet], Sequence[float]]


def evaluate_split(scorer: Scorer, dataset: Sequence[tuple[object, CandidateSet]]) -> MetricReport:
    """Score, rank and aggregate. ``dataset`` pairs a context with its candidates."""
    if not dataset:
        raise ValueError("cannot evaluate an empty dataset")
    return aggregate((rank(scorer(ctx, cset)), cset) for ctx, cset in dataset)
