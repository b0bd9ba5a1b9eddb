"""Independent reference computations used by the tests."""

import math

import numpy as np


def central_diff(f, x: np.ndarray, idx, h: float = 1e-5) -> float:
    old = x[idx]
    x[idx] = old + h
    fp = f()
    x[idx] = old - h
    fm = f()
    x[idx] = old
    return (fp - fm) / (2 * h)


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def brute_rank_position(scores, gt):
    """1-based rank of ``gt``: count of strictly better scores plus earlier ties."""
    better = sum(1 for j, s in enumerate(scores) if s > scores[gt] or (s == scores[gt] and j < gt))
    return better + 1


def brute_ndcg(scores, relevance):
    n = len(scores)
    order = sorted(range(n), key=lambda j: (-scores[j], j))
    K = sum(1 for r in relevance if r > 0)
    dcg = sum(relevance[order[i]] / math.log2(i + 2) for i in range(K))
    ideal = sorted(relevance, reverse=True)
    idcg = sum(ideal[i] / math.log2(i + 2) for i in range(K))
    return dcg / idcg


def scalar_adam(w, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return w
