"""Target-aware intent aggregation, preference scoring, and ranking."""
from __future__ import annotations

import numpy as np

SCORE_MODES = ("attentive", "max")


def aggregate(h: np.ndarray, e_a: np.ndarray) -> np.ndarray:
    """Collapse a d x K intent matrix into one vector, weighted by the target.

    Weights are softmax over k of e_a . h_k; the result is a convex
    combination of intent columns.
    """
    if h.ndim != 2 or h.shape[1] < 1:
        raise ValueError("H must be d x K with K >= 1")
    s = e_a @ h
    s = s - np.max(s)
    beta = np.exp(s)
    beta /= beta.sum()
    return h @ beta


def score(v_u: np.ndarray, e_i: np.ndarray) -> float:
    """Preference score: inner product of user vector and item embedding."""
    return float(np.dot(v_u, e_i))


def sampled_softmax_loss(
    h: np.ndarray, e_a: np.ndarray, negatives: np.ndarray
) -> float:
    """Negative log-probability of the target against sampled negatives.

    The target is included in the denominator (standard sampled softmax); the
    log-sum-exp is max-shifted to avoid overflow.
    """
    negatives = np.atleast_2d(negatives)
    if negatives.shape[0] < 1:
        raise ValueError("need at least one negative")
    v = aggregate(h, e_a)
    logits = np.concatenate(([np.dot(v, e_a)], negatives @ v))
    m = np.max(logits)
    lse = m + np.log(np.sum(np.exp(logits - m)))
    return float(lse - logits[0])


def _rank_from_scores(scores: np.ndarray, ids: np.ndarray, n: int):
    """Descending-score order, ties broken by ascending item id; top n."""
    order = np.lexsort((ids, -scores))
    top = order[:n]
    return [(int(ids[j]), float(scores[j])) for j in top]


def candidate_scores(h: np.ndarray, candidates: np.ndarray, mode: str) -> np.ndarray:
    """Scores of every candidate under the given mode.

    attentive: aggregate(H, e_i) . e_i per candidate; max: max_k h_k . e_i.
    """
    if mode not in SCORE_MODES:
        raise ValueError(f"mode must be one of {SCORE_MODES}")
    dots = candidates @ h  # (N, K)
    if mode == "max":
        return dots.max(axis=1)
    s = dots - dots.max(axis=1, keepdims=True)
    beta = np.exp(s)
    beta /= beta.sum(axis=1, keepdims=True)
    return np.sum(beta * dots, axis=1)


def rank_items(
    h: np.ndarray,
    candidates: np.ndarray,
    mode: str = "attentive",
    n: int = 20,
    ids: np.ndarray | None = None,
):
    """Top-n candidates by score; returns a list of (item_id, score).

    ``candidates`` is (N, d); ``ids`` defaults to 0..N-1.
    """
    if n > candidates.shape[0]:
        raise ValueError("n exceeds candidate count")
    if ids is None:
        ids = np.arange(candidates.shape[0])
    scores = candidate_scores(h, candidates, mode)
    return _rank_from_scores(scores, np.asarray(ids), n)
