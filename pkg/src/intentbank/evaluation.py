"""Top-K retrieval metrics and span-level reporting."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import DataError, SpanDataset
from .lifecycle import IntentBank
from .model import ModelParams
from .scoring import candidate_scores


@dataclass
class SpanReport:
    span: int
    strategy: str
    hr20: float | None
    ndcg20: float | None
    users: int
    mean_k: float
    max_k: int
    seconds: float


def hr_ndcg_at_k(ranked, target: int, k: int = 20) -> tuple[int, float]:
    """Hit ratio and NDCG for a single relevant item against a full ranking.

    ``ranked`` is the ordered candidate list (item ids, or (id, score) pairs).
    Ranks are 1-based; ndcg = 1/log2(rank+1) inside the cutoff, else 0.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rank = None
    for pos, entry in enumerate(ranked):
        item = entry[0] if isinstance(entry, tuple) else entry
        if item == target:
            rank = pos + 1
            break
    if rank is None:
        raise DataError(f"target {target} not in the ranked candidate universe")
    if rank > k:
        return 0, 0.0
    return 1, 1.0 / math.log2(rank + 1.0)


def _target_rank(scores: np.ndarray, ids: np.ndarray, target_pos: int) -> int:
    """1-based rank under descending score, ties broken by ascending item id."""
    st = scores[target_pos]
    tid = ids[target_pos]
    better = np.count_nonzero(scores > st)
    tied = np.count_nonzero((scores == st) & (ids < tid))
    return 1 + better + tied


def evaluate_users(
    model: ModelParams,
    banks: dict[int, IntentBank],
    targets: dict[int, int],
    universe: np.ndarray,
    k: int = 20,
    mode: str = "attentive",
) -> tuple[list[float], list[float], int]:
    """Per-user HR/NDCG of each user's target ranked against the universe.

    Users without a bank or whose target is outside the universe are skipped
    and counted. Returns (hrs, ndcgs, excluded).
    """
    universe = np.asarray(universe)
    pos = {int(item): j for j, item in enumerate(universe)}
    cand = model.embeddings[universe]
    hrs: list[float] = []
    ndcgs: list[float] = []
    excluded = 0
    for uid in sorted(targets):
        target = targets[uid]
        bank = banks.get(uid)
        if bank is None or bank.k == 0 or target not in pos:
            excluded += 1
            continue
        scores = candidate_scores(bank.vectors, cand, mode)
        rank = _target_rank(scores, universe, pos[target])
        if rank <= k:
            hrs.append(1.0)
            ndcgs.append(1.0 / math.log2(rank + 1.0))
        else:
            hrs.append(0.0)
            ndcgs.append(0.0)
    return hrs, ndcgs, excluded


def evaluate_span(
    model: ModelParams,
    banks: dict[int, IntentBank],
    test_split: SpanDataset,
    universe: np.ndarray,
    k: int = 20,
    mode: str = "attentive",
    strategy: str = "",
    seconds: float = 0.0,
) -> SpanReport:
    """HR@k / NDCG@k of every evaluable user's test target in ``test_split``."""
    targets = {
        uid: us.test for uid, us in test_split.users.items() if us.test is not None
    }
    hrs, ndcgs, _ = evaluate_users(model, banks, targets, universe, k=k, mode=mode)
    n = len(hrs)
    sizes = [b.k for b in banks.values()]
    return SpanReport(
        span=test_split.span_index,
        strategy=strategy,
        hr20=float(np.mean(hrs)) if n else None,
        ndcg20=float(np.mean(ndcgs)) if n else None,
        users=n,
        mean_k=float(np.mean(sizes)) if sizes else 0.0,
        max_k=int(np.max(sizes)) if sizes else 0,
        seconds=seconds,
    )
