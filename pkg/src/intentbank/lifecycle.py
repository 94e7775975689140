"""Intent-vector lifecycle: retention, detection, trimming, removal, compression."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

P_CLIP = 1e-7


@dataclass
class LifecycleConfig:
    tau: float = 2.0
    lambda_kd: float = 1e-3
    theta_nid: float = -0.04
    delta_k: int = 3
    c2: float = 0.3
    k_max: int = 20
    k0: int = 4

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.lambda_kd < 0:
            raise ValueError("lambda_kd must be >= 0")
        if self.delta_k < 1 or self.k_max < 1 or self.k0 < 1:
            raise ValueError("delta_k, k_max and k0 must be >= 1")
        if self.c2 <= 0:
            raise ValueError("c2 must be > 0")


@dataclass
class IntentBank:
    """A user's variable-size set of intent vectors plus per-intent metadata.

    ``vectors`` holds intents as columns (d x K). ``prev_vectors`` is the
    snapshot taken at the end of the previous span and acts as the frozen
    distillation teacher.
    """

    user_id: int
    vectors: np.ndarray
    creation_span: np.ndarray
    as_accum: np.ndarray
    as_count: np.ndarray
    prev_vectors: np.ndarray

    @classmethod
    def fresh(cls, user_id: int, d: int, k: int, span: int, rng: np.random.Generator,
              dtype=np.float32) -> "IntentBank":
        vecs = (rng.normal(size=(d, k)) / math.sqrt(d)).astype(dtype)
        return cls(
            user_id=user_id,
            vectors=vecs,
            creation_span=np.full(k, span, dtype=np.int64),
            as_accum=np.zeros(k, dtype=np.float64),
            as_count=np.zeros(k, dtype=np.float64),
            prev_vectors=np.zeros((d, 0), dtype=dtype),
        )

    @property
    def k(self) -> int:
        return self.vectors.shape[1]

    @property
    def d(self) -> int:
        return self.vectors.shape[0]

    def active_scores(self) -> np.ndarray:
        return self.as_accum / np.maximum(self.as_count, 1.0)

    def snapshot(self) -> None:
        """Store the current vectors as next span's distillation teacher."""
        self.prev_vectors = self.vectors.copy()

    def check_consistent(self) -> None:
        k = self.k
        assert self.creation_span.shape == (k,)
        assert self.as_accum.shape == (k,)
        assert self.as_count.shape == (k,)


@dataclass
class SaSync:
    """Keeps a user's attention matrix (and its optimizer slots) in lockstep
    with bank edits.

    ``wu_store`` maps user id to the (d_a, K) matrix; ``moment_stores`` holds
    (dict, key) pairs for optimizer moment tensors of the same shape.
    """

    wu_store: dict
    uid: int
    moment_stores: list[tuple[dict, str]] = field(default_factory=list)

    @property
    def wu(self) -> np.ndarray:
        return self.wu_store[self.uid]

    def append(self, cols: np.ndarray) -> None:
        self.wu_store[self.uid] = np.concatenate([self.wu, cols], axis=1)
        zeros = np.zeros_like(cols)
        for store, key in self.moment_stores:
            store[key] = np.concatenate([store[key], zeros], axis=1)

    def delete(self, idx) -> None:
        self.wu_store[self.uid] = np.delete(self.wu, idx, axis=1)
        for store, key in self.moment_stores:
            store[key] = np.delete(store[key], idx, axis=1)

    def merge(self, clusters: list[list[int]]) -> None:
        self.wu_store[self.uid] = np.stack(
            [self.wu[:, c].mean(axis=1) for c in clusters], axis=1
        )
        for store, key in self.moment_stores:
            store[key] = np.stack(
                [store[key][:, c].mean(axis=1) for c in clusters], axis=1
            )


def kd_loss(h_new: np.ndarray, h_prev: np.ndarray, e_a: np.ndarray, tau: float) -> float:
    """Distillation loss tying each surviving intent's logit to its teacher.

    Per intent: p = sigmoid(h_k_new . e_a / tau), q = sigmoid(h_k_prev . e_a / tau);
    the summand is the cross-entropy -[q ln p + (1-q) ln(1-p)] with q as target.
    """
    if h_new.shape != h_prev.shape:
        raise ValueError("student and teacher must cover the same K_old intents")
    zs = (e_a @ h_new) / tau
    zt = (e_a @ h_prev) / tau
    p = np.clip(_sigmoid(zs), P_CLIP, 1.0 - P_CLIP)
    q = _sigmoid(zt)
    return float(-np.sum(q * np.log(p) + (1.0 - q) * np.log(1.0 - p)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def intent_posterior(e_i: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Probability of an item being classified to each intent (softmax of dots)."""
    if h.shape[1] < 1:
        raise ValueError("need K >= 1")
    x = e_i @ h
    x = x - np.max(x)
    p = np.exp(x)
    return p / p.sum()


def puzzlement(e_i: np.ndarray, h: np.ndarray) -> float:
    """How uniformly an item's affinity spreads over intents; <= 0, 0 = uniform.

    Equals -KL(uniform || posterior): mean(x) - logsumexp(x) + ln K for
    x_k = e_i . h_k.
    """
    x = e_i @ h
    k = x.shape[0]
    m = np.max(x)
    lse = m + np.log(np.sum(np.exp(x - m)))
    return float(np.mean(x) - lse + np.log(k))


def mean_puzzlement(items: np.ndarray, h: np.ndarray) -> float:
    """Average puzzlement of a sequence of item embeddings (rows) vs one bank."""
    x = items @ h  # (n, K)
    k = x.shape[1]
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    p = x.mean(axis=1) - lse + np.log(k)
    return float(p.mean())


def nid_gate(items: np.ndarray, h: np.ndarray, theta_nid: float) -> bool:
    """True when the items' mean puzzlement exceeds the threshold.

    A threshold of -inf switches the detector off (never fires).
    """
    if items.shape[0] < 1:
        raise ValueError("need at least one item")
    if math.isinf(theta_nid):
        return False
    return mean_puzzlement(items, h) > theta_nid


def expand_intents(
    bank: IntentBank,
    delta_k: int,
    span: int,
    rng: np.random.Generator,
    sa: SaSync | None = None,
    d_a: int | None = None,
) -> IntentBank:
    """Append delta_k random N(0, I/d) intent columns created at ``span``."""
    d = bank.d
    cols = (rng.normal(size=(d, delta_k)) / math.sqrt(d)).astype(bank.vectors.dtype)
    bank.vectors = np.concatenate([bank.vectors, cols], axis=1)
    bank.creation_span = np.concatenate(
        [bank.creation_span, np.full(delta_k, span, dtype=np.int64)]
    )
    bank.as_accum = np.concatenate([bank.as_accum, np.zeros(delta_k)])
    bank.as_count = np.concatenate([bank.as_count, np.zeros(delta_k)])
    if sa is not None:
        if d_a is None:
            d_a = sa.wu.shape[0]
        wu_cols = (rng.normal(size=(d_a, delta_k)) / math.sqrt(d_a)).astype(sa.wu.dtype)
        sa.append(wu_cols)
    return bank


def project_residual(h_new: np.ndarray, m_exist: np.ndarray) -> np.ndarray:
    """Component of ``h_new`` orthogonal to the span of the existing intents.

    Parameters
    ----------
    h_new : (d,) candidate intent vector.
    m_exist : (d, K_old) existing intent columns, K_old < d.

    The projector is built from a rank-revealing SVD; singular directions
    below 1e-8 times the largest column norm are ignored.
    """
    if m_exist.ndim != 2 or m_exist.shape[1] < 1:
        raise ValueError("need at least one existing intent")
    d, k_old = m_exist.shape
    if k_old >= d:
        raise ValueError(
            f"existing intents span the full space (K_old={k_old} >= d={d}); "
            "the residual would be identically zero"
        )
    col_norms = np.linalg.norm(m_exist, axis=0)
    tol = 1e-8 * float(col_norms.max())
    u, s, _ = np.linalg.svd(m_exist, full_matrices=False)
    q = u[:, s > tol]
    if q.shape[1] == 0:
        return h_new.copy()
    return h_new - q @ (q.T @ h_new)


def trim_new_intents(
    bank: IntentBank,
    new_indices: list[int],
    c2: float,
    sa: SaSync | None = None,
) -> IntentBank:
    """Replace this span's new intents by their residuals; drop trivial ones.

    Each new intent is projected against the pre-expansion intents; residuals
    with L2 norm < c2 are deleted (strict), the rest replace the originals.
    """
    if not new_indices:
        return bank
    new_set = set(new_indices)
    exist_idx = [j for j in range(bank.k) if j not in new_set]
    if not exist_idx:
        return bank
    m_exist = bank.vectors[:, exist_idx].astype(np.float64)
    drop = []
    for j in sorted(new_indices):
        r = project_residual(bank.vectors[:, j].astype(np.float64), m_exist)
        if np.linalg.norm(r) < c2:
            drop.append(j)
        else:
            bank.vectors[:, j] = r.astype(bank.vectors.dtype)
    if drop:
        bank.vectors = np.delete(bank.vectors, drop, axis=1)
        bank.creation_span = np.delete(bank.creation_span, drop)
        bank.as_accum = np.delete(bank.as_accum, drop)
        bank.as_count = np.delete(bank.as_count, drop)
        if sa is not None:
            sa.delete(drop)
    return bank


def update_active_scores(
    bank: IntentBank, items: np.ndarray, span: int
) -> IntentBank:
    """Accumulate each intent's mean posterior mass over this span's items."""
    if items.shape[0] == 0:
        return bank
    x = items @ bank.vectors  # (n, K)
    x = x - x.max(axis=1, keepdims=True)
    p = np.exp(x)
    p /= p.sum(axis=1, keepdims=True)
    bank.as_accum = bank.as_accum + p.mean(axis=0)
    bank.as_count = bank.as_count + 1.0
    return bank


def remove_inactive(
    bank: IntentBank, k_max: int, sa: SaSync | None = None
) -> IntentBank:
    """Delete the lowest-active-score intents until the bank fits k_max.

    Ties go to the older creation span first, then the lower index.
    """
    if bank.k <= k_max:
        return bank
    scores = bank.active_scores()
    order = sorted(
        range(bank.k), key=lambda j: (scores[j], bank.creation_span[j], j)
    )
    drop = sorted(order[: bank.k - k_max])
    bank.vectors = np.delete(bank.vectors, drop, axis=1)
    bank.creation_span = np.delete(bank.creation_span, drop)
    bank.as_accum = np.delete(bank.as_accum, drop)
    bank.as_count = np.delete(bank.as_count, drop)
    if sa is not None:
        sa.delete(drop)
    return bank


EPS_LADDER = [2.0 ** -i for i in range(10, -1, -1)]  # ascending: 2^-10 .. 1.0


def epsilon_clusters(vectors: np.ndarray, eps: float) -> list[list[int]]:
    """Connected components under strict-< epsilon Euclidean linkage.

    Flood-fill expansion in index order: every vector reachable through hops
    shorter than eps joins the seed's cluster. Columns of ``vectors`` are the
    points.
    """
    k = vectors.shape[1]
    diff = vectors[:, :, None] - vectors[:, None, :]
    dist = np.sqrt(np.sum(diff * diff, axis=0))
    visited = np.zeros(k, dtype=bool)
    clusters: list[list[int]] = []
    for seed in range(k):
        if visited[seed]:
            continue
        visited[seed] = True
        members = [seed]
        frontier = [seed]
        while frontier:
            cur = frontier.pop()
            reach = np.flatnonzero((dist[cur] < eps) & ~visited)
            for j in reach:
                visited[j] = True
                members.append(int(j))
                frontier.append(int(j))
        clusters.append(sorted(members))
    return clusters


def compress_similar(
    bank: IntentBank, k_max: int, sa: SaSync | None = None
) -> IntentBank:
    """Merge epsilon-connected intents into centroids until the bank fits k_max.

    Scans the halving ladder for the smallest epsilon whose cluster count is
    <= k_max (least merging); falls back to remove_inactive when even the
    largest epsilon cannot reach the cap.
    """
    if bank.k <= k_max:
        return bank
    chosen = None
    for eps in EPS_LADDER:
        clusters = epsilon_clusters(bank.vectors, eps)
        if len(clusters) <= k_max:
            chosen = (eps, clusters)
            break
    if chosen is None:
        log.warning(
            "user %d: no epsilon in the ladder reaches k_max=%d (K=%d); "
            "falling back to inactive-intent removal",
            bank.user_id, k_max, bank.k,
        )
        return remove_inactive(bank, k_max, sa=sa)
    _, clusters = chosen
    bank.vectors = np.stack(
        [bank.vectors[:, c].mean(axis=1) for c in clusters], axis=1
    )
    bank.creation_span = np.array(
        [bank.creation_span[c].min() for c in clusters], dtype=np.int64
    )
    bank.as_accum = np.array([bank.as_accum[c].mean() for c in clusters])
    bank.as_count = np.array([bank.as_count[c].mean() for c in clusters])
    if sa is not None:
        sa.merge(clusters)
    return bank
