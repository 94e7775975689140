"""scikit-learn style estimator facade over the incremental training engine."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_array

from .config import RunConfig
from .data import Interaction, SpanDataset, UserSpan, split_holdout
from .evaluation import evaluate_users
from .scoring import rank_items
from .trainer import _grow_for_span, incremental_step, pretrain


class IntentBankRecommender(BaseEstimator):
    """Incremental multi-intent sequential recommender.

    ``fit`` pretrains on an interaction log (user, item, unix-seconds rows);
    each ``partial_fit`` consumes the next time span's interactions and
    updates the per-user intent banks under the configured strategy.
    ``recommend``/``predict`` rank items seen so far.
    """

    def __init__(
        self,
        extractor="dr",
        strategy="ima",
        d=64,
        d_a=16,
        routing_iters=3,
        k0=4,
        delta_k=3,
        theta_nid=-0.04,
        c2=0.3,
        tau=2.0,
        lambda_kd=1e-3,
        k_max=20,
        lr=0.001,
        negatives=10,
        epochs=10,
        patience=3,
        batch_size=128,
        seed=0,
    ):
        self.extractor = extractor
        self.strategy = strategy
        self.d = d
        self.d_a = d_a
        self.routing_iters = routing_iters
        self.k0 = k0
        self.delta_k = delta_k
        self.theta_nid = theta_nid
        self.c2 = c2
        self.tau = tau
        self.lambda_kd = lambda_kd
        self.k_max = k_max
        self.lr = lr
        self.negatives = negatives
        self.epochs = epochs
        self.patience = patience
        self.batch_size = batch_size
        self.seed = seed

    # ------------------------------------------------------------------
    def _config(self) -> RunConfig:
        return RunConfig(
            extractor=self.extractor,
            strategy=self.strategy,
            d=self.d,
            d_a=self.d_a,
            routing_iters=self.routing_iters,
            k0=self.k0,
            delta_k=self.delta_k,
            theta_nid=self.theta_nid,
            c2=self.c2,
            tau=self.tau,
            lambda_kd=self.lambda_kd,
            k_max=self.k_max,
            lr=self.lr,
            negatives=self.negatives,
            epochs=self.epochs,
            patience=self.patience,
            batch_size=self.batch_size,
            seed=self.seed,
        )

    @staticmethod
    def _validate_interactions(x) -> np.ndarray:
        x = check_array(x, dtype="numeric", ensure_2d=True)
        if x.shape[1] != 3:
            raise ValueError("expected (user_id, item_id, timestamp) columns")
        xi = x.astype(np.int64)
        if not np.allclose(x, xi):
            raise ValueError("user/item/timestamp must be integers")
        if (xi < 0).any():
            raise ValueError("user/item/timestamp must be non-negative")
        return xi

    @staticmethod
    def _build_span(x: np.ndarray, span_index: int) -> SpanDataset:
        events = [Interaction(int(u), int(i), int(s)) for u, i, s in x]
        per_user: dict[int, list[Interaction]] = {}
        for e in events:
            per_user.setdefault(e.user_id, []).append(e)
        users = {}
        for uid, evs in per_user.items():
            evs.sort(key=lambda e: e.timestamp)
            users[uid] = UserSpan(
                [e.item_id for e in evs], [e.timestamp for e in evs]
            )
        return split_holdout(SpanDataset(span_index, users))

    # ------------------------------------------------------------------
    def fit(self, X, y=None):
        """Pretrain on the interaction log (treated as the pretraining span)."""
        x = self._validate_interactions(X)
        cfg = self._config()
        span0 = self._build_span(x, 0)
        num_items = int(x[:, 1].max()) + 1
        self.model_, self.banks_, self.opt_ = pretrain(span0, cfg, num_items)
        self.span_ = 0
        self.seen_items_ = set(int(i) for i in x[:, 1])
        self.history_ = [span0]
        return self

    def partial_fit(self, X, y=None):
        """Train on the next time span's interactions."""
        if not hasattr(self, "model_"):
            return self.fit(X)
        x = self._validate_interactions(X)
        cfg = self._config()
        self.span_ += 1
        span = self._build_span(x, self.span_)
        _grow_for_span(self.model_, self.opt_, span, [cfg.seed])
        history = self.history_ if cfg.strategy == "fr" else None
        universe = np.array(sorted(self.seen_items_), dtype=np.int64)
        self.model_, self.banks_, self.opt_, _ = incremental_step(
            self.model_, self.banks_, span, cfg, self.opt_, universe,
            history=history,
        )
        self.seen_items_.update(int(i) for i in x[:, 1])
        self.history_.append(span)
        return self

    # ------------------------------------------------------------------
    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("estimator is not fitted; call fit first")

    def recommend(self, users, n=20, mode="attentive") -> list[list[int]]:
        """Top-n item ids per user, ranked against all items seen so far."""
        self._check_fitted()
        universe = np.array(sorted(self.seen_items_), dtype=np.int64)
        cand = self.model_.embeddings[universe]
        out = []
        for uid in np.asarray(users, dtype=np.int64).ravel():
            bank = self.banks_.get(int(uid))
            if bank is None:
                raise ValueError(f"unknown user {int(uid)}")
            ranked = rank_items(bank.vectors, cand, mode=mode, n=n, ids=universe)
            out.append([item for item, _ in ranked])
        return out

    def predict(self, X) -> np.ndarray:
        """Most likely next item per user id in X."""
        recs = self.recommend(X, n=1)
        return np.array([r[0] for r in recs], dtype=np.int64)

    def score(self, X, y=None) -> float:
        """Mean HR@20 using each user's latest interaction in X as the target."""
        self._check_fitted()
        x = self._validate_interactions(X)
        latest: dict[int, tuple[int, int]] = {}
        for u, i, s in x:
            u, i, s = int(u), int(i), int(s)
            if u not in latest or s >= latest[u][1]:
                latest[u] = (i, s)
        targets = {u: it for u, (it, _) in latest.items()}
        universe = np.array(sorted(self.seen_items_ | set(targets.values())),
                            dtype=np.int64)
        hrs, _, _ = evaluate_users(self.model_, self.banks_, targets, universe, k=20)
        return float(np.mean(hrs)) if hrs else 0.0

    def user_intents(self, user_id: int) -> np.ndarray:
        """The user's current intent matrix (d x K)."""
        self._check_fitted()
        return self.banks_[int(user_id)].vectors.copy()
