"""Interaction logs, time-span splitting, holdout marks, and synthetic drift data."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError


@dataclass(frozen=True)
class Interaction:
    """One (user, item, timestamp) event."""

    user_id: int
    item_id: int
    timestamp: int


@dataclass
class UserSpan:
    """One user's interactions inside a single span, with holdout marks."""

    items: list[int]
    timestamps: list[int]
    train: list[int] = field(default_factory=list)
    valid: int | None = None
    test: int | None = None


@dataclass
class SpanDataset:
    span_index: int
    users: dict[int, UserSpan]

    def num_interactions(self) -> int:
        return sum(len(u.items) for u in self.users.values())


class DataError(ValueError):
    """Raised when an input log cannot be used."""


def ingest_log(path: str) -> list[Interaction]:
    """Read a `user_id,item_id,timestamp` CSV (with header) into interactions.

    Malformed lines are counted and skipped; more than 1% malformed lines is
    treated as a wrong-file error.
    """
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    records: list[Interaction] = []
    malformed = 0
    total = 0
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path} is empty (expected a header line)")
        if not header or "user" not in header[0].lower():
            raise DataError(f"{path} does not look like an interaction log (header={header!r})")
        for row in reader:
            if not row:
                continue
            total += 1
            try:
                u, i, s = (int(x) for x in row[:3])
                if len(row) != 3 or u < 0 or i < 0 or s < 0:
                    raise ValueError
            except ValueError:
                malformed += 1
                continue
            records.append(Interaction(u, i, s))
    if total and malformed / total > 0.01:
        raise DataError(
            f"{path}: {malformed}/{total} malformed lines (>1%), refusing to parse"
        )
    if malformed:
        import logging

        logging.getLogger(__name__).warning(
            "%s: skipped %d malformed of %d lines", path, malformed, total
        )
    return records


def filter_min_interactions(
    interactions: list[Interaction], min_count: int
) -> list[Interaction]:
    """Keep only interactions of users with at least ``min_count`` events."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: dict[int, int] = {}
    for it in interactions:
        counts[it.user_id] = counts.get(it.user_id, 0) + 1
    return [it for it in interactions if counts[it.user_id] >= min_count]


def split_spans(
    interactions: list[Interaction], t_spans: int, alpha: float
) -> list[SpanDataset]:
    """Partition interactions into T+1 spans over the timeline [0, Z].

    Span 0 covers [0, alpha*Z]; spans 1..T equally partition (alpha*Z, Z].
    Boundary timestamps belong to the earlier span.
    """
    if t_spans < 1:
        raise ValueError("T must be >= 1")
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    if not interactions:
        raise DataError("no interactions to split")
    z = max(it.timestamp for it in interactions)
    z_min = min(it.timestamp for it in interactions)
    if z == z_min:
        raise DataError("all timestamps are equal; cannot form spans")
    a = alpha * z
    w = (z - a) / t_spans
    buckets: list[list[Interaction]] = [[] for _ in range(t_spans + 1)]
    for it in interactions:
        if it.timestamp <= a:
            idx = 0
        else:
            idx = int(np.ceil((it.timestamp - a) / w))
            idx = min(max(idx, 1), t_spans)
        buckets[idx].append(it)
    spans = []
    for idx, bucket in enumerate(buckets):
        per_user: dict[int, list[Interaction]] = {}
        for it in bucket:
            per_user.setdefault(it.user_id, []).append(it)
        users: dict[int, UserSpan] = {}
        for uid, events in per_user.items():
            # stable sort by timestamp keeps input order for ties
            events.sort(key=lambda e: e.timestamp)
            users[uid] = UserSpan(
                [e.item_id for e in events], [e.timestamp for e in events]
            )
        spans.append(SpanDataset(idx, users))
    return spans


def split_holdout(span: SpanDataset) -> SpanDataset:
    """Mark per-user train/valid/test targets inside a span.

    Users with >=3 events: last = test, second-last = valid, rest = train.
    Two events: last = test, first = train. One event: train only.
    """
    for uspan in span.users.values():
        n = len(uspan.items)
        if n >= 3:
            uspan.train = uspan.items[: n - 2]
            uspan.valid = uspan.items[n - 2]
            uspan.test = uspan.items[n - 1]
        elif n == 2:
            uspan.train = uspan.items[:1]
            uspan.valid = None
            uspan.test = uspan.items[1]
        else:
            uspan.train = list(uspan.items)
            uspan.valid = None
            uspan.test = None
    return span


def sample_negatives(
    target: int, universe_size: int, n: int, rng: np.random.Generator
) -> set[int]:
    """Draw ``n`` distinct item ids uniformly from [0, universe_size) \\ {target}."""
    if n >= universe_size:
        raise ConfigError(
            f"cannot draw {n} negatives from a universe of {universe_size} items"
        )
    if n == 0:
        return set()
    # uniform keys over the universe minus the target; smallest-n keys are a
    # uniform without-replacement sample
    keys = rng.random(universe_size - 1)
    if n == universe_size - 1:
        picked = np.arange(universe_size - 1)
    else:
        picked = np.argpartition(keys, n)[:n]
    picked = np.where(picked >= target, picked + 1, picked)
    return set(int(x) for x in picked)


def sample_negatives_batch(
    targets: np.ndarray, universe_size: int, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Vectorized sample_negatives for a batch of targets; returns (B, n) ids."""
    b = targets.shape[0]
    if n == 0:
        return np.zeros((b, 0), dtype=np.int64)
    if n >= universe_size:
        raise ConfigError(
            f"cannot draw {n} negatives from a universe of {universe_size} items"
        )
    keys = rng.random((b, universe_size - 1))
    if n == universe_size - 1:
        picked = np.tile(np.arange(universe_size - 1), (b, 1))
    else:
        picked = np.argpartition(keys, n, axis=1)[:, :n]
    return np.where(picked >= targets[:, None], picked + 1, picked)


# ---------------------------------------------------------------------------
# synthetic drifting-intent data


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic drifting-intent generator.

    ``spans`` counts incremental spans; one extra pretraining block (span 0)
    is always emitted, so the log holds (spans+1) blocks.
    """

    num_users: int = 200
    num_items: int = 500
    num_categories: int = 5
    spans: int = 6
    interactions_per_user_per_span: int = 40
    p_new_category: float = 0.3
    p_drop_category: float = 0.2
    seed: int = 7

    def __post_init__(self):
        for name in ("num_users", "num_items", "num_categories", "spans",
                     "interactions_per_user_per_span"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("p_new_category", "p_drop_category"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")


@dataclass
class DriftGroundTruth:
    """Planted activations/deactivations per (user, span) plus item categories."""

    events: dict[int, dict[int, dict[str, list[int]]]]
    item_category: list[int]

    def activated(self, user: int, span: int) -> set[int]:
        return set(self.events.get(user, {}).get(span, {}).get("activated", []))

    def deactivated(self, user: int, span: int) -> set[int]:
        return set(self.events.get(user, {}).get(span, {}).get("deactivated", []))

    def active_after(self, user: int, span: int) -> set[int]:
        """Categories active at the end of ``span`` (span -1 = before span 0)."""
        active: set[int] = set()
        for t in range(span + 1):
            active |= self.activated(user, t)
            active -= self.deactivated(user, t)
        return active

    def to_json(self) -> dict:
        return {
            "user": {
                str(u): {
                    str(t): ev for t, ev in sorted(spans.items())
                }
                for u, spans in sorted(self.events.items())
            },
            "item_category": self.item_category,
        }

    @classmethod
    def from_json(cls, raw: dict) -> "DriftGroundTruth":
        events = {
            int(u): {int(t): ev for t, ev in spans.items()}
            for u, spans in raw["user"].items()
        }
        return cls(events, list(raw["item_category"]))


# Share of a span's draws routed to a category activated in that same span.
NOVELTY_BURST = 0.75
# Recency weighting of established categories: weight = max(decay^age, floor).
RECENCY_DECAY = 0.5
RECENCY_FLOOR = 0.1
# Width of one incremental span on the synthetic timeline.
SPAN_TICKS = 10_000


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[Interaction], DriftGroundTruth]:
    """Generate a drifting-intent interaction log plus its ground truth.

    Items are assigned to categories round-robin over a seeded shuffle. Every
    user starts span 0 with two active categories; in each later span a new
    category activates with p_new and an active one deactivates with p_drop,
    never dropping below one.

    Within a span, draws burst on the freshly activated category and are
    recency-weighted over the rest, while the final two events (the holdout
    targets) probe the established categories uniformly: old intents keep
    reappearing even when recent interactions underrepresent them.
    """
    cat_rng = np.random.default_rng([spec.seed, 11])
    order = cat_rng.permutation(spec.num_items)
    item_category = np.empty(spec.num_items, dtype=np.int64)
    item_category[order] = np.arange(spec.num_items) % spec.num_categories
    cat_items = [
        np.flatnonzero(item_category == c) for c in range(spec.num_categories)
    ]

    n_per = spec.interactions_per_user_per_span
    alpha_z = spec.spans * SPAN_TICKS
    z = 2 * alpha_z
    all_events: list[Interaction] = []
    gt_events: dict[int, dict[int, dict[str, list[int]]]] = {}

    for uid in range(spec.num_users):
        rng = np.random.default_rng([spec.seed, 10, uid])
        start = rng.choice(
            spec.num_categories, size=min(2, spec.num_categories), replace=False
        )
        active = [int(c) for c in start]
        activated_at = {c: 0 for c in active}
        gt_events[uid] = {0: {"activated": sorted(active), "deactivated": []}}

        for t in range(spec.spans + 1):
            new_cat = None
            if t >= 1:
                activated, deactivated = [], []
                inactive = [c for c in range(spec.num_categories) if c not in active]
                if inactive and rng.random() < spec.p_new_category:
                    new_cat = int(rng.choice(np.asarray(inactive)))
                    active.append(new_cat)
                    activated_at[new_cat] = t
                    activated.append(new_cat)
                droppable = [c for c in active if c != new_cat]
                if len(active) > 1 and droppable and rng.random() < spec.p_drop_category:
                    gone = int(rng.choice(np.asarray(droppable)))
                    active.remove(gone)
                    deactivated.append(gone)
                gt_events[uid][t] = {
                    "activated": sorted(activated),
                    "deactivated": sorted(deactivated),
                }

            old = [c for c in active if c != new_cat]
            weights = np.array(
                [max(RECENCY_DECAY ** (t - activated_at[c]), RECENCY_FLOOR)
                 for c in old]
            ) if old else np.empty(0)
            cats = np.empty(n_per, dtype=np.int64)
            burst_mask = (
                rng.random(n_per) < NOVELTY_BURST if new_cat is not None and old else
                np.full(n_per, new_cat is not None)
            )
            if new_cat is not None:
                cats[burst_mask] = new_cat
            n_old = int((~burst_mask).sum())
            if n_old:
                cats[~burst_mask] = rng.choice(
                    np.asarray(old), size=n_old, p=weights / weights.sum()
                )
            # holdout positions probe established categories uniformly
            established = [c for c in active if activated_at[c] < t] or active
            for pos in range(max(0, n_per - 2), n_per):
                cats[pos] = established[rng.integers(0, len(established))]
            items = np.array(
                [cat_items[c][rng.integers(0, len(cat_items[c]))] for c in cats],
                dtype=np.int64,
            )
            if t == 0:
                ts = np.sort(rng.integers(0, alpha_z + 1, size=n_per))
            else:
                lo = alpha_z + (t - 1) * SPAN_TICKS
                ts = np.sort(rng.integers(lo + 1, lo + SPAN_TICKS + 1, size=n_per))
            for item, s in zip(items, ts):
                all_events.append(Interaction(uid, int(item), int(s)))

    all_events.sort(key=lambda e: (e.timestamp, e.user_id, e.item_id))
    # pin the global maximum so split_spans reconstructs the planted blocks
    last = all_events[-1]
    if last.timestamp != z:
        all_events[-1] = Interaction(last.user_id, last.item_id, z)
    return all_events, DriftGroundTruth(gt_events, [int(c) for c in item_category])


def planted_item_embeddings(
    item_category: list[int], num_categories: int, d: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth item embeddings: orthonormal prototypes plus sigma=0.1 noise.

    Returns (embeddings (num_items, d), prototypes (num_categories, d)).
    """
    if num_categories > d:
        raise ValueError("need d >= num_categories for orthonormal prototypes")
    rng = np.random.default_rng([seed, 13])
    basis, _ = np.linalg.qr(rng.normal(size=(d, num_categories)))
    protos = basis.T  # (C, d), orthonormal rows
    cats = np.asarray(item_category)
    emb = protos[cats] + 0.1 * rng.normal(size=(len(cats), d))
    return emb, protos


def write_interactions_csv(path: str, interactions: list[Interaction]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user_id", "item_id", "timestamp"])
        for it in interactions:
            writer.writerow([it.user_id, it.item_id, it.timestamp])


def write_ground_truth_json(path: str, gt: DriftGroundTruth) -> None:
    with open(path, "w") as fh:
        json.dump(gt.to_json(), fh, sort_keys=True)


def load_ground_truth_json(path: str) -> DriftGroundTruth:
    with open(path) as fh:
        return DriftGroundTruth.from_json(json.load(fh))
