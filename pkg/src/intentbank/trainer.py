"""Pretraining, the per-span incremental procedure, and the timeline driver.

Strategies: ima (expand + distill), ema_iir / ema_sic (ima plus a bank cap),
ft (inherit parameters, no expansion, no distillation), fr (reinitialize and
retrain on all spans so far each span).
"""
from __future__ import annotations

import dataclasses
import logging
import math
import time

import numpy as np

from .adam import AdamState, NonFiniteGradient, adam_step
from .config import MAX_PREFIX_LEN, RunConfig
from .data import SpanDataset, sample_negatives_batch, split_holdout
from .engine import Instance, compute_loss_and_gradients
from .evaluation import SpanReport, evaluate_span, evaluate_users
from .extractor import extract_dr, extract_sa
from .lifecycle import (
    IntentBank,
    SaSync,
    compress_similar,
    expand_intents,
    nid_gate,
    remove_inactive,
    trim_new_intents,
    update_active_scores,
)
from .model import ModelParams, grow_embeddings, init_model, init_wu

log = logging.getLogger(__name__)


def make_instances(span: SpanDataset) -> list[Instance]:
    """Per-target training instances: every train-marked interaction with a
    non-empty chronological prefix, capped at the most recent items."""
    out: list[Instance] = []
    for uid in sorted(span.users):
        train = span.users[uid].train
        for j in range(1, len(train)):
            prefix = np.asarray(train[max(0, j - MAX_PREFIX_LEN): j], dtype=np.int64)
            out.append(Instance(uid, prefix, train[j], np.empty(0, dtype=np.int64)))
    return out


def _sa_sync(model: ModelParams, opt: AdamState, uid: int) -> SaSync | None:
    if model.sa is None:
        return None
    key = f"wu:{uid}"
    stores = []
    if key in opt.m:
        stores = [(opt.m, key), (opt.v, key)]
    return SaSync(model.sa.wu, uid, stores)


def _ensure_bank(
    model: ModelParams,
    banks: dict[int, IntentBank],
    opt: AdamState,
    uid: int,
    cfg: RunConfig,
    span_idx: int,
    seed_key: list[int],
) -> None:
    if uid in banks:
        return
    rng = np.random.default_rng(seed_key + [0, uid])
    banks[uid] = IntentBank.fresh(
        uid, cfg.d, cfg.k0, span_idx, rng, dtype=model.embeddings.dtype
    )
    if model.sa is not None:
        wu_rng = np.random.default_rng(seed_key + [4, uid])
        model.sa.wu[uid] = init_wu(cfg.d_a, cfg.k0, wu_rng, model.embeddings.dtype)
        opt.ensure(f"wu:{uid}", model.sa.wu[uid])


def refresh_banks(
    model: ModelParams,
    banks: dict[int, IntentBank],
    span: SpanDataset,
    cfg: RunConfig,
) -> None:
    """Store each present user's freshly extracted intents in their bank."""
    for uid in sorted(span.users):
        train = span.users[uid].train
        if not train:
            continue
        items = model.embeddings[np.asarray(train[-MAX_PREFIX_LEN:], dtype=np.int64)]
        bank = banks[uid]
        if model.kind == "dr":
            h = extract_dr(items, bank.vectors, model.dr, cfg.routing_iters)
        else:
            h = extract_sa(items, model.sa, uid)
        bank.vectors = h.astype(model.embeddings.dtype)


def _validation_hr(
    model: ModelParams,
    banks: dict[int, IntentBank],
    span: SpanDataset,
    universe: np.ndarray,
) -> float | None:
    targets = {
        uid: us.valid for uid, us in span.users.items() if us.valid is not None
    }
    if not targets:
        return None
    hrs, _, _ = evaluate_users(model, banks, targets, universe, k=20)
    return float(np.mean(hrs)) if hrs else None


def _optimize_epoch(
    instances: list[Instance],
    model: ModelParams,
    banks: dict[int, IntentBank],
    cfg: RunConfig,
    opt: AdamState,
    rng: np.random.Generator,
    lambda_kd: float,
) -> float:
    """One pass over shuffled batches; returns the mean batch loss."""
    eff_cfg = cfg if cfg.lambda_kd == lambda_kd else dataclasses.replace(
        cfg, lambda_kd=lambda_kd
    )
    order = rng.permutation(len(instances))
    losses = []
    for lo in range(0, len(order), cfg.batch_size):
        chunk = [instances[j] for j in order[lo: lo + cfg.batch_size]]
        targets = np.array([inst.target for inst in chunk], dtype=np.int64)
        negs = sample_negatives_batch(targets, model.num_items, cfg.negatives, rng)
        for inst, row in zip(chunk, negs):
            inst.negatives = row
        loss, grads = compute_loss_and_gradients(chunk, model, banks, eff_cfg)
        try:
            adam_step(model.named_tensors(), grads.named(), opt, cfg.lr)
        except NonFiniteGradient as exc:
            log.warning("skipping batch: %s", exc)
            continue
        losses.append(loss)
    return float(np.mean(losses)) if losses else 0.0


def _train_epochs(
    model: ModelParams,
    banks: dict[int, IntentBank],
    span: SpanDataset,
    instances: list[Instance],
    cfg: RunConfig,
    opt: AdamState,
    seed_key: list[int],
    universe: np.ndarray,
    allow_expand: bool,
    lambda_kd: float,
    span_idx: int,
) -> dict[int, list[int]]:
    """The per-span epoch loop; returns this span's expansions (user -> new idx)."""
    rng = np.random.default_rng(seed_key + [1, span_idx])
    expanded: dict[int, list[int]] = {}
    best_hr = -1.0
    bad = 0
    for epoch in range(cfg.epochs):
        if allow_expand:
            for uid in sorted(span.users):
                if uid in expanded:
                    continue
                train = span.users[uid].train
                if not train:
                    continue
                items = model.embeddings[np.asarray(train, dtype=np.int64)]
                bank = banks[uid]
                if nid_gate(items, bank.vectors, cfg.theta_nid):
                    k_before = bank.k
                    exp_rng = np.random.default_rng(seed_key + [2, span_idx, uid])
                    expand_intents(
                        bank, cfg.delta_k, span_idx, exp_rng,
                        sa=_sa_sync(model, opt, uid), d_a=cfg.d_a,
                    )
                    expanded[uid] = list(range(k_before, bank.k))
        if instances:
            _optimize_epoch(instances, model, banks, cfg, opt, rng, lambda_kd)
        refresh_banks(model, banks, span, cfg)
        hr = _validation_hr(model, banks, span, universe)
        if hr is not None:
            if hr > best_hr:
                best_hr = hr
                bad = 0
            else:
                bad += 1
                if bad >= cfg.patience:
                    break
    return expanded


def pretrain(
    span0: SpanDataset,
    cfg: RunConfig,
    num_items: int,
    seed_key: list[int] | None = None,
) -> tuple[ModelParams, dict[int, IntentBank], AdamState]:
    """Train the base model on the pretraining span with the plain objective."""
    if span0.num_interactions() == 0:
        raise ValueError("pretraining span is empty")
    seed_key = seed_key if seed_key is not None else [cfg.seed]
    model = init_model(num_items, cfg, seed_key)
    opt = AdamState()
    banks: dict[int, IntentBank] = {}
    for uid in sorted(span0.users):
        _ensure_bank(model, banks, opt, uid, cfg, span0.span_index, seed_key)
    universe = np.unique(
        np.array(
            [i for us in span0.users.values() for i in us.items], dtype=np.int64
        )
    )
    instances = make_instances(span0)
    _train_epochs(
        model, banks, span0, instances, cfg, opt, seed_key, universe,
        allow_expand=False, lambda_kd=0.0, span_idx=span0.span_index,
    )
    for uid in sorted(span0.users):
        train = span0.users[uid].train
        if train:
            items = model.embeddings[np.asarray(train, dtype=np.int64)]
            update_active_scores(banks[uid], items, span0.span_index)
    for bank in banks.values():
        bank.snapshot()
    return model, banks, opt


def _reinit_for_fr(
    model: ModelParams,
    banks: dict[int, IntentBank],
    cfg: RunConfig,
    seed_key: list[int],
    span_idx: int,
) -> AdamState:
    rng = np.random.default_rng(seed_key + [5, span_idx])
    fresh = init_model(model.num_items, cfg, seed_key + [5, span_idx])
    model.embeddings = fresh.embeddings
    if model.dr is not None:
        model.dr.w = fresh.dr.w
    else:
        model.sa.w1 = fresh.sa.w1
    opt = AdamState()
    for uid, bank in sorted(banks.items()):
        k = bank.k
        bank.vectors = (
            rng.normal(size=(cfg.d, k)) / math.sqrt(cfg.d)
        ).astype(model.embeddings.dtype)
        bank.prev_vectors = np.zeros((cfg.d, 0), dtype=model.embeddings.dtype)
        if model.sa is not None:
            wu_rng = np.random.default_rng(seed_key + [5, span_idx, uid])
            model.sa.wu[uid] = init_wu(cfg.d_a, k, wu_rng, model.embeddings.dtype)
            opt.ensure(f"wu:{uid}", model.sa.wu[uid])
    return opt


def incremental_step(
    model: ModelParams,
    banks: dict[int, IntentBank],
    span: SpanDataset,
    cfg: RunConfig,
    opt: AdamState,
    universe: np.ndarray,
    seed_key: list[int] | None = None,
    history: list[SpanDataset] | None = None,
) -> tuple[ModelParams, dict[int, IntentBank], AdamState, dict]:
    """Train one incremental span under the configured strategy.

    ``history`` (spans < t, pretraining first) is required for the fr
    strategy. Returns the possibly-replaced optimizer state plus a summary of
    expansions and trims.
    """
    seed_key = seed_key if seed_key is not None else [cfg.seed]
    span_idx = span.span_index
    strategy = cfg.strategy
    allow_expand = strategy in ("ima", "ema_iir", "ema_sic", "fr")
    lambda_kd = cfg.lambda_kd if strategy in ("ima", "ema_iir", "ema_sic") else 0.0

    for uid in sorted(span.users):
        _ensure_bank(model, banks, opt, uid, cfg, span_idx, seed_key)

    if strategy == "fr":
        if history is None:
            raise ValueError("fr strategy needs the preceding spans")
        opt = _reinit_for_fr(model, banks, cfg, seed_key, span_idx)
        instances = [inst for h in history for inst in make_instances(h)]
        instances += make_instances(span)
    else:
        instances = make_instances(span)

    expanded = _train_epochs(
        model, banks, span, instances, cfg, opt, seed_key, universe,
        allow_expand=allow_expand, lambda_kd=lambda_kd, span_idx=span_idx,
    )

    trimmed = 0
    for uid, new_idx in sorted(expanded.items()):
        bank = banks[uid]
        before = bank.k
        trim_new_intents(bank, new_idx, cfg.c2, sa=_sa_sync(model, opt, uid))
        trimmed += before - bank.k

    for uid in sorted(span.users):
        train = span.users[uid].train
        if train:
            items = model.embeddings[np.asarray(train, dtype=np.int64)]
            update_active_scores(banks[uid], items, span_idx)

    if strategy == "ema_iir":
        for uid in sorted(banks):
            remove_inactive(banks[uid], cfg.k_max, sa=_sa_sync(model, opt, uid))
    elif strategy == "ema_sic":
        for uid in sorted(banks):
            compress_similar(banks[uid], cfg.k_max, sa=_sa_sync(model, opt, uid))

    for bank in banks.values():
        bank.snapshot()

    info = {"expanded_users": sorted(expanded), "trimmed": trimmed}
    return model, banks, opt, info


def _grow_for_span(
    model: ModelParams, opt: AdamState, span: SpanDataset, seed_key: list[int]
) -> None:
    max_id = -1
    for us in span.users.values():
        if us.items:
            max_id = max(max_id, max(us.items))
    if max_id < model.num_items:
        return
    old = model.num_items
    grow_embeddings(model, max_id + 1, seed_key, span.span_index)
    if "emb" in opt.m:
        pad = model.num_items - old
        zeros = np.zeros((pad, model.d), dtype=model.embeddings.dtype)
        opt.m["emb"] = np.concatenate([opt.m["emb"], zeros], axis=0)
        opt.v["emb"] = np.concatenate([opt.v["emb"], zeros], axis=0)


def run_timeline(
    spans: list[SpanDataset],
    cfg: RunConfig,
    start_state: tuple | None = None,
    checkpoint_cb=None,
) -> list[SpanReport]:
    """Pretrain on span 0, then train span t and test on span t+1's targets.

    ``start_state`` = (model, banks, opt, last_done_span) resumes after a
    checkpoint. ``checkpoint_cb(span, model, banks, opt)`` is called after
    each trained span (and after pretraining).
    """
    if len(spans) < 2:
        raise ValueError("need at least a pretraining span and one incremental span")
    seed_key = [cfg.seed]
    for span in spans:
        split_holdout(span)
    seen: set[int] = set()
    universe_by_span: list[np.ndarray] = []
    for span in spans:
        for us in span.users.values():
            seen.update(us.items)
        universe_by_span.append(np.array(sorted(seen), dtype=np.int64))

    if start_state is None:
        t0 = time.perf_counter()
        num_items = int(universe_by_span[0].max()) + 1
        model, banks, opt = pretrain(spans[0], cfg, num_items, seed_key)
        log.info("pretrain done in %.1fs", time.perf_counter() - t0)
        if checkpoint_cb:
            checkpoint_cb(0, model, banks, opt)
        start = 1
    else:
        model, banks, opt, last_done = start_state
        start = last_done + 1

    reports: list[SpanReport] = []
    t_last = len(spans) - 2  # train spans 1..T-1, evaluating on t+1
    for t in range(start, t_last + 1):
        tic = time.perf_counter()
        _grow_for_span(model, opt, spans[t], seed_key)
        history = spans[:t] if cfg.strategy == "fr" else None
        model, banks, opt, info = incremental_step(
            model, banks, spans[t], cfg, opt, universe_by_span[t],
            seed_key=seed_key, history=history,
        )
        report = evaluate_span(
            model, banks, spans[t + 1], universe_by_span[t],
            strategy=cfg.strategy,
        )
        report.span = t
        report.seconds = time.perf_counter() - tic
        reports.append(report)
        log.info(
            "span %d [%s]: hr20=%s ndcg20=%s users=%d mean_k=%.2f max_k=%d "
            "expanded=%d trimmed=%d wall=%.1fs",
            t, cfg.strategy, report.hr20, report.ndcg20, report.users,
            report.mean_k, report.max_k, len(info["expanded_users"]),
            info["trimmed"], report.seconds,
        )
        if checkpoint_cb:
            checkpoint_cb(t, model, banks, opt)
    return reports
