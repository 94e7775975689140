"""Batched loss and hand-derived gradients for the sampled-softmax +
distillation objective, through either extractor.

Gradients flow through the final routing iteration (DR) or the full
attention graph (SA), the target-aware aggregator, and both loss terms; the
distillation teacher contributes no gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .extractor import (
    dr_backward,
    dr_extract_batch,
    masked_softmax,
    sa_backward,
    sa_extract_batch,
    squash,
)
from .lifecycle import P_CLIP, IntentBank
from .model import ModelParams


@dataclass
class Instance:
    """One training example: a user, a chronological prefix, and a target."""

    user: int
    prefix: np.ndarray
    target: int
    negatives: np.ndarray


@dataclass
class Gradients:
    emb: np.ndarray
    w: np.ndarray | None = None
    w1: np.ndarray | None = None
    wu: dict[int, np.ndarray] = field(default_factory=dict)

    def named(self) -> dict[str, np.ndarray]:
        out = {"emb": self.emb}
        if self.w is not None:
            out["w"] = self.w
        if self.w1 is not None:
            out["w1"] = self.w1
        for uid, g in self.wu.items():
            out[f"wu:{uid}"] = g
        return out


@dataclass
class FrozenPaths:
    """Detached quantities held fixed while differentiating.

    Routing coefficients and teacher soft targets are stop-gradient data by
    design; freezing them makes the loss exactly the function the analytic
    gradients differentiate, which is what finite-difference checks need.
    """

    coupling: np.ndarray | None = None  # (B, n, K) final routing coefficients
    teacher_q: np.ndarray | None = None  # (B, Ko_max) distillation targets


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _pad_batch(instances, model: ModelParams, banks: dict[int, IntentBank]):
    dtype = model.embeddings.dtype
    b = len(instances)
    n_max = max(len(inst.prefix) for inst in instances)
    ids = np.zeros((b, n_max), dtype=np.int64)
    imask = np.zeros((b, n_max), dtype=dtype)
    ks = np.array([banks[inst.user].k for inst in instances])
    k_max = int(ks.max())
    kmask = np.zeros((b, k_max), dtype=dtype)
    for i, inst in enumerate(instances):
        ids[i, : len(inst.prefix)] = inst.prefix
        imask[i, : len(inst.prefix)] = 1.0
        kmask[i, : ks[i]] = 1.0
    e_items = model.embeddings[ids] * imask[:, :, None]
    return ids, imask, e_items, ks, k_max, kmask


def compute_loss_and_gradients(
    instances: list[Instance],
    model: ModelParams,
    banks: dict[int, IntentBank],
    cfg: RunConfig,
    want_grads: bool = True,
    frozen: FrozenPaths | None = None,
) -> tuple[float, Gradients | None]:
    """Mean of L_SS + lambda_kd * L_KD over the batch, with its gradients."""
    if not instances:
        raise ValueError("empty batch")
    dtype = model.embeddings.dtype
    b = len(instances)
    d = model.d
    ids, imask, e_items, ks, k_max, kmask = _pad_batch(instances, model, banks)

    if model.kind == "dr":
        if frozen is not None and frozen.coupling is not None:
            e_hat = e_items @ model.dr.w.T
            u = np.einsum("bnk,bnd->bkd", frozen.coupling, e_hat)
            h = squash(u)
            cache = (frozen.coupling, e_hat, u)
        else:
            h0 = np.zeros((b, k_max, d), dtype=dtype)
            for i, inst in enumerate(instances):
                h0[i, : ks[i]] = banks[inst.user].vectors.T
            h, cache = dr_extract_batch(
                e_items, imask, h0, kmask, model.dr.w, cfg.routing_iters
            )
    else:
        d_a = model.sa.w1.shape[0]
        wu_b = np.zeros((b, d_a, k_max), dtype=dtype)
        for i, inst in enumerate(instances):
            wu_b[i, :, : ks[i]] = model.sa.wu[inst.user]
        h, cache = sa_extract_batch(e_items, imask, model.sa.w1, wu_b, kmask)

    targets = np.array([inst.target for inst in instances], dtype=np.int64)
    neg_ids = np.stack([inst.negatives for inst in instances]).astype(np.int64)
    e_a = model.embeddings[targets]  # (B, d)
    e_n = model.embeddings[neg_ids]  # (B, n_neg, d)

    # target-aware aggregation
    s = np.einsum("bkd,bd->bk", h, e_a)
    beta = masked_softmax(s, kmask, axis=1)
    v = np.einsum("bk,bkd->bd", beta, h)

    # sampled softmax with the target in the denominator
    z_t = np.sum(v * e_a, axis=1)
    z_n = np.einsum("bd,bjd->bj", v, e_n)
    z = np.concatenate([z_t[:, None], z_n], axis=1)
    z_shift = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z_shift)
    lse = np.log(ez.sum(axis=1))
    loss_ss = float(np.mean(lse - z_shift[:, 0]))

    # distillation against the frozen previous-span snapshot
    kd_on = cfg.lambda_kd > 0
    ko = np.zeros(b, dtype=np.int64)
    if kd_on:
        ko = np.array(
            [banks[inst.user].prev_vectors.shape[1] for inst in instances],
            dtype=np.int64,
        )
    ko_max = int(ko.max()) if kd_on else 0
    loss_kd = 0.0
    if kd_on and ko_max > 0:
        komask = np.zeros((b, ko_max), dtype=dtype)
        h_prev = np.zeros((b, ko_max, d), dtype=dtype)
        for i, inst in enumerate(instances):
            if ko[i]:
                komask[i, : ko[i]] = 1.0
                h_prev[i, : ko[i]] = banks[inst.user].prev_vectors.T
        zs = np.einsum("bkd,bd->bk", h[:, :ko_max], e_a) / cfg.tau
        ps = np.clip(_sigmoid(zs), P_CLIP, 1.0 - P_CLIP)
        if frozen is not None and frozen.teacher_q is not None:
            qs = frozen.teacher_q
        else:
            zt = np.einsum("bkd,bd->bk", h_prev, e_a) / cfg.tau
            qs = _sigmoid(zt)
        ce = -(qs * np.log(ps) + (1.0 - qs) * np.log(1.0 - ps)) * komask
        loss_kd = float(np.mean(ce.sum(axis=1)))

    loss = loss_ss + cfg.lambda_kd * loss_kd if kd_on else loss_ss
    if not want_grads:
        return loss, None

    # ----- backward -----
    p = ez / ez.sum(axis=1, keepdims=True)
    dz = p.copy()
    dz[:, 0] -= 1.0
    dz /= b
    dv = dz[:, 0:1] * e_a + np.einsum("bj,bjd->bd", dz[:, 1:], e_n)
    de_n = dz[:, 1:, None] * v[:, None, :]
    de_a = dz[:, 0:1] * v

    # aggregator: v = sum_k beta_k h_k with beta = softmax_k(e_a . h_k)
    g = np.einsum("bd,bkd->bk", dv, h)
    inner = np.sum(beta * g, axis=1, keepdims=True)
    ds = beta * (g - inner)
    dh = beta[:, :, None] * dv[:, None, :] + ds[:, :, None] * e_a[:, None, :]
    de_a = de_a + np.einsum("bk,bkd->bd", ds, h)

    if kd_on and ko_max > 0:
        dzs = (cfg.lambda_kd / (cfg.tau * b)) * (ps - qs) * komask
        dh[:, :ko_max] += dzs[:, :, None] * e_a[:, None, :]
        de_a = de_a + np.einsum("bk,bkd->bd", dzs, h[:, :ko_max])

    dh = dh * kmask[:, :, None]

    grads = Gradients(emb=np.zeros_like(model.embeddings))
    if model.kind == "dr":
        d_w, d_e = dr_backward(dh, cache, e_items, imask, model.dr.w)
        grads.w = d_w
    else:
        d_w1, d_wu, d_e = sa_backward(
            dh, cache, e_items, imask, model.sa.w1, wu_b, kmask
        )
        grads.w1 = d_w1
        for i, inst in enumerate(instances):
            uid = inst.user
            if uid not in grads.wu:
                grads.wu[uid] = np.zeros_like(model.sa.wu[uid])
            grads.wu[uid] += d_wu[i, :, : ks[i]]

    valid = imask > 0
    np.add.at(grads.emb, ids[valid], d_e[valid])
    np.add.at(grads.emb, targets, de_a)
    np.add.at(grads.emb, neg_ids.reshape(-1), de_n.reshape(-1, d))
    return loss, grads


def compute_gradients(
    instances: list[Instance],
    model: ModelParams,
    banks: dict[int, IntentBank],
    cfg: RunConfig,
) -> Gradients:
    """Analytic gradients of the batch objective (see compute_loss_and_gradients)."""
    _, grads = compute_loss_and_gradients(instances, model, banks, cfg, want_grads=True)
    return grads


def compute_loss(
    instances: list[Instance],
    model: ModelParams,
    banks: dict[int, IntentBank],
    cfg: RunConfig,
    frozen: FrozenPaths | None = None,
) -> float:
    loss, _ = compute_loss_and_gradients(
        instances, model, banks, cfg, want_grads=False, frozen=frozen
    )
    return loss


def capture_frozen(
    instances: list[Instance],
    model: ModelParams,
    banks: dict[int, IntentBank],
    cfg: RunConfig,
) -> FrozenPaths:
    """Snapshot the stop-gradient quantities at the current parameters."""
    dtype = model.embeddings.dtype
    b = len(instances)
    d = model.d
    _, imask, e_items, ks, k_max, kmask = _pad_batch(instances, model, banks)
    coupling = None
    if model.kind == "dr":
        h0 = np.zeros((b, k_max, d), dtype=dtype)
        for i, inst in enumerate(instances):
            h0[i, : ks[i]] = banks[inst.user].vectors.T
        _, (coupling, _, _) = dr_extract_batch(
            e_items, imask, h0, kmask, model.dr.w, cfg.routing_iters
        )
    teacher_q = None
    if cfg.lambda_kd > 0:
        ko = [banks[inst.user].prev_vectors.shape[1] for inst in instances]
        ko_max = max(ko)
        if ko_max > 0:
            targets = np.array([inst.target for inst in instances], dtype=np.int64)
            e_a = model.embeddings[targets]
            h_prev = np.zeros((b, ko_max, d), dtype=dtype)
            for i, inst in enumerate(instances):
                if ko[i]:
                    h_prev[i, : ko[i]] = banks[inst.user].prev_vectors.T
            zt = np.einsum("bkd,bd->bk", h_prev, e_a) / cfg.tau
            teacher_q = _sigmoid(zt)
    return FrozenPaths(coupling=coupling, teacher_q=teacher_q)
