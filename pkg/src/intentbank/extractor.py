"""Multi-intent extraction: capsule dynamic routing and per-user self-attention.

The batched functions are the single source of truth for the math; the
single-user operations wrap them with a batch of one.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NEG_INF = -1e30
_NORM_EPS = 1e-30


@dataclass
class DrParams:
    """Shared affine transform applied to item embeddings before routing."""

    w: np.ndarray  # (d, d)


@dataclass
class SaParams:
    """Shared projection plus per-user attention matrices."""

    w1: np.ndarray  # (d_a, d)
    wu: dict[int, np.ndarray] = field(default_factory=dict)  # user -> (d_a, K_u)


def squash(v: np.ndarray) -> np.ndarray:
    """Capsule nonlinearity: keeps direction, maps norm to n^2/(1+n^2) < 1.

    Works on a single vector or row-stacked vectors (norm over the last axis).
    squash(0) = 0.
    """
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v * (n / (1.0 + n * n))


def squash_backward(d_out: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Backprop through squash at input v.

    Jacobian is s(n) I + s'(n)/n * v v^T with s(n) = n/(1+n^2); the limit at
    v = 0 is the zero matrix.
    """
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    denom = 1.0 + n * n
    s = n / denom
    sp = (1.0 - n * n) / (denom * denom)
    n_safe = np.maximum(n, _NORM_EPS)
    dv = s * d_out + (sp / n_safe) * np.sum(v * d_out, axis=-1, keepdims=True) * v
    return np.where(n > _NORM_EPS, dv, 0.0)


def masked_softmax(x: np.ndarray, mask: np.ndarray, axis: int) -> np.ndarray:
    """Softmax along ``axis`` restricted to mask==1 entries (0 elsewhere)."""
    x = np.where(mask > 0, x, NEG_INF)
    x = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(x) * mask
    total = np.sum(e, axis=axis, keepdims=True)
    return e / np.maximum(total, _NORM_EPS)


def dr_extract_batch(
    e_items: np.ndarray,
    item_mask: np.ndarray,
    h0: np.ndarray,
    k_mask: np.ndarray,
    w: np.ndarray,
    iters: int,
):
    """Behavior-to-intent dynamic routing over a padded batch.

    Parameters
    ----------
    e_items : (B, n, d) item embeddings, rows of padded items zeroed.
    item_mask : (B, n) 1 for real items.
    h0 : (B, K, d) routing initialization (persisted bank vectors).
    k_mask : (B, K) 1 for real intents.
    w : (d, d) shared transform.
    iters : routing iterations L >= 1.

    Returns (H (B, K, d), cache) where cache carries what the backward pass
    needs (final coupling coefficients, transformed items, pre-squash sums).
    """
    e_hat = e_items @ w.T
    b = np.einsum("bnd,bkd->bnk", e_hat, h0)
    kk = k_mask[:, None, :]
    h = None
    c = None
    for layer in range(iters):
        c = masked_softmax(b, np.broadcast_to(kk, b.shape), axis=2)
        u = np.einsum("bnk,bnd->bkd", c, e_hat)
        h = squash(u)
        if layer < iters - 1:
            b = b + np.einsum("bnd,bkd->bnk", e_hat, h)
    return h, (c, e_hat, u)


def dr_backward(
    d_h: np.ndarray,
    cache,
    e_items: np.ndarray,
    item_mask: np.ndarray,
    w: np.ndarray,
):
    """Gradients of the final routing iteration's weighted sum and squash.

    Coupling coefficients are treated as constants. Returns (dW, dE) with dE
    zeroed on padded items.
    """
    c, e_hat, u = cache
    d_u = squash_backward(d_h, u)
    d_ehat = np.einsum("bnk,bkd->bnd", c, d_u)
    d_ehat = d_ehat * item_mask[:, :, None]
    d_w = np.einsum("bnd,bne->de", d_ehat, e_items)
    d_e = d_ehat @ w
    return d_w, d_e


def sa_extract_batch(
    e_items: np.ndarray,
    item_mask: np.ndarray,
    w1: np.ndarray,
    wu: np.ndarray,
    k_mask: np.ndarray,
):
    """Self-attention extraction over a padded batch.

    A = softmax over items of Wu^T tanh(W1 E); H = E A. ``wu`` is (B, d_a, K)
    padded per instance.
    """
    g = np.tanh(e_items @ w1.T)  # (B, n, d_a)
    m = np.einsum("bnf,bfk->bnk", g, wu)
    a = masked_softmax(m, np.broadcast_to(item_mask[:, :, None], m.shape), axis=1)
    h = np.einsum("bnk,bnd->bkd", a, e_items)
    h = h * k_mask[:, :, None]
    return h, (g, a)


def sa_backward(
    d_h: np.ndarray,
    cache,
    e_items: np.ndarray,
    item_mask: np.ndarray,
    w1: np.ndarray,
    wu: np.ndarray,
    k_mask: np.ndarray,
):
    """Full backprop through H = E softmax(Wu^T tanh(W1 E)).

    Returns (dW1, dWu (B, d_a, K), dE).
    """
    g, a = cache
    d_h = d_h * k_mask[:, :, None]
    d_a = np.einsum("bkd,bnd->bnk", d_h, e_items)
    d_e = np.einsum("bnk,bkd->bnd", a, d_h)
    # softmax over items, independently per intent column
    inner = np.sum(a * d_a, axis=1, keepdims=True)
    d_m = a * (d_a - inner)
    d_g = np.einsum("bnk,bfk->bnf", d_m, wu)
    d_wu = np.einsum("bnf,bnk->bfk", g, d_m)
    d_z = (1.0 - g * g) * d_g
    d_z = d_z * item_mask[:, :, None]
    d_w1 = np.einsum("bnf,bnd->fd", d_z, e_items)
    d_e = d_e + d_z @ w1
    return d_w1, d_wu, d_e * item_mask[:, :, None]


# ---------------------------------------------------------------------------
# single-user operations (contract orientation: intents are columns, d x K)


def extract_dr(
    items: np.ndarray, bank_vectors: np.ndarray, params: DrParams, iters: int = 3
) -> np.ndarray:
    """Extract a d x K intent matrix from item embeddings via dynamic routing.

    ``items`` is (n, d); ``bank_vectors`` is the d x K routing initialization
    (persisted intents, plus fresh random columns for newly created ones).
    """
    if items.ndim != 2 or items.shape[0] < 1:
        raise ValueError("need at least one item embedding")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    n, d = items.shape
    k = bank_vectors.shape[1]
    e = items[None, :, :]
    h0 = bank_vectors.T[None, :, :]
    ones_n = np.ones((1, n), dtype=items.dtype)
    ones_k = np.ones((1, k), dtype=items.dtype)
    h, _ = dr_extract_batch(e, ones_n, h0, ones_k, params.w, iters)
    return h[0].T


def extract_sa(items: np.ndarray, params: SaParams, user_id: int) -> np.ndarray:
    """Extract a d x K intent matrix via the user's attention matrix."""
    if items.ndim != 2 or items.shape[0] < 1:
        raise ValueError("need at least one item embedding")
    wu = params.wu[user_id]
    n, _ = items.shape
    k = wu.shape[1]
    e = items[None, :, :]
    ones_n = np.ones((1, n), dtype=items.dtype)
    ones_k = np.ones((1, k), dtype=items.dtype)
    h, _ = sa_extract_batch(e, ones_n, params.w1, wu[None, :, :], ones_k)
    return h[0].T
