"""Trainable parameter container: item embeddings plus extractor parameters."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .extractor import DrParams, SaParams


@dataclass
class ModelParams:
    embeddings: np.ndarray  # (num_items, d)
    dr: DrParams | None = None
    sa: SaParams | None = None

    @property
    def kind(self) -> str:
        return "dr" if self.dr is not None else "sa"

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    @property
    def num_items(self) -> int:
        return self.embeddings.shape[0]

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {"emb": self.embeddings}
        if self.dr is not None:
            out["w"] = self.dr.w
        else:
            out["w1"] = self.sa.w1
            for uid in sorted(self.sa.wu):
                out[f"wu:{uid}"] = self.sa.wu[uid]
        return out

    def set_tensor(self, name: str, value: np.ndarray) -> None:
        if name == "emb":
            self.embeddings = value
        elif name == "w":
            self.dr.w = value
        elif name == "w1":
            self.sa.w1 = value
        elif name.startswith("wu:"):
            self.sa.wu[int(name.split(":", 1)[1])] = value
        else:
            raise KeyError(name)


# Item embeddings start at norm ~EMB_INIT_SCALE; trained logit spreads track
# this scale, which the puzzlement threshold reads in absolute terms.
EMB_INIT_SCALE = 1.0


def _emb_rows(n: int, d: int, rng: np.random.Generator, dtype) -> np.ndarray:
    return (EMB_INIT_SCALE * rng.normal(size=(n, d)) / math.sqrt(d)).astype(dtype)


def init_model(
    num_items: int, cfg: RunConfig, seed_key: list[int], dtype=np.float32
) -> ModelParams:
    """Fresh model: N(0, I/d) embeddings and scale-preserving extractor params."""
    rng = np.random.default_rng(seed_key + [3])
    emb = _emb_rows(num_items, cfg.d, rng, dtype)
    if cfg.extractor == "dr":
        w = (rng.normal(size=(cfg.d, cfg.d)) / math.sqrt(cfg.d)).astype(dtype)
        return ModelParams(embeddings=emb, dr=DrParams(w=w))
    w1 = (rng.normal(size=(cfg.d_a, cfg.d)) / math.sqrt(cfg.d)).astype(dtype)
    return ModelParams(embeddings=emb, sa=SaParams(w1=w1, wu={}))


def init_wu(d_a: int, k: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    return (rng.normal(size=(d_a, k)) / math.sqrt(d_a)).astype(dtype)


def grow_embeddings(
    model: ModelParams, new_size: int, seed_key: list[int], span: int
) -> None:
    """Append rows for items first seen at ``span``; deterministic per span."""
    cur = model.num_items
    if new_size <= cur:
        return
    rng = np.random.default_rng(seed_key + [3, span])
    extra = _emb_rows(new_size - cur, model.d, rng, model.embeddings.dtype)
    model.embeddings = np.concatenate([model.embeddings, extra], axis=0)
