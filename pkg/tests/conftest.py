import numpy as np
import pytest

from intentbank.config import RunConfig
from intentbank.data import SyntheticSpec, generate_synthetic, split_spans
from intentbank.engine import Instance
from intentbank.extractor import DrParams, SaParams
from intentbank.lifecycle import IntentBank
from intentbank.model import ModelParams


def toy_model(extractor="dr", seed=0, d=8, d_a=4, k=3, num_items=12, users=(0, 1)):
    """Small float64 model + banks + two instances for gradient-level tests."""
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(num_items, d)) / np.sqrt(d)
    if extractor == "dr":
        model = ModelParams(
            embeddings=emb, dr=DrParams(w=rng.normal(size=(d, d)) / np.sqrt(d))
        )
    else:
        wu = {u: rng.normal(size=(d_a, k)) / np.sqrt(d_a) for u in users}
        model = ModelParams(
            embeddings=emb,
            sa=SaParams(w1=rng.normal(size=(d_a, d)) / np.sqrt(d), wu=wu),
        )
    banks = {}
    for u in users:
        banks[u] = IntentBank(
            user_id=u,
            vectors=rng.normal(size=(d, k)) / np.sqrt(d),
            creation_span=np.zeros(k, dtype=np.int64),
            as_accum=np.zeros(k),
            as_count=np.zeros(k),
            prev_vectors=rng.normal(size=(d, k)) / np.sqrt(d),
        )
    return model, banks


def toy_instances(model, users=(0, 1), n=5, n_neg=3, seed=0):
    rng = np.random.default_rng(seed + 100)
    items = model.num_items
    out = []
    for j, u in enumerate(users):
        out.append(
            Instance(
                u,
                rng.integers(0, items, size=max(1, n - j)),
                int(rng.integers(0, items)),
                rng.integers(0, items, size=n_neg),
            )
        )
    return out


TINY_SPEC = SyntheticSpec(
    num_users=12,
    num_items=40,
    num_categories=3,
    spans=3,
    interactions_per_user_per_span=12,
    p_new_category=0.4,
    p_drop_category=0.2,
    seed=5,
)


@pytest.fixture(scope="session")
def tiny_spans():
    inter, _ = generate_synthetic(TINY_SPEC)
    return split_spans(inter, TINY_SPEC.spans, 0.5)


def tiny_config(**kw) -> RunConfig:
    base = dict(
        extractor="dr", strategy="ima", d=16, d_a=8, k0=3, delta_k=2,
        epochs=3, batch_size=32, negatives=5, seed=0,
    )
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def default_fixture():
    """The default synthetic fixture (seed 7) and its ground truth."""
    spec = SyntheticSpec()
    inter, gt = generate_synthetic(spec)
    return spec, inter, gt
