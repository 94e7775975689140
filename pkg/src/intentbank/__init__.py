"""Incremental multi-intent sequential recommendation with elastic intent banks."""

from .config import RunConfig
from .data import (
    DriftGroundTruth,
    Interaction,
    SpanDataset,
    SyntheticSpec,
    generate_synthetic,
    ingest_log,
    split_holdout,
    split_spans,
)
from .estimator import IntentBankRecommender
from .evaluation import SpanReport, evaluate_span, hr_ndcg_at_k
from .lifecycle import IntentBank, LifecycleConfig
from .trainer import incremental_step, pretrain, run_timeline

__all__ = [
    "DriftGroundTruth",
    "IntentBank",
    "IntentBankRecommender",
    "Interaction",
    "LifecycleConfig",
    "RunConfig",
    "SpanDataset",
    "SpanReport",
    "SyntheticSpec",
    "evaluate_span",
    "generate_synthetic",
    "hr_ndcg_at_k",
    "incremental_step",
    "ingest_log",
    "pretrain",
    "run_timeline",
    "split_holdout",
    "split_spans",
]

__version__ = "0.1.0"
