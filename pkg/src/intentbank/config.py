"""Run configuration and config-file handling."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

EXTRACTORS = ("dr", "sa")
STRATEGIES = ("ima", "ema_iir", "ema_sic", "ft", "fr")

# Prefix length cap for per-target training instances.
MAX_PREFIX_LEN = 50


class ConfigError(ValueError):
    """Raised for invalid configuration values or unknown config keys."""


@dataclass
class RunConfig:
    """All hyperparameters of a training run."""

    extractor: str = "dr"
    strategy: str = "ima"
    d: int = 64
    d_a: int = 16
    routing_iters: int = 3
    k0: int = 4
    delta_k: int = 3
    theta_nid: float = -0.04
    c2: float = 0.3
    tau: float = 2.0
    lambda_kd: float = 1e-3
    k_max: int = 20
    lr: float = 0.001
    negatives: int = 10
    epochs: int = 10
    patience: int = 3
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.extractor not in EXTRACTORS:
            raise ConfigError(f"extractor must be one of {EXTRACTORS}, got {self.extractor!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        for name in ("d", "d_a", "routing_iters", "k0", "delta_k", "k_max",
                     "negatives", "epochs", "patience", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("tau", "lr", "c2"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.lambda_kd < 0:
            raise ConfigError("lambda_kd must be >= 0")
        if math.isnan(self.theta_nid):
            raise ConfigError("theta_nid must not be NaN")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_RUN_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}
# Top-level keys allowed in a config file beyond RunConfig fields.
_EXTRA_KEYS = {"data", "out_dir", "synthetic"}


@dataclass
class CliConfig:
    """Parsed config file: run hyperparameters plus paths and synthetic spec."""

    run: RunConfig = field(default_factory=RunConfig)
    data: str | None = None
    out_dir: str | None = None
    synthetic: dict = field(default_factory=dict)


def load_config_file(path: str) -> CliConfig:
    """Load and validate a JSON config file.

    Unknown keys are rejected; missing keys take RunConfig defaults.
    """
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config file must contain a JSON object")
    unknown = set(raw) - _RUN_FIELDS - _EXTRA_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    run_kwargs = {k: v for k, v in raw.items() if k in _RUN_FIELDS}
    run = RunConfig(**run_kwargs)
    synthetic = raw.get("synthetic", {})
    if not isinstance(synthetic, dict):
        raise ConfigError("'synthetic' must be an object")
    return CliConfig(
        run=run,
        data=raw.get("data"),
        out_dir=raw.get("out_dir"),
        synthetic=synthetic,
    )
