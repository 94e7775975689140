"""Adam with bias correction over a dict of named tensors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(RuntimeError):
    """Raised when a batch produces NaN or inf gradients."""


@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def ensure(self, name: str, like: np.ndarray) -> None:
        if name not in self.m:
            self.m[name] = np.zeros_like(like)
            self.v[name] = np.zeros_like(like)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict[str, np.ndarray]:
    """One Adam update over every named tensor; missing grads count as zero.

    Updates params in place and returns them. Raises NonFiniteGradient before
    touching any state if a gradient is NaN/inf, so the batch can be skipped.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for tensor {name!r}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        state.ensure(name, p)
        g = grads.get(name)
        m, v = state.m[name], state.v[name]
        if g is None:
            m *= beta1
            v *= beta2
        else:
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * (g * g)
        p -= (lr / c1) * m / (np.sqrt(v / c2) + eps)
    return params
