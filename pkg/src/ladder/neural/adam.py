"""Adam with bias-corrected moment estimates (Kingma & Ba)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .net import NetParams


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


def adam_step(params: NetParams, grads: dict[str, np.ndarray], cfg: AdamConfig = AdamConfig()) -> NetParams:
    """Apply one Adam update in place and return ``params``.

    Moments are allocated lazily (zeros) for any tensor seen for the first
    time. Raises ``NonFiniteGradient`` before touching anything if a
    gradient holds NaN or inf.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    params.step += 1
    t = params.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, g in grads.items():
        p = params.tensors[name]
        m = params.adam_m.get(name)
        v = params.adam_v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        g = g.astype(p.dtype, copy=False)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        params.tensors[name] = (p - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)).astype(p.dtype, copy=False)
        params.adam_m[name] = m.astype(p.dtype, copy=False)
        params.adam_v[name] = v.astype(p.dtype, copy=False)
    return params
