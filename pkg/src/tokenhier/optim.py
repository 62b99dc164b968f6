"""Minimal Adam with optional decoupled weight decay.

Operates on name -> ndarray parameter dicts; updates are in place so
callers keep a single parameter identity across steps.  Decay is
decoupled (applied directly to the weights, not through the gradient),
and skipped for entries listed in ``no_decay``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ParameterError


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("eps must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")


def adam_init(params: dict) -> dict:
    return {
        "t": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_step(params: dict, grads: dict, state: dict, cfg: AdamConfig,
              no_decay=()) -> None:
    """One update over every key in grads; params mutate in place."""
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, g in grads.items():
        if name not in params:
            raise ParameterError(f"gradient for unknown parameter {name!r}")
        g = np.asarray(g, dtype=np.float64)
        if g.shape != params[name].shape:
            raise ParameterError(
                f"gradient shape {g.shape} != param shape "
                f"{params[name].shape} for {name!r}")
        m = state["m"][name]
        v = state["v"][name]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        step = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if cfg.weight_decay and name not in no_decay:
            step = step + cfg.weight_decay * params[name]
        params[name] -= cfg.lr * step
