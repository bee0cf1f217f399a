"""First-order update rules over lists of numpy arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

OPTIMIZERS = ("sgd", "adam")


@dataclass
class OptimizerState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def optimizer_step(params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState,
                   kind: str = "adam", lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> tuple[list[np.ndarray], OptimizerState]:
    """One update. ``sgd``: ``p - lr*g``; ``adam``: bias-corrected moment estimates."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("params and grads do not match")
    step = state.step + 1
    if kind == "sgd":
        return [p - lr * g for p, g in zip(params, grads)], OptimizerState(step)
    if kind != "adam":
        raise ValueError(f"unknown optimizer {kind!r}")
    m = state.m or [np.zeros_like(p) for p in params]
    v = state.v or [np.zeros_like(p) for p in params]
    m = [beta1 * mi + (1 - beta1) * g for mi, g in zip(m, grads)]
    v = [beta2 * vi + (1 - beta2) * g * g for vi, g in zip(v, grads)]
    c1, c2 = 1 - beta1**step, 1 - beta2**step
    new = [p - lr * (mi / c1) / (np.sqrt(vi / c2) + eps) for p, mi, vi in zip(params, m, v)]
    return new, OptimizerState(step, m, v)
