"""SGD with momentum and Adam, updating parameter tensors in place."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    momentum: float = 0.0
    step_count: int = 0
    first: list[np.ndarray] = field(default_factory=list)
    second: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd-momentum"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def optimizer_step(state: OptimizerState, params: list[Tensor]) -> None:
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {p.name or i!r} has no gradient")
    if not state.first:
        state.first = [np.zeros_like(p.data) for p in params]
        if state.kind == "adam":
            state.second = [np.zeros_like(p.data) for p in params]
    elif len(state.first) != len(params):
        raise ValueError(f"optimizer holds {len(state.first)} buffers for {len(params)} parameters")

    state.step_count += 1
    lr = state.learning_rate
    if state.kind == "sgd-momentum":
        for p, m in zip(params, state.first):
            m *= state.momentum
            m += p.grad
            p.data -= (lr * m).astype(p.data.dtype)
            p.grad = None
        return

    b1, b2, t = state.beta1, state.beta2, state.step_count
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, m, v in zip(params, state.first, state.second):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps_opt)
        p.data -= step.astype(p.data.dtype)
        p.grad = None
