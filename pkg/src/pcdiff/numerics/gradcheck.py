"""Central finite-difference check of taped gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, precision, record_kinks, replay_kinks


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    entries: int

    def __float__(self) -> float:
        return self.max_rel_error


def grad_check_report(f: Callable[[], Tensor], params: Sequence[Tensor],
                      h: float = 1e-3) -> GradCheckResult:
    """Compare ``backward`` against central differences for every parameter entry.

    Runs in float64.  Both probes replay the relu/max branch pattern of the
    base point, so an entry whose +-h step would cross a kink is still judged
    against the derivative of the piece the analytic gradient came from.
    Relative error is ``|a - n| / max(|a| + |n|, floor)``.  The floor is the
    smallest derivative a central difference can resolve at this ``h``
    (1e4 float64 epsilons of the loss over ``h``); below it both numbers are
    rounding noise and the ratio says nothing.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    saved = [p.data for p in params]
    try:
        with precision(np.float64):
            for p in params:
                p.data = p.data.astype(np.float64)
                p.grad = None
            with record_kinks() as base:
                loss = f()
            loss.backward()
            analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
            floor = 1e4 * np.finfo(np.float64).eps * max(abs(loss.item()), 1.0) / h

            def value():
                with replay_kinks(base):
                    return f().item()

            worst = (0.0, "", ())
            entries = 0
            for k, (p, a) in enumerate(zip(params, analytic)):
                for idx in np.ndindex(p.shape):
                    old = p.data[idx]
                    p.data[idx] = old + h
                    fp = value()
                    p.data[idx] = old - h
                    fm = value()
                    p.data[idx] = old
                    numeric = (fp - fm) / (2 * h)
                    err = abs(a[idx] - numeric) / max(abs(a[idx]) + abs(numeric), floor)
                    entries += 1
                    if err > worst[0]:
                        worst = (err, p.name or f"param{k}", idx)
            for p in params:
                p.grad = None
    finally:
        for p, d in zip(params, saved):
            p.data = d
    return GradCheckResult(float(worst[0]), worst[1], worst[2], entries)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-3) -> float:
    return grad_check_report(f, params, h).max_rel_error
