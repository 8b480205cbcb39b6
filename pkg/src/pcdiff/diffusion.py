"""Gaussian diffusion over point sets: schedule, forward noising, reverse sampling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import Tensor, ShapeError, mean, mul, sub

# eps_fn(x_t, t) -> predicted noise, shape of x_t
EpsFn = Callable[[np.ndarray, int], "Tensor | np.ndarray"]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step constants, stored 0-based: ``beta[t - 1]`` is beta_t."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"schedule/beta": self.beta.astype(np.float32)}


def make_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear beta ramp; sigma_t^2 = beta_t."""
    if T < 1:
        raise ValueError("T must be at least 1")
    if not 0 < beta_min <= beta_max < 1:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    beta = np.linspace(beta_min, beta_max, T) if T > 1 else np.array([beta_min])
    return _from_beta(beta)


def _from_beta(beta: np.ndarray) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta, alpha, np.cumprod(alpha), np.sqrt(beta))


def respace(schedule: NoiseSchedule, steps: int):
    """Evenly strided subset of timesteps and the chain that jumps between them.

    Returns ``(timesteps, sub)`` where ``timesteps[i]`` is the original 1-based
    step visited at position ``i`` and ``sub`` carries betas recomputed from
    the original alpha_bar so that the jumps match the trained marginals.  With
    ``steps == T`` the original schedule is returned unchanged.
    """
    T = schedule.T
    if not 1 <= steps <= T:
        raise ValueError(f"steps={steps} must lie in [1, {T}]")
    if steps == T:
        return np.arange(1, T + 1), schedule
    ts = np.unique(np.round(np.linspace(T, 1, steps)).astype(np.int64))
    ab = schedule.alpha_bar[ts - 1]
    prev = np.concatenate([[1.0], ab[:-1]])
    sub_beta = 1.0 - ab / prev
    return ts, _from_beta(sub_beta)


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form draw of x_t given x_0 and standard-normal ``eps``."""
    schedule.check_t(t)
    if np.shape(x0) != np.shape(eps):
        raise ShapeError(f"q_sample: x0 {np.shape(x0)} vs eps {np.shape(eps)}")
    ab = schedule.alpha_bar[t - 1]
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(np.float32)


def training_loss(eps_fn: EpsFn, x0: np.ndarray, t: int, eps: np.ndarray,
                  schedule: NoiseSchedule) -> Tensor:
    """Mean over all N*D entries of (eps - eps_theta(x_t, t))^2."""
    x_t = q_sample(x0, t, eps, schedule)
    pred = eps_fn(x_t, t)
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    if pred.shape != np.shape(eps):
        raise ShapeError(f"denoiser output {pred.shape} does not match noise {np.shape(eps)}")
    diff = sub(Tensor(eps), pred)
    return mean(mul(diff, diff))


@dataclass
class DiffusionState:
    x: np.ndarray
    t: int

    def __post_init__(self):
        if self.t < 0:
            raise ValueError("t must be non-negative")


def reverse_step(eps_fn: EpsFn, state: DiffusionState, schedule: NoiseSchedule,
                 rng: np.random.Generator, model_t: int | None = None) -> DiffusionState:
    """One ancestral step x_t -> x_{t-1} under ``schedule``.

    ``model_t`` is the timestep handed to the network when ``schedule`` is a
    respaced chain; it defaults to ``state.t``.
    """
    t = state.t
    schedule.check_t(t)
    pred = eps_fn(state.x, state.t if model_t is None else model_t)
    eps_hat = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    a = schedule.alpha[t - 1]
    b = schedule.beta[t - 1]
    ab = schedule.alpha_bar[t - 1]
    mu = (state.x - b / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)
    if t > 1:
        mu = mu + schedule.sigma[t - 1] * rng.standard_normal(state.x.shape)
    return DiffusionState(mu.astype(np.float32), t - 1)


def sample(eps_fn: EpsFn, n_out: int, d: int, steps: int, schedule: NoiseSchedule,
           rng: np.random.Generator, callback: Callable[[DiffusionState], None] | None = None
           ) -> np.ndarray:
    """Run the reverse chain from standard normal noise of shape ``(n_out, d)``."""
    if steps > schedule.T:
        raise ValueError(f"steps={steps} exceeds the trained T={schedule.T}")
    ts, sub_sched = respace(schedule, steps)
    state = DiffusionState(rng.standard_normal((n_out, d)).astype(np.float32), len(ts))
    while state.t > 0:
        state = reverse_step(eps_fn, state, sub_sched, rng, model_t=int(ts[state.t - 1]))
        if callback is not None:
            callback(state)
    return state.x
