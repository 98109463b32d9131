"""Noise schedule and closed-form forward/reverse step statistics.

Everything here is plain numpy in float64. The tables are built once and
treated as read-only lookups afterwards; the training loop indexes them
with integer diffusion steps in ``1..T``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DiffusionSchedule:
    """Precomputed per-step tables, indexed by ``t - 1``.

    Attributes:
        T: number of diffusion steps.
        beta: forward variances ``beta_1..beta_T``.
        alpha_bar: cumulative products ``prod_{s<=t} (1 - beta_s)``.
        beta_tilde: posterior variances, with ``alpha_bar_0 = 1`` so that
            ``beta_tilde_1 == 0``.
    """

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray
    beta_1: float
    beta_T: float

    def alpha_bar_prev(self, t: int) -> float:
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])

    def check_step(self, t: int, lo: int = 1) -> None:
        if not (lo <= t <= self.T):
            raise ValueError(f"diffusion step {t} outside [{lo}, {self.T}]")


def build_schedule(T: int = 50, beta_1: float = 1e-4, beta_T: float = 0.5) -> DiffusionSchedule:
    """Quadratic schedule: interpolate ``sqrt(beta)`` linearly, then square.

    ``beta_t = ((T-t)/(T-1) * sqrt(beta_1) + (t-1)/(T-1) * sqrt(beta_T))**2``
    """
    if int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T}")
    T = int(T)
    if not (0.0 < beta_1 < 1.0 and 0.0 < beta_T < 1.0):
        raise ValueError("beta endpoints must lie in (0, 1)")
    if beta_T < beta_1:
        raise ValueError("beta_T must be >= beta_1")

    t = np.arange(1, T + 1, dtype=np.float64)
    w_hi = (t - 1.0) / (T - 1.0)
    w_lo = (T - t) / (T - 1.0)
    beta = (w_lo * np.sqrt(beta_1) + w_hi * np.sqrt(beta_T)) ** 2
    # endpoints bit-exact regardless of sqrt/square rounding
    beta[0] = beta_1
    beta[-1] = beta_T

    alpha_bar = np.cumprod(1.0 - beta)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    beta_tilde = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta

    for arr in (beta, alpha_bar, beta_tilde):
        arr.setflags(write=False)
    return DiffusionSchedule(T, beta, alpha_bar, beta_tilde, float(beta_1), float(beta_T))


def _same_shape(*arrays: np.ndarray) -> None:
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ValueError(f"shape mismatch: {shape} vs {a.shape}")


def forward_sample(x0, t: int, eps, sched: DiffusionSchedule) -> np.ndarray:
    """Corrupt ``x0`` directly to step ``t``: ``sqrt(a_t) x0 + sqrt(1 - a_t) eps``."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _same_shape(x0, eps)
    sched.check_step(t)
    a = sched.alpha_bar[t - 1]
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


def posterior_mean_from_x0(x0, xt, t: int, sched: DiffusionSchedule) -> np.ndarray:
    """Mean of q(x_{t-1} | x_t, x_0); defined for ``2 <= t <= T``."""
    x0 = np.asarray(x0, dtype=np.float64)
    xt = np.asarray(xt, dtype=np.float64)
    _same_shape(x0, xt)
    sched.check_step(t, lo=2)
    b = sched.beta[t - 1]
    a = sched.alpha_bar[t - 1]
    a_prev = sched.alpha_bar_prev(t)
    c0 = np.sqrt(a_prev) * b / (1.0 - a)
    ct = np.sqrt(1.0 - b) * (1.0 - a_prev) / (1.0 - a)
    return c0 * x0 + ct * xt


def posterior_mean_from_eps(xt, eps_hat, t: int, sched: DiffusionSchedule) -> np.ndarray:
    """Reverse-step mean expressed through a noise estimate."""
    xt = np.asarray(xt, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    _same_shape(xt, eps_hat)
    sched.check_step(t)
    b = sched.beta[t - 1]
    a = sched.alpha_bar[t - 1]
    return (xt - b / np.sqrt(1.0 - a) * eps_hat) / np.sqrt(1.0 - b)


def reverse_step(xt, eps_hat, t: int, z, sched: DiffusionSchedule) -> np.ndarray:
    """One ancestral sampling step x_t -> x_{t-1}. At ``t == 1`` no noise is added."""
    z = np.asarray(z, dtype=np.float64)
    mean = posterior_mean_from_eps(xt, eps_hat, t, sched)
    _same_shape(mean, z)
    if t == 1:
        return mean
    return mean + np.sqrt(sched.beta_tilde[t - 1]) * z
