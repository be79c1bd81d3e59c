"""Closed-form DDPM arithmetic: schedules, forward diffusion, reverse-step means.

Timesteps are 1-based throughout: ``t`` ranges over ``[1, T]`` and the tables
are stored 0-based, so ``schedule.alpha_bar[t - 1]`` is the cumulative product
through step ``t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

VARIANCE_MODES = ("fixed_beta", "posterior")

# Reference schedule the desk defaults are scaled from.
REFERENCE_T = 1000
REFERENCE_BETA_START = 1e-4
REFERENCE_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma_sq: np.ndarray
    variance_mode: str = "posterior"
    beta_start: float = field(default=0.0)
    beta_end: float = field(default=0.0)

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return t

    def params(self) -> dict:
        return {
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "variance_mode": self.variance_mode,
        }


def build_schedule(
    T: int,
    beta_start: float,
    beta_end: float,
    variance_mode: str = "posterior",
) -> NoiseSchedule:
    """Linear beta schedule with its derived alpha, alpha_bar and sigma^2 tables."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    if variance_mode not in VARIANCE_MODES:
        raise ValueError(f"unknown variance_mode {variance_mode!r}")
    T = int(T)
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if variance_mode == "fixed_beta":
        sigma_sq = beta.copy()
    else:
        alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
        sigma_sq = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    for arr in (beta, alpha, alpha_bar, sigma_sq):
        arr.setflags(write=False)
    return NoiseSchedule(
        T=T,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        sigma_sq=sigma_sq,
        variance_mode=variance_mode,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
    )


def desk_schedule(T: int = 100, variance_mode: str = "posterior") -> NoiseSchedule:
    """The reference linear schedule with betas rescaled by ``1000 / T``.

    Rescaling keeps the marginal noise level at ``t = k T`` roughly fixed as
    ``T`` shrinks.
    """
    scale = REFERENCE_T / T
    return build_schedule(
        T,
        min(REFERENCE_BETA_START * scale, 0.999),
        min(REFERENCE_BETA_END * scale, 0.999),
        variance_mode,
    )


def _coef(value: float, like: torch.Tensor) -> torch.Tensor:
    return torch.tensor(value, dtype=like.dtype)


def diffuse_to(
    x0: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Sample ``x_t ~ q(x_t | x_0)`` given the Gaussian draw ``eps``."""
    t = schedule.check_t(t)
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    ab = schedule.alpha_bar[t - 1]
    return _coef(math.sqrt(ab), x0) * x0 + _coef(math.sqrt(1.0 - ab), x0) * eps


def reverse_step_mean(
    x_t: torch.Tensor, eps_pred: torch.Tensor, t: int, schedule: NoiseSchedule
) -> torch.Tensor:
    """Mean of ``p(x_{t-1} | x_t)`` under the epsilon parameterisation."""
    t = schedule.check_t(t)
    if eps_pred.shape != x_t.shape:
        raise ValueError(
            f"eps_pred shape {tuple(eps_pred.shape)} != x_t shape {tuple(x_t.shape)}"
        )
    a = schedule.alpha[t - 1]
    ab = schedule.alpha_bar[t - 1]
    # a noiseless step (alpha = 1) leaves nothing to remove
    c = (1.0 - a) / math.sqrt(1.0 - ab) if a < 1.0 else 0.0
    return _coef(1.0 / math.sqrt(a), x_t) * (x_t - _coef(c, x_t) * eps_pred)


def perturbation_attenuation(t: int, schedule: NoiseSchedule) -> float:
    """Ratio of the surviving signal scale to the injected noise scale at ``t``."""
    t = schedule.check_t(t)
    ab = schedule.alpha_bar[t - 1]
    return math.sqrt(ab) / math.sqrt(1.0 - ab)


def attenuation_crossover(schedule: NoiseSchedule) -> int | None:
    """First timestep whose attenuation ratio drops below 1, or None."""
    for t in range(1, schedule.T + 1):
        if perturbation_attenuation(t, schedule) < 1.0:
            return t
    return None
