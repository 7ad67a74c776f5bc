"""Variance-preserving diffusion with the half-cosine noise schedule.

The forward marginal is q(z_tau | x) = N(alpha_tau x, sigma_tau^2 I) with
sigma_tau = (1 - cos(pi tau)) / 2 and alpha_tau = sqrt(1 - sigma_tau^2).
Everything here is float64 and stateless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ALPHA_MIN = 1e-4


@dataclass(frozen=True)
class DiffusionTime:
    tau: float

    def __post_init__(self):
        if not (0.0 <= float(self.tau) <= 1.0) or math.isnan(self.tau):
            raise ValueError(f"diffusion time must lie in [0, 1], got {self.tau!r}")

    def __float__(self):
        return float(self.tau)


@dataclass(frozen=True)
class SchedulePoint:
    tau: float
    sigma: float
    alpha: float

    @classmethod
    def at(cls, tau: float) -> "SchedulePoint":
        return cls(_check(tau), sigma(tau), alpha(tau))


@dataclass(frozen=True)
class StepCoefficients:
    """Multipliers of one reverse step z_s = f z_tau - g eps_hat + h eps."""

    f: float
    g: float
    h: float


def _check(tau) -> float:
    return float(DiffusionTime(float(tau)))


def sigma(tau) -> float:
    tau = _check(tau)
    return (1.0 - math.cos(math.pi * tau)) / 2.0


def alpha(tau, clamp: bool = False) -> float:
    """Mean coefficient sqrt(1 - sigma^2).

    With ``clamp=True`` the value is floored at ``ALPHA_MIN`` so that ratios
    involving tau = 1 stay finite; the unclamped value is exactly
    variance-preserving.
    """
    s = sigma(tau)
    a = math.sqrt(max(1.0 - s * s, 0.0))
    return max(a, ALPHA_MIN) if clamp else a


def alpha_ratio(tau, s) -> float:
    """alpha_{tau|s} = alpha_tau / alpha_s (clamped alphas)."""
    tau, s = _check(tau), _check(s)
    if s > tau:
        raise ValueError(f"need s <= tau, got s={s}, tau={tau}")
    return alpha(tau, clamp=True) / alpha(s, clamp=True)


def sigma_cond_sq(tau, s) -> float:
    """sigma^2_{tau|s} = sigma_tau^2 - alpha_{tau|s}^2 sigma_s^2, floored at 0."""
    a = alpha_ratio(tau, s)
    value = sigma(tau) ** 2 - a * a * sigma(s) ** 2
    return max(value, 0.0)


def reverse_coefficients(tau, s) -> StepCoefficients:
    """Coefficients of the ancestral step from tau down to s.

    Obtained by substituting x_hat = (z - sigma_tau eps_hat) / alpha_tau into
    the Gaussian posterior q(z_s | z_tau, x):

        f = 1 / alpha_{tau|s}
        g = sigma^2_{tau|s} / (alpha_{tau|s} sigma_tau)
        h = sqrt(sigma^2_{tau|s} sigma_s^2 / sigma_tau^2)

    h is the posterior standard deviation, so eps must be unit variance.
    """
    tau, s = _check(tau), _check(s)
    if tau == 0.0:
        raise ValueError("reverse step from tau=0 is undefined")
    if s >= tau:
        raise ValueError(f"need s < tau, got s={s}, tau={tau}")
    a_ts = alpha_ratio(tau, s)
    var_ts = sigma_cond_sq(tau, s)
    sig_t = sigma(tau)
    sig_s = sigma(s)
    f = 1.0 / a_ts
    g = var_ts / (a_ts * sig_t)
    h = math.sqrt(var_ts * sig_s * sig_s / (sig_t * sig_t))
    return StepCoefficients(f, g, h)


def step_grid(steps: int, start_index: int | None = None) -> list[tuple[float, float]]:
    """(tau, s) pairs of the uniform reverse grid, from ``start_index``/T down to 0."""
    if steps < 1:
        raise ValueError("number of steps must be >= 1")
    if start_index is None:
        start_index = steps
    return [((i + 1) / steps, i / steps) for i in range(start_index - 1, -1, -1)]


def sigma_array(tau: np.ndarray) -> np.ndarray:
    tau = np.asarray(tau, dtype=np.float64)
    if np.any((tau < 0) | (tau > 1)) or np.any(np.isnan(tau)):
        raise ValueError("diffusion times must lie in [0, 1]")
    return (1.0 - np.cos(np.pi * tau)) / 2.0


def alpha_array(tau: np.ndarray) -> np.ndarray:
    s = sigma_array(tau)
    return np.sqrt(np.clip(1.0 - s * s, 0.0, None))
