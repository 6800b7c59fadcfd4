"""Variance-preserving forward diffusion: schedule tables and predictor algebra.

The schedule is a discrete table of N rows standing for t in (0, 1], with
t_i = (i + 1) / N.  sigma follows a sigmoid ramp, alpha = sqrt(1 - sigma^2),
and the training weight w equals g^2 from the forward SDE, computed by
central differences on the table (one-sided at the ends).  Samplers that need
off-grid times interpolate the half-log-SNR lambda linearly and recover
(alpha, sigma) from it, which keeps alpha^2 + sigma^2 = 1 exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from physgen.tensor import Tensor

__all__ = [
    "NoiseSchedule",
    "build_schedule",
    "forward_sample",
    "data_from_noise",
    "noise_from_data",
    "score_from_noise",
]

SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class NoiseSchedule:
    steps: int
    sigma: np.ndarray
    alpha: np.ndarray
    half_log_snr: np.ndarray
    weight: np.ndarray
    times: np.ndarray = field(repr=False, default=None)

    def t_of(self, i: int) -> float:
        return float(self.times[i])

    # continuous accessors (linear interpolation of lambda over the table) ----
    def lam_at(self, t):
        return np.interp(t, self.times, self.half_log_snr)

    def alpha_sigma_at(self, t):
        lam = self.lam_at(t)
        sigma = np.sqrt(expit(-2.0 * lam))
        alpha = np.sqrt(expit(2.0 * lam))
        return alpha, sigma

    def dlam_dt(self, t):
        i = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.steps - 2)
        return (self.half_log_snr[i + 1] - self.half_log_snr[i]) / (
            self.times[i + 1] - self.times[i]
        )

    def f_at(self, t):
        """Drift coefficient of the forward SDE, d log(alpha)/dt."""
        _, sigma = self.alpha_sigma_at(t)
        return sigma**2 * self.dlam_dt(t)

    def g2_at(self, t):
        """Squared diffusion coefficient; equals -2 sigma^2 dlambda/dt."""
        _, sigma = self.alpha_sigma_at(t)
        return -2.0 * sigma**2 * self.dlam_dt(t)


def build_schedule(steps: int = 1000, lo: float = -5.0, hi: float = 5.0) -> NoiseSchedule:
    """sigma_t = sigmoid(linspace(lo, hi, steps)), alpha_t = sqrt(1 - sigma_t^2)."""
    if steps < 2:
        raise ValueError(f"contract violation: steps must be >= 2, got {steps}")
    if not lo < hi:
        raise ValueError(f"contract violation: need lo < hi, got {lo}, {hi}")
    sigma = expit(np.linspace(lo, hi, steps))
    alpha = np.sqrt(1.0 - sigma**2)
    lam = np.log(alpha / sigma)
    times = (np.arange(steps) + 1.0) / steps

    # w(t) = g^2(t) = d(sigma^2)/dt - 2 d(log alpha)/dt sigma^2, central in t
    sig2 = sigma**2
    log_alpha = np.log(alpha)
    dsig2 = np.gradient(sig2, times)
    dlog_alpha = np.gradient(log_alpha, times)
    weight = dsig2 - 2.0 * dlog_alpha * sig2

    return NoiseSchedule(
        steps=steps, sigma=sigma, alpha=alpha, half_log_snr=lam, weight=weight, times=times
    )


def _coeffs(sched: NoiseSchedule, t: int):
    alpha = float(sched.alpha[t])
    sigma = float(sched.sigma[t])
    return alpha, max(sigma, SIGMA_FLOOR)


def forward_sample(x0, t: int, eps, sched: NoiseSchedule):
    """x_t = alpha_t x0 + sigma_t eps (closed-form forward marginal)."""
    x0d = x0.data if isinstance(x0, Tensor) else np.asarray(x0)
    epsd = eps.data if isinstance(eps, Tensor) else np.asarray(eps)
    if x0d.shape != epsd.shape:
        raise ValueError(f"shape mismatch: x0 {x0d.shape} vs eps {epsd.shape}")
    alpha, sigma = float(sched.alpha[t]), float(sched.sigma[t])
    return alpha * x0 + sigma * eps


def data_from_noise(xt, eps_pred, t: int, sched: NoiseSchedule):
    """Tweedie conversion: x0_hat = (x_t - sigma_t eps_hat) / alpha_t."""
    alpha, sigma = _coeffs(sched, t)
    return (xt - sigma * eps_pred) * (1.0 / alpha)


def noise_from_data(xt, x0_pred, t: int, sched: NoiseSchedule):
    """Inverse Tweedie conversion: eps_hat = (x_t - alpha_t x0_hat) / sigma_t."""
    alpha, sigma = _coeffs(sched, t)
    if float(sched.sigma[t]) <= 0.0:
        raise ValueError("domain error: sigma_t = 0")
    return (xt - alpha * x0_pred) * (1.0 / sigma)


def score_from_noise(eps_pred, t: int, sched: NoiseSchedule):
    """The score estimate implied by a noise prediction: -eps_hat / sigma_t."""
    _, sigma = _coeffs(sched, t)
    if float(sched.sigma[t]) <= 0.0:
        raise ValueError("domain error: sigma_t = 0")
    return eps_pred * (-1.0 / sigma)
