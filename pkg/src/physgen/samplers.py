"""Reverse-time generation: probability-flow ODE and DPM-Solver updates.

All samplers start from standard Gaussian noise at the last schedule time,
integrate down to the first schedule time (integrating to exactly t = 0 is
singular for noise predictors), and finish with one Tweedie projection to
the clean-sample estimate.  DPM grids are uniform in half-log-SNR; the
third-order update follows the singlestep scheme with r1 = 1/3, r2 = 2/3.
"""
from __future__ import annotations

import numpy as np

from physgen.diffusion import NoiseSchedule
from physgen.models import ScoreModel

__all__ = ["sample_ode", "sample_dpm1", "sample_dpm3"]


def _predictor(model, condition):
    """Normalize a model into (predict(x, t) -> array, predictor_kind)."""
    if isinstance(model, ScoreModel):
        steps = model.schedule_steps

        def fn(x, t):
            idx = t * steps - 1.0  # fractional schedule index for the embedding
            out, _ = model.forward(x, idx, condition)
            return out.data

        return fn, model.predictor_kind
    fn, kind = model
    if kind not in ("noise", "data"):
        raise ValueError(f"contract violation: predictor kind {kind!r}")
    if condition is None:
        return fn, kind
    return (lambda x, t: fn(x, t, condition)), kind


def _eps_fn(model, condition, sched: NoiseSchedule):
    predict, kind = _predictor(model, condition)
    if kind == "noise":
        return predict

    def eps(x, t):
        alpha, sigma = sched.alpha_sigma_at(t)
        return (x - alpha * predict(x, t)) / sigma

    return eps


def _check_finite(x, where):
    if not np.all(np.isfinite(x)):
        raise RuntimeError(f"numerical failure: non-finite state at {where}")


def _tweedie_final(x, eps, sched):
    t0 = float(sched.times[0])
    alpha, sigma = sched.alpha_sigma_at(t0)
    return (x - sigma * eps(x, t0)) / alpha


def sample_ode(model, sched: NoiseSchedule, shape, steps=512, condition=None, rng=None):
    """Explicit Euler on dx/dt = f(t) x - (1/2) g^2(t) score(x, t).

    shape is the full batch shape [n, ...]; returns the Tweedie-projected
    clean-sample estimates.
    """
    if steps < 1:
        raise ValueError("contract violation: steps must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    eps = _eps_fn(model, condition, sched)
    t0 = float(sched.times[0])
    ts = np.linspace(1.0, t0, steps + 1)
    x = rng.standard_normal(shape)
    for i in range(steps):
        t = ts[i]
        dt = ts[i + 1] - ts[i]
        alpha, sigma = sched.alpha_sigma_at(t)
        score = -eps(x, t) / sigma
        x = x + dt * (sched.f_at(t) * x - 0.5 * sched.g2_at(t) * score)
        _check_finite(x, f"ode step {i} (t={t:.4f})")
    return _tweedie_final(x, eps, sched)


def _lambda_grid(sched: NoiseSchedule, m: int):
    lam_hi = float(sched.half_log_snr[0])   # t0, least noisy
    lam_lo = float(sched.half_log_snr[-1])  # t = 1, most noisy
    lams = np.linspace(lam_lo, lam_hi, m + 1)
    ts = np.interp(lams, sched.half_log_snr[::-1], sched.times[::-1])
    return lams, ts


def sample_dpm1(model, sched: NoiseSchedule, shape, m=20, condition=None, rng=None):
    """First-order exponential integrator in half-log-SNR time (m model calls).

    x_t = (alpha_t / alpha_s) x_s - sigma_t (e^h - 1) eps(x_s, s), with
    h the lambda increment of the step.
    """
    if m < 1:
        raise ValueError("contract violation: M must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    eps = _eps_fn(model, condition, sched)
    lams, ts = _lambda_grid(sched, m)
    x = rng.standard_normal(shape)
    for i in range(m):
        s, t = ts[i], ts[i + 1]
        h = lams[i + 1] - lams[i]
        a_s, _ = sched.alpha_sigma_at(s)
        a_t, sig_t = sched.alpha_sigma_at(t)
        x = (a_t / a_s) * x - sig_t * np.expm1(h) * eps(x, s)
        _check_finite(x, f"dpm1 step {i}")
    return _tweedie_final(x, eps, sched)


def sample_dpm3(model, sched: NoiseSchedule, shape, m=5, condition=None, rng=None):
    """Third-order singlestep solver; each of the m steps uses two
    intermediate model evaluations (3m calls total)."""
    if m < 1:
        raise ValueError("contract violation: M must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    eps = _eps_fn(model, condition, sched)
    r1, r2 = 1.0 / 3.0, 2.0 / 3.0
    lams, ts = _lambda_grid(sched, m)
    lam_rev = sched.half_log_snr[::-1]
    t_rev = sched.times[::-1]
    x = rng.standard_normal(shape)
    for i in range(m):
        s, t = ts[i], ts[i + 1]
        lam_s, lam_t = lams[i], lams[i + 1]
        h = lam_t - lam_s
        lam_s1 = lam_s + r1 * h
        lam_s2 = lam_s + r2 * h
        s1 = float(np.interp(lam_s1, lam_rev, t_rev))
        s2 = float(np.interp(lam_s2, lam_rev, t_rev))
        a_s, _ = sched.alpha_sigma_at(s)
        a_s1, sig_s1 = sched.alpha_sigma_at(s1)
        a_s2, sig_s2 = sched.alpha_sigma_at(s2)
        a_t, sig_t = sched.alpha_sigma_at(t)

        eps_s = eps(x, s)
        x_s1 = (a_s1 / a_s) * x - sig_s1 * np.expm1(r1 * h) * eps_s
        eps_s1 = eps(x_s1, s1)
        phi_22 = np.expm1(r2 * h) / (r2 * h) - 1.0
        x_s2 = (
            (a_s2 / a_s) * x
            - sig_s2 * np.expm1(r2 * h) * eps_s
            - (r2 / r1) * sig_s2 * phi_22 * (eps_s1 - eps_s)
        )
        eps_s2 = eps(x_s2, s2)
        phi_2 = np.expm1(h) / h - 1.0
        x = (
            (a_t / a_s) * x
            - sig_t * np.expm1(h) * eps_s
            - (1.0 / r2) * sig_t * phi_2 * (eps_s2 - eps_s)
        )
        _check_finite(x, f"dpm3 step {i}")
    return _tweedie_final(x, eps, sched)
