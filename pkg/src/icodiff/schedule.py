"""Noise schedules and the velocity-parameterization algebra.

Timestep convention: t runs over 1..T for noisy states, t=0 is clean data.
``beta[t-1]`` is the variance added at step t and ``alpha_bar[t]`` the
cumulative signal fraction after t steps (``alpha_bar[0] == 1``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .featuremap import FeatureMap


@dataclass(frozen=True)
class NoiseSchedule:
    timesteps: int
    beta: np.ndarray                      # (T,)
    alpha_bar: np.ndarray                 # (T+1,)
    sqrt_alpha_bar: np.ndarray            # (T+1,)
    sqrt_one_minus_alpha_bar: np.ndarray  # (T+1,)
    posterior_var: np.ndarray             # (T,) beta_tilde_t at index t-1

    def __post_init__(self):
        if self.beta.shape != (self.timesteps,):
            raise ValueError("beta must have shape (T,)")
        if self.alpha_bar.shape != (self.timesteps + 1,):
            raise ValueError("alpha_bar must have shape (T+1,)")
        if not (self.alpha_bar[0] == 1.0):
            raise ValueError("alpha_bar[0] must be 1")
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if np.any(self.beta <= 0.0) or np.any(self.beta > 0.999):
            raise ValueError("beta values must lie in (0, 0.999]")


def cosine_schedule(timesteps: int, s: float = 0.008) -> NoiseSchedule:
    """Cosine alpha-bar schedule with betas clipped at 0.999.

    alpha_bar(t) = f(t)/f(0), f(t) = cos(((t/T + s)/(1 + s)) * pi/2)^2.
    After clipping, alpha_bar is recomputed from the clipped betas so the
    stored arrays stay mutually consistent.
    """
    if timesteps < 1:
        raise ValueError(f"timesteps must be >= 1, got {timesteps}")
    if s <= 0.0:
        raise ValueError(f"s must be > 0, got {s}")
    t = np.arange(timesteps + 1, dtype=np.float64)
    f = np.cos(((t / timesteps + s) / (1.0 + s)) * np.pi / 2.0) ** 2
    raw_alpha_bar = f / f[0]
    beta = np.clip(1.0 - raw_alpha_bar[1:] / raw_alpha_bar[:-1], None, 0.999)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    posterior_var = beta * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
    arrays = dict(
        beta=beta,
        alpha_bar=alpha_bar,
        sqrt_alpha_bar=np.sqrt(alpha_bar),
        sqrt_one_minus_alpha_bar=np.sqrt(1.0 - alpha_bar),
        posterior_var=posterior_var,
    )
    for arr in arrays.values():
        arr.setflags(write=False)
    return NoiseSchedule(timesteps=timesteps, **arrays)


def _check_t(sched: NoiseSchedule, t: int, allow_zero: bool = False) -> int:
    t = int(t)
    low = 0 if allow_zero else 1
    if not low <= t <= sched.timesteps:
        raise ValueError(f"t must be in [{low}, {sched.timesteps}], got {t}")
    return t


def _check_like(a: FeatureMap, b: FeatureMap, what: str) -> None:
    if a.order != b.order or a.data.shape != b.data.shape:
        raise ValueError(f"{what}: shape/order mismatch")


def q_sample(x0: FeatureMap, t: int, eps: FeatureMap, sched: NoiseSchedule) -> FeatureMap:
    """Forward-marginal draw: sqrt(ab_t)*x0 + sqrt(1-ab_t)*eps."""
    t = _check_t(sched, t, allow_zero=True)
    _check_like(x0, eps, "q_sample")
    out = sched.sqrt_alpha_bar[t] * x0.data + sched.sqrt_one_minus_alpha_bar[t] * eps.data
    return FeatureMap(x0.order, out)


def v_target(x0: FeatureMap, eps: FeatureMap, t: int, sched: NoiseSchedule) -> FeatureMap:
    """Velocity target: sqrt(ab_t)*eps - sqrt(1-ab_t)*x0."""
    t = _check_t(sched, t, allow_zero=True)
    _check_like(x0, eps, "v_target")
    out = sched.sqrt_alpha_bar[t] * eps.data - sched.sqrt_one_minus_alpha_bar[t] * x0.data
    return FeatureMap(x0.order, out)


def predict_x0_from_v(
    x_t: FeatureMap, v_hat: FeatureMap, t: int, sched: NoiseSchedule, clamp: bool = True
) -> FeatureMap:
    """x0_hat = sqrt(ab_t)*x_t - sqrt(1-ab_t)*v_hat, clamped to [-1, 1]."""
    t = _check_t(sched, t, allow_zero=True)
    _check_like(x_t, v_hat, "predict_x0_from_v")
    out = sched.sqrt_alpha_bar[t] * x_t.data - sched.sqrt_one_minus_alpha_bar[t] * v_hat.data
    if clamp:
        out = np.clip(out, -1.0, 1.0)
    return FeatureMap(x_t.order, out)


def predict_eps_from_v(
    x_t: FeatureMap, v_hat: FeatureMap, t: int, sched: NoiseSchedule
) -> FeatureMap:
    """eps_hat = sqrt(1-ab_t)*x_t + sqrt(ab_t)*v_hat."""
    t = _check_t(sched, t, allow_zero=True)
    _check_like(x_t, v_hat, "predict_eps_from_v")
    out = sched.sqrt_one_minus_alpha_bar[t] * x_t.data + sched.sqrt_alpha_bar[t] * v_hat.data
    return FeatureMap(x_t.order, out)


def posterior_coefficients(sched: NoiseSchedule, t: int):
    """(coef_x0, coef_xt, noise_std) of q(x_{t-1} | x_t, x0) at step t."""
    t = _check_t(sched, t)
    beta_t = sched.beta[t - 1]
    one_minus_ab_t = 1.0 - sched.alpha_bar[t]
    coef_x0 = sched.sqrt_alpha_bar[t - 1] * beta_t / one_minus_ab_t
    coef_xt = np.sqrt(1.0 - beta_t) * (1.0 - sched.alpha_bar[t - 1]) / one_minus_ab_t
    noise_std = np.sqrt(sched.posterior_var[t - 1])
    return coef_x0, coef_xt, noise_std


def reverse_step(
    x_t: FeatureMap,
    v_hat: FeatureMap,
    t: int,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    stochastic: bool = True,
) -> FeatureMap:
    """One ancestral step: posterior mean around the clamped x0_hat.

    Adds sqrt(beta_tilde_t) noise for t > 1 when ``stochastic``; the t == 1
    step is always the plain posterior mean.
    """
    t = _check_t(sched, t)
    x0_hat = predict_x0_from_v(x_t, v_hat, t, sched, clamp=True)
    coef_x0, coef_xt, noise_std = posterior_coefficients(sched, t)
    mean = coef_x0 * x0_hat.data + coef_xt * x_t.data
    if stochastic and t > 1:
        mean = mean + noise_std * rng.standard_normal(x_t.data.shape)
    return FeatureMap(x_t.order, mean)
