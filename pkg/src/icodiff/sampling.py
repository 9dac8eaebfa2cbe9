"""Ancestral samplers: generation from pure noise and partial-noise reconstruction.

All reconstruction noise comes from Philox streams keyed by (seed, stage,
sample index, timestep), so the n_samples trajectories are independent of
evaluation order and can be batched or parallelized freely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoiser import SphericalUNet, predict_v_batch
from .errors import NumericalFault
from .featuremap import FeatureMap
from .rng import stream
from .schedule import NoiseSchedule, posterior_coefficients, q_sample

_STAGE_INIT = 0
_STAGE_STEP = 1


@dataclass
class SamplerConfig:
    t_noise: int = 500
    n_samples: int = 10
    rng_seed: int = 0
    stochastic: bool = True

    def validate(self, sched: NoiseSchedule) -> None:
        if not 1 <= self.t_noise <= sched.timesteps:
            raise ValueError(
                f"t_noise must be in [1, {sched.timesteps}], got {self.t_noise}"
            )
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


def _step_batch(x, v_hat, t, sched, noise, stochastic):
    """Posterior step on a (B, C, V) stack; noise is pre-drawn or None."""
    coef_x0, coef_xt, noise_std = posterior_coefficients(sched, t)
    sab = sched.sqrt_alpha_bar[t]
    somab = sched.sqrt_one_minus_alpha_bar[t]
    x0_hat = np.clip(sab * x - somab * v_hat, -1.0, 1.0)
    out = coef_x0 * x0_hat + coef_xt * x
    if stochastic and t > 1:
        out = out + noise_std * noise
    if not np.all(np.isfinite(out)):
        raise NumericalFault(f"non-finite sampler state at t={t}")
    return out.astype(np.float32)


def _run_reverse(model, x, mask, age, gender, t_start, sched, noise_fn, stochastic):
    """Iterate reverse steps from t_start down to 1 on a (B, 2, V) stack."""
    mask_b = np.broadcast_to(mask, x.shape).astype(np.float32)
    for t in range(t_start, 0, -1):
        v_hat = predict_v_batch(model, x, mask_b, t, age, gender)
        noise = noise_fn(t) if (stochastic and t > 1) else None
        x = _step_batch(x, v_hat, t, sched, noise, stochastic)
    return x


def sample_from_noise(
    mask: FeatureMap,
    age_scaled: float,
    gender: int,
    model: SphericalUNet,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    stochastic: bool = True,
) -> FeatureMap:
    """Draw x_T ~ N(0, I) and denoise it to an x_0 estimate."""
    n_ch = model.config.out_channels
    shape = (1, n_ch, mask.n_vertices)
    x = rng.standard_normal(shape).astype(np.float32)
    x = _run_reverse(
        model, x, mask.data[None], age_scaled, gender, sched.timesteps, sched,
        lambda t: rng.standard_normal(shape), stochastic,
    )
    return FeatureMap(mask.order, x[0])


def reconstruct(
    x0_obs: FeatureMap,
    mask: FeatureMap,
    age_scaled: float,
    gender: int,
    model: SphericalUNet,
    sched: NoiseSchedule,
    cfg: SamplerConfig,
) -> list[FeatureMap]:
    """Noise the observed map to t_noise and denoise back, n_samples times.

    Sample i's initial noising draw comes from stream (seed, INIT, i) and its
    step-t ancestral noise from stream (seed, STEP, i, t). All samples run as
    one batch.
    """
    cfg.validate(sched)
    n, shape = cfg.n_samples, x0_obs.data.shape
    init = np.stack([
        q_sample(
            x0_obs,
            cfg.t_noise,
            FeatureMap(
                x0_obs.order,
                stream(cfg.rng_seed, _STAGE_INIT, i).standard_normal(shape),
            ),
            sched,
        ).data
        for i in range(n)
    ])

    def noise_fn(t):
        return np.stack([
            stream(cfg.rng_seed, _STAGE_STEP, i, t).standard_normal(shape)
            for i in range(n)
        ])

    out = _run_reverse(
        model, init, mask.data[None], age_scaled, gender, cfg.t_noise, sched,
        noise_fn, cfg.stochastic,
    )
    return [FeatureMap(x0_obs.order, out[i]) for i in range(n)]
