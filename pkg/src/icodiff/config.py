"""Run configuration: one JSON file, profile defaults, flag overrides.

Two built-in profiles: ``desk`` (order 3, small widths, short training;
everything the test suite runs) and ``paper`` (order 6, full-size widths,
lr 1e-5 over 1000 epochs). A config file selects a profile and overrides
individual keys; command-line flags win over the file.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass

from .denoiser import DenoiserConfig
from .sampling import SamplerConfig
from .synthdata import CohortConfig
from .train import OptimConfig


class ConfigError(ValueError):
    pass


_PROFILES: dict[str, dict] = {
    "desk": {
        "mesh_order": 3,
        "seed": 7,
        "schedule": {"timesteps": 1000, "s": 0.008},
        "denoiser": {
            "in_channels": 4,
            "out_channels": 2,
            "base_order": 3,
            "min_order": 1,
            "widths": [8, 16, 32],
            "blocks_per_level": 1,
            "attention_orders": [1, 2],
            "embed_dim": 64,
        },
        "optimizer": {"lr0": 1e-3, "lr_min": 1e-5, "epochs": 160, "batch_size": 8},
        "sampler": {"t_noise": 500, "n_samples": 10, "stochastic": True},
        "cohort": {
            "scale": 0.125,
            "roi_count": 34,
            "atrophy_rois": [0, 1, 2, 3, 4],
            "atrophy_mci_mm": 0.25,
            "atrophy_ad_mm": 0.5,
            "age_range": [55.0, 90.0],
            "age_slope_mm": -0.01,
            "noise_sd_mm": 0.15,
            "smooth_rings": 2,
        },
    },
    "paper": {
        "mesh_order": 6,
        "seed": 7,
        "schedule": {"timesteps": 1000, "s": 0.008},
        "denoiser": {
            "in_channels": 4,
            "out_channels": 2,
            "base_order": 6,
            "min_order": 2,
            "widths": [16, 32, 64, 96, 128],
            "blocks_per_level": 2,
            "attention_orders": [2, 3],
            "embed_dim": 64,
        },
        "optimizer": {"lr0": 1e-5, "lr_min": 1e-7, "epochs": 1000, "batch_size": 8},
        "sampler": {"t_noise": 500, "n_samples": 10, "stochastic": True},
        "cohort": {
            "scale": 1.0,
            "roi_count": 34,
            "atrophy_rois": [0, 1, 2, 3, 4],
            "atrophy_mci_mm": 0.25,
            "atrophy_ad_mm": 0.5,
            "age_range": [55.0, 90.0],
            "age_slope_mm": -0.01,
            "noise_sd_mm": 0.15,
            "smooth_rings": 2,
        },
    },
}


@dataclass
class RunConfig:
    mesh_order: int
    seed: int
    schedule_timesteps: int
    schedule_s: float
    denoiser: DenoiserConfig
    optimizer: OptimConfig
    sampler: SamplerConfig
    cohort: CohortConfig
    cohort_scale: float


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where} must be a mapping")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def _build(raw: dict) -> RunConfig:
    try:
        denoiser = DenoiserConfig.from_dict(raw["denoiser"])
        opt = raw["optimizer"]
        optimizer = OptimConfig(
            lr0=float(opt["lr0"]), lr_min=float(opt["lr_min"]),
            epochs=int(opt["epochs"]), batch_size=int(opt["batch_size"]),
        )
        samp = raw["sampler"]
        sampler = SamplerConfig(
            t_noise=int(samp["t_noise"]), n_samples=int(samp["n_samples"]),
            rng_seed=int(raw["seed"]), stochastic=bool(samp["stochastic"]),
        )
        coh = dict(raw["cohort"])
        scale = float(coh.pop("scale"))
        cohort = CohortConfig(
            order=int(raw["mesh_order"]), seed=int(raw["seed"]),
            roi_count=int(coh["roi_count"]),
            atrophy_rois=tuple(coh["atrophy_rois"]),
            atrophy_mci_mm=float(coh["atrophy_mci_mm"]),
            atrophy_ad_mm=float(coh["atrophy_ad_mm"]),
            age_range=tuple(coh["age_range"]),
            age_slope_mm=float(coh["age_slope_mm"]),
            noise_sd_mm=float(coh["noise_sd_mm"]),
            smooth_rings=int(coh["smooth_rings"]),
        ).scaled(scale)
    except (KeyError, TypeError, ValueError) as exc:
        key = exc.args[0] if isinstance(exc, KeyError) else exc
        raise ConfigError(f"invalid config value: {key}") from exc
    cfg = RunConfig(
        mesh_order=int(raw["mesh_order"]),
        seed=int(raw["seed"]),
        schedule_timesteps=int(raw["schedule"]["timesteps"]),
        schedule_s=float(raw["schedule"]["s"]),
        denoiser=denoiser,
        optimizer=optimizer,
        sampler=sampler,
        cohort=cohort,
        cohort_scale=scale,
    )
    if cfg.denoiser.base_order != cfg.mesh_order:
        raise ConfigError("denoiser.base_order must equal mesh_order")
    if cfg.sampler.t_noise > cfg.schedule_timesteps:
        raise ConfigError("sampler.t_noise exceeds schedule.timesteps")
    return cfg


def load_config(path=None, profile: str = "desk",
                overrides: dict | None = None) -> RunConfig:
    """Load a RunConfig from a JSON file layered over a named profile.

    The file may set ``"profile"`` to pick its base; any other key must match
    the profile schema (unknown keys are rejected by name). ``overrides`` is
    a flat {key: value} mapping applied last (e.g. from CLI flags).
    """
    user: dict = {}
    if path is not None:
        with open(path) as fh:
            try:
                user = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        profile = user.pop("profile", profile)
    if profile not in _PROFILES:
        raise ConfigError(f"unknown profile: {profile}")
    raw = _merge(_PROFILES[profile], user)
    raw = _merge(raw, overrides or {})
    return _build(raw)


def profile_json(profile: str = "desk") -> str:
    return json.dumps({"profile": profile, **_PROFILES[profile]}, indent=2)
