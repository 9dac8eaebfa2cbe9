"""Training loop: Adam with cosine-annealed learning rate on the velocity MSE."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .denoiser import SphericalUNet, batch_loss
from .errors import NumericalFault
from .rng import stream
from .schedule import NoiseSchedule


@dataclass
class OptimConfig:
    lr0: float = 1e-5
    lr_min: float = 1e-7
    epochs: int = 1000
    batch_size: int = 8


@dataclass
class TrainItem:
    x0: np.ndarray     # (2, V) model-space features
    mask: np.ndarray   # (2, V) one-hot segmentation
    age_scaled: float
    gender: int


def train_model(
    model: SphericalUNet,
    items: list[TrainItem],
    sched: NoiseSchedule,
    cfg: OptimConfig,
    seed: int,
    no_mask: bool = False,
    log_fh=None,
) -> list[float]:
    """Train in place; returns per-epoch mean losses.

    Subject order, timesteps and noise draws all come from Philox streams
    keyed by (seed, epoch, batch), so reruns with the same seed reproduce the
    trajectory exactly (for a fixed torch thread count). ``no_mask`` zeroes
    the segmentation channels for the unconditional ablation.
    """
    if not items:
        raise ValueError("no training subjects")
    x0 = np.stack([it.x0 for it in items]).astype(np.float64)
    mask = np.stack([it.mask for it in items]).astype(np.float64)
    if no_mask:
        mask = np.zeros_like(mask)
    age = np.array([it.age_scaled for it in items], dtype=np.float64)
    gender = np.array([it.gender for it in items], dtype=np.int64)

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr0)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=cfg.epochs, eta_min=cfg.lr_min
    )
    n = len(items)
    losses = []
    for epoch in range(cfg.epochs):
        t0 = time.monotonic()
        perm = stream(seed, 2001, epoch).permutation(n)
        epoch_loss, n_batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            sel = perm[start : start + cfg.batch_size]
            rng = stream(seed, 2002, epoch, n_batches)
            t = rng.integers(1, sched.timesteps + 1, size=len(sel))
            eps = rng.standard_normal((len(sel),) + x0.shape[1:])
            optimizer.zero_grad(set_to_none=True)
            loss = batch_loss(
                model, x0[sel], mask[sel], age[sel], gender[sel], t, eps, sched
            )
            if not torch.isfinite(loss):
                raise NumericalFault(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}"
                )
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item()
            n_batches += 1
        lr_sched.step()
        mean_loss = epoch_loss / n_batches
        losses.append(mean_loss)
        if log_fh is not None:
            log_fh.write(
                f"epoch {epoch} loss {mean_loss:.6f} "
                f"time {time.monotonic() - t0:.2f}\n"
            )
            log_fh.flush()
    return losses
