import numpy as np
import pytest
import torch

from icodiff.denoiser import DenoiserConfig, SphericalUNet
from icodiff.errors import NumericalFault
from icodiff.rng import stream
from icodiff.schedule import cosine_schedule
from icodiff.train import OptimConfig, TrainItem, train_model

TINY = DenoiserConfig(base_order=1, min_order=0, widths=(4, 8),
                      blocks_per_level=1, embed_dim=8,
                      attention_orders=frozenset({0}))


def make_items(n, seed=0):
    rng = stream(seed, 0)
    items = []
    for i in range(n):
        gyral = rng.standard_normal(42) > 0
        mask = np.stack([gyral, ~gyral]).astype(np.float32)
        x0 = np.clip(rng.standard_normal((2, 42)) * 0.3, -0.9, 0.9).astype(np.float32)
        items.append(TrainItem(x0=x0, mask=mask,
                               age_scaled=float(rng.uniform(0.5, 0.9)),
                               gender=i % 2))
    return items


def test_training_reduces_loss_and_logs(tmp_path):
    sched = cosine_schedule(100)
    model = SphericalUNet(TINY, init_seed=1)
    cfg = OptimConfig(lr0=2e-3, lr_min=1e-5, epochs=20, batch_size=4)
    log = tmp_path / "train.log"
    with open(log, "w") as fh:
        losses = train_model(model, make_items(8), sched, cfg, seed=3, log_fh=fh)
    assert len(losses) == 20
    assert losses[-1] < losses[0]
    lines = log.read_text().strip().splitlines()
    assert len(lines) == 20
    assert lines[5].split()[:2] == ["epoch", "5"]


def test_training_deterministic_given_seed():
    sched = cosine_schedule(100)
    cfg = OptimConfig(lr0=1e-3, lr_min=1e-5, epochs=5, batch_size=4)
    runs = []
    for _ in range(2):
        model = SphericalUNet(TINY, init_seed=2)
        losses = train_model(model, make_items(6), sched, cfg, seed=9)
        runs.append((losses, [p.detach().clone() for p in model.parameters()]))
    assert runs[0][0] == runs[1][0]
    assert all(torch.equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))


def test_training_seed_changes_trajectory():
    sched = cosine_schedule(100)
    cfg = OptimConfig(lr0=1e-3, lr_min=1e-5, epochs=3, batch_size=4)
    model_a = SphericalUNet(TINY, init_seed=2)
    la = train_model(model_a, make_items(6), sched, cfg, seed=1)
    model_b = SphericalUNet(TINY, init_seed=2)
    lb = train_model(model_b, make_items(6), sched, cfg, seed=2)
    assert la != lb


def test_no_mask_ablation_changes_training():
    sched = cosine_schedule(100)
    cfg = OptimConfig(lr0=1e-3, lr_min=1e-5, epochs=3, batch_size=4)
    model_a = SphericalUNet(TINY, init_seed=4)
    la = train_model(model_a, make_items(6), sched, cfg, seed=5, no_mask=False)
    model_b = SphericalUNet(TINY, init_seed=4)
    lb = train_model(model_b, make_items(6), sched, cfg, seed=5, no_mask=True)
    assert la != lb


def test_training_faults_on_nonfinite():
    sched = cosine_schedule(100)
    model = SphericalUNet(TINY, init_seed=1)
    with torch.no_grad():
        model.stem.weight.fill_(float("nan"))
    cfg = OptimConfig(lr0=1e-3, lr_min=1e-5, epochs=1, batch_size=4)
    with pytest.raises(NumericalFault):
        train_model(model, make_items(4), sched, cfg, seed=0)


def test_training_requires_subjects():
    sched = cosine_schedule(100)
    model = SphericalUNet(TINY, init_seed=1)
    with pytest.raises(ValueError):
        train_model(model, [], sched, OptimConfig(), seed=0)
