"""End-to-end orchestration shared by the CLI and the test suite.

A run is: gen-data -> train -> reconstruct -> score -> classify / eval. Every
stage is a pure function of (files on disk, config, seed).
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .denoiser import SphericalUNet, load_checkpoint, save_checkpoint
from .featuremap import FeatureMap, load_feature_map
from .icosphere import ROIAtlas, build_icosphere, load_atlas
from .normative import (
    abnormal_score,
    denormalize_thickness,
    mse,
    roi_means,
    ssim_sphere,
    welch_p_value,
)
from .errors import DegenerateReferenceError
from .sampling import SamplerConfig, reconstruct
from .schedule import cosine_schedule
from .synthdata import SubjectRecord, load_manifest, load_subject
from .train import TrainItem, train_model

TEST_GROUPS = ("cn_test", "mci", "ad")


@dataclass
class Dataset:
    root: Path
    atlas: ROIAtlas
    subjects: list[SubjectRecord]

    def by_group(self, *groups: str) -> list[SubjectRecord]:
        return [s for s in self.subjects if s.group in groups]

    def get(self, subject_id: str) -> SubjectRecord:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise KeyError(f"unknown subject id: {subject_id}")


def load_dataset(dataset_dir) -> Dataset:
    root = Path(dataset_dir)
    atlas = load_atlas(root / "atlas.icra")
    subjects = [load_subject(root, row) for row in load_manifest(root)]
    return Dataset(root=root, atlas=atlas, subjects=subjects)


def train_from_config(cfg: RunConfig, dataset: Dataset, checkpoint_path,
                      no_mask: bool = False, log_path=None):
    """Train on CN-train subjects only and write an ICKP checkpoint."""
    sched = cosine_schedule(cfg.schedule_timesteps, cfg.schedule_s)
    model = SphericalUNet(cfg.denoiser, init_seed=cfg.seed)
    items = [
        TrainItem(x0=s.features.data, mask=s.mask.data,
                  age_scaled=s.age_scaled, gender=s.gender)
        for s in dataset.by_group("cn_train")
    ]
    log_fh = open(log_path, "w") if log_path is not None else None
    try:
        losses = train_model(model, items, sched, cfg.optimizer, cfg.seed,
                             no_mask=no_mask, log_fh=log_fh)
    finally:
        if log_fh is not None:
            log_fh.close()
    metadata = {
        "no_mask": no_mask,
        "schedule": {"timesteps": cfg.schedule_timesteps, "s": cfg.schedule_s},
        "train_seed": cfg.seed,
        "epochs": cfg.optimizer.epochs,
        "final_loss": losses[-1],
    }
    save_checkpoint(model, checkpoint_path, metadata)
    return model, losses


def open_checkpoint(checkpoint_path):
    """Load (model, metadata, schedule) from an ICKP file."""
    model, metadata = load_checkpoint(checkpoint_path)
    sched_meta = metadata.get("schedule", {"timesteps": 1000, "s": 0.008})
    sched = cosine_schedule(int(sched_meta["timesteps"]), float(sched_meta["s"]))
    return model, metadata, sched


def recon_path(samples_dir, subject_id: str, k: int) -> Path:
    return Path(samples_dir) / f"recon_{subject_id}_{k:02d}.icsf"


def reconstruct_subjects(model, sched, dataset: Dataset, subject_ids,
                         sampler: SamplerConfig, out_dir, no_mask: bool = False,
                         workers: int = 1) -> None:
    """Write n_samples reconstructions per subject to ``out_dir``.

    The per-subject sampler seed folds the subject's own seed into the run
    seed, so subjects are independent and may be reconstructed in parallel.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def run_one(sid: str) -> None:
        from .featuremap import save_feature_map
        from .rng import fold

        rec = dataset.get(sid)
        mask = rec.mask
        if no_mask:
            mask = FeatureMap(mask.order, np.zeros_like(mask.data))
        cfg = SamplerConfig(
            t_noise=sampler.t_noise, n_samples=sampler.n_samples,
            rng_seed=fold(sampler.rng_seed, rec.seed), stochastic=sampler.stochastic,
        )
        maps = reconstruct(rec.features, mask, rec.age_scaled, rec.gender,
                           model, sched, cfg)
        for k, fmap in enumerate(maps):
            save_feature_map(fmap, recon_path(out_dir, sid, k))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_one, subject_ids))
    else:
        for sid in subject_ids:
            run_one(sid)


def load_reconstructions(samples_dir, subject_id: str) -> list[FeatureMap]:
    paths = sorted(Path(samples_dir).glob(f"recon_{subject_id}_*.icsf"))
    if not paths:
        raise FileNotFoundError(f"no reconstructions for subject {subject_id}")
    return [load_feature_map(p) for p in paths]


def _thickness_roi_means(fmap: FeatureMap, atlas: ROIAtlas) -> np.ndarray:
    return roi_means(fmap.data[0], atlas)


def score_dataset(dataset: Dataset, samples_dir, subject_ids=None,
                  template_baseline: bool = False, n_reference: int = 10):
    """Abnormal z-scores per subject (thickness channel, per ROI).

    Reference set: the subject's own reconstructions, or with
    ``template_baseline`` the ``n_reference`` age-nearest CN-train subjects.
    Returns (rows, skipped) where each row is
    {subject_id, group, scores: (R,) array}; skipped lists subjects whose
    reference set was degenerate.
    """
    atlas = dataset.atlas
    if subject_ids is None:
        subject_ids = [s.subject_id for s in dataset.by_group(*TEST_GROUPS)]
    train = dataset.by_group("cn_train")
    rows, skipped = [], []
    for sid in subject_ids:
        rec = dataset.get(sid)
        if template_baseline:
            nearest = sorted(train, key=lambda s: (abs(s.age - rec.age), s.subject_id))
            refs = [_thickness_roi_means(s.features, atlas)
                    for s in nearest[:n_reference]]
        else:
            refs = [_thickness_roi_means(m, atlas)
                    for m in load_reconstructions(samples_dir, sid)]
        subject_vec = _thickness_roi_means(rec.features, atlas)
        try:
            scores = abnormal_score(subject_vec, np.stack(refs), subject_id=sid)
        except DegenerateReferenceError as exc:
            skipped.append((sid, str(exc)))
            continue
        rows.append({"subject_id": sid, "group": rec.group,
                     "scores": scores.scores})
    return rows, skipped


def write_score_table(rows, path) -> None:
    path = Path(path)
    if not rows:
        raise ValueError("no score rows to write")
    n_rois = len(rows[0]["scores"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t")
        writer.writerow(["subject_id", "group"] + [f"roi_{i}" for i in range(n_rois)])
        for row in rows:
            writer.writerow([row["subject_id"], row["group"]]
                            + [f"{z:.6f}" for z in row["scores"]])


def read_score_table(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader)
        n_rois = len(header) - 2
        rows = []
        for rec in reader:
            rows.append({
                "subject_id": rec[0], "group": rec[1],
                "scores": np.array([float(x) for x in rec[2 : 2 + n_rois]]),
            })
    return rows


def score_summary(rows) -> dict:
    """Per-group mean |z| statistics and Welch p-values against CN."""
    by_group: dict[str, list[float]] = {}
    for row in rows:
        by_group.setdefault(row["group"], []).append(
            float(np.mean(np.abs(row["scores"])))
        )
    summary = {
        "groups": {
            g: {"n": len(v), "mean_abs_z": float(np.mean(v)),
                "sd": float(np.std(v, ddof=1)) if len(v) > 1 else 0.0}
            for g, v in by_group.items()
        },
        "p_values": {},
    }
    if "cn_test" in by_group:
        for contrast in ("mci", "ad"):
            if contrast in by_group:
                summary["p_values"][f"cn_vs_{contrast}"] = welch_p_value(
                    by_group["cn_test"], by_group[contrast]
                )
    return summary


def classification_features(rows, positive_group: str):
    """(features, labels) for cn_test (label -1) vs ``positive_group`` (+1)."""
    feats, labels = [], []
    for row in rows:
        if row["group"] == "cn_test":
            feats.append(row["scores"])
            labels.append(-1.0)
        elif row["group"] == positive_group:
            feats.append(row["scores"])
            labels.append(1.0)
    if not feats:
        raise ValueError(f"no rows for contrast cn_test vs {positive_group}")
    return np.stack(feats), np.array(labels)


def evaluate_reconstructions(dataset: Dataset, samples_dir, subject_ids,
                             workers: int = 1) -> dict:
    """Per-channel SSIM and thickness MSE (mm) between subjects and their
    reconstructions, averaged over samples then summarized over subjects."""
    mesh = build_icosphere(dataset.atlas.order)

    def eval_one(sid: str):
        rec = dataset.get(sid)
        ct = FeatureMap(rec.features.order, rec.features.data[:1])
        si = FeatureMap(rec.features.order, rec.features.data[1:])
        ct_mm = FeatureMap(ct.order, denormalize_thickness(ct.data))
        ssim_si, ssim_ct, mse_ct = [], [], []
        for recon in load_reconstructions(samples_dir, sid):
            r_ct = FeatureMap(recon.order, recon.data[:1])
            r_si = FeatureMap(recon.order, recon.data[1:])
            ssim_si.append(ssim_sphere(si, r_si, mesh, data_range=2.0))
            ssim_ct.append(ssim_sphere(ct, r_ct, mesh, data_range=2.0))
            mse_ct.append(mse(ct_mm, FeatureMap(r_ct.order,
                                                denormalize_thickness(r_ct.data))))
        return (np.mean(ssim_si), np.mean(ssim_ct), np.mean(mse_ct))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_subject = list(pool.map(eval_one, subject_ids))
    else:
        per_subject = [eval_one(sid) for sid in subject_ids]
    arr = np.asarray(per_subject)

    def stat(col):
        return {"mean": float(arr[:, col].mean()),
                "sd": float(arr[:, col].std(ddof=1)) if len(arr) > 1 else 0.0}

    return {"n_subjects": len(subject_ids), "si_ssim": stat(0),
            "ct_ssim": stat(1), "ct_mse_mm": stat(2)}
