"""Deterministic synthetic cohort standing in for a real imaging dataset.

Each subject gets a smooth random "folding" field whose median split defines
the gyral/sulcal mask. Thickness follows the mask (+0.5 mm on gyral crowns,
-0.5 mm in sulci around a 2.5 mm baseline) with an age slope and spatially
correlated noise; disease groups additionally lose a fixed mean thickness in
the configured atrophy ROIs. The shape-index channel is a bounded smooth
function of the same folding field.

Everything is a pure function of the master seed: per-subject seeds derive
from it via the package's splitmix64 fold, so subjects can be generated in
parallel without changing any output.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .featuremap import FeatureMap, save_feature_map
from .icosphere import IcosphereMesh, ROIAtlas, build_icosphere, ring_window, save_atlas, voronoi_atlas
from .normative import normalize_age, normalize_thickness
from .rng import fold, stream

GROUPS = ("cn_train", "cn_test", "mci", "ad")

_N_LOBES = 16


@dataclass
class CohortConfig:
    order: int = 3
    n_cn_train: int = 400
    n_cn_test: int = 82
    n_mci: int = 82
    n_ad: int = 82
    roi_count: int = 34
    atrophy_rois: tuple[int, ...] = (0, 1, 2, 3, 4)
    atrophy_mci_mm: float = 0.25
    atrophy_ad_mm: float = 0.5
    age_range: tuple[float, float] = (55.0, 90.0)
    age_slope_mm: float = -0.01
    noise_sd_mm: float = 0.15
    smooth_rings: int = 2
    seed: int = 0

    def __post_init__(self):
        self.atrophy_rois = tuple(int(r) for r in self.atrophy_rois)
        if self.atrophy_mci_mm < 0 or self.atrophy_ad_mm < 0:
            raise ValueError("atrophy magnitudes must be >= 0")
        if any(not 0 <= r < self.roi_count for r in self.atrophy_rois):
            raise ValueError("atrophy_rois outside [0, roi_count)")

    def scaled(self, scale: float) -> "CohortConfig":
        cfg = CohortConfig(**{**self.__dict__})
        cfg.n_cn_train = max(1, round(self.n_cn_train * scale))
        cfg.n_cn_test = max(1, round(self.n_cn_test * scale))
        cfg.n_mci = max(1, round(self.n_mci * scale))
        cfg.n_ad = max(1, round(self.n_ad * scale))
        return cfg

    def group_sizes(self) -> dict[str, int]:
        return {
            "cn_train": self.n_cn_train,
            "cn_test": self.n_cn_test,
            "mci": self.n_mci,
            "ad": self.n_ad,
        }


@dataclass
class SubjectRecord:
    subject_id: str
    group: str
    age: float
    gender: int
    seed: int
    features: FeatureMap  # ch0 thickness (normalized), ch1 shape index
    mask: FeatureMap      # ch0 gyral, ch1 sulcal one-hot

    @property
    def age_scaled(self) -> float:
        return normalize_age(self.age)


def _lobe_field(mesh: IcosphereMesh, rng: np.random.Generator) -> np.ndarray:
    """Band-limited random scalar field: sum of cosine lobes at random poles."""
    poles = rng.standard_normal((_N_LOBES, 3))
    poles /= np.linalg.norm(poles, axis=1, keepdims=True)
    freqs = rng.uniform(2.0, 6.0, _N_LOBES)
    phases = rng.uniform(0.0, 2.0 * np.pi, _N_LOBES)
    proj = mesh.vertices @ poles.T  # (V, n_lobes)
    return np.cos(proj * freqs + phases).sum(axis=1)


def _smooth_noise(mesh: IcosphereMesh, rng: np.random.Generator, sd: float,
                  rings: int) -> np.ndarray:
    """k-ring-averaged white noise rescaled to the target pointwise sd."""
    white = rng.standard_normal(mesh.n_vertices)
    idx, counts = ring_window(mesh, rings)
    smooth = (white[np.maximum(idx, 0)] * (idx >= 0)).sum(axis=1) / counts
    return smooth * (sd / smooth.std())


def gen_segmentation(mesh: IcosphereMesh, subject_seed: int) -> FeatureMap:
    """Balanced one-hot gyral/sulcal mask from a median-split folding field."""
    field_vals = _lobe_field(mesh, stream(subject_seed, 11))
    gyral = field_vals > np.median(field_vals)
    return FeatureMap(
        mesh.order,
        np.stack([gyral.astype(np.float32), (~gyral).astype(np.float32)]),
    )


def gen_subject(
    mesh: IcosphereMesh,
    atlas: ROIAtlas,
    config: CohortConfig,
    group: str,
    age: float,
    gender: int,
    subject_seed: int,
    subject_id: str = "",
) -> SubjectRecord:
    if group not in ("cn", "cn_train", "cn_test", "mci", "ad"):
        raise ValueError(f"unknown group {group!r}")
    field_vals = _lobe_field(mesh, stream(subject_seed, 11))
    gyral = field_vals > np.median(field_vals)

    thickness = 2.5 + 0.5 * np.where(gyral, 1.0, -1.0)
    thickness = thickness + config.age_slope_mm * (age - 70.0)
    thickness = thickness + _smooth_noise(
        mesh, stream(subject_seed, 13), config.noise_sd_mm, config.smooth_rings
    )
    magnitude = {"mci": config.atrophy_mci_mm, "ad": config.atrophy_ad_mm}.get(group, 0.0)
    if magnitude > 0.0:
        thickness = thickness - magnitude * np.isin(atlas.labels, config.atrophy_rois)
    thickness = np.clip(thickness, 0.5, 4.5)

    z = (field_vals - field_vals.mean()) / field_vals.std()
    shape_index = np.tanh(1.25 * z) * 0.8
    shape_index = shape_index + _smooth_noise(
        mesh, stream(subject_seed, 12), 0.03, config.smooth_rings
    )
    shape_index = np.clip(shape_index, -0.99, 0.99)

    features = FeatureMap(
        mesh.order,
        np.stack([
            normalize_thickness(thickness).astype(np.float32),
            shape_index.astype(np.float32),
        ]),
    )
    mask = FeatureMap(
        mesh.order,
        np.stack([gyral.astype(np.float32), (~gyral).astype(np.float32)]),
    )
    return SubjectRecord(
        subject_id=subject_id, group=group, age=float(age), gender=int(gender),
        seed=subject_seed, features=features, mask=mask,
    )


def _plan_subjects(config: CohortConfig):
    """Deterministic (id, group, age, gender, seed) rows for the whole cohort."""
    rows = []
    idx = 0
    lo, hi = config.age_range
    for group, count in config.group_sizes().items():
        for i in range(count):
            age = float(stream(config.seed, 21, idx).uniform(lo, hi))
            rows.append({
                "subject_id": f"{group}_{i:03d}",
                "group": group,
                "age": round(age, 2),
                "gender": idx % 2,
                "seed": fold(config.seed, 22, idx),
            })
            idx += 1
    return rows


def gen_cohort(config: CohortConfig, out_dir) -> list[dict]:
    """Write the full dataset directory; returns the manifest rows.

    Layout: manifest.tsv, atlas.icra, and per subject
    ``subj_<id>_feat.icsf`` / ``subj_<id>_mask.icsf``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mesh = build_icosphere(config.order)
    atlas = voronoi_atlas(mesh, config.roi_count, seed=fold(config.seed, 23))
    save_atlas(atlas, out_dir / "atlas.icra")
    rows = _plan_subjects(config)
    for row in rows:
        rec = gen_subject(
            mesh, atlas, config, row["group"], row["age"], row["gender"],
            row["seed"], row["subject_id"],
        )
        save_feature_map(rec.features, out_dir / f"subj_{row['subject_id']}_feat.icsf")
        save_feature_map(rec.mask, out_dir / f"subj_{row['subject_id']}_mask.icsf")
    with open(out_dir / "manifest.tsv", "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["subject_id", "group", "age", "gender", "seed"],
            delimiter="\t",
        )
        writer.writeheader()
        writer.writerows(rows)
    return rows


def load_manifest(dataset_dir) -> list[dict]:
    path = Path(dataset_dir) / "manifest.tsv"
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    for row in rows:
        row["age"] = float(row["age"])
        row["gender"] = int(row["gender"])
        row["seed"] = int(row["seed"])
    return rows


def load_subject(dataset_dir, row: dict) -> SubjectRecord:
    from .featuremap import load_feature_map

    dataset_dir = Path(dataset_dir)
    sid = row["subject_id"]
    return SubjectRecord(
        subject_id=sid, group=row["group"], age=row["age"],
        gender=row["gender"], seed=row["seed"],
        features=load_feature_map(dataset_dir / f"subj_{sid}_feat.icsf"),
        mask=load_feature_map(dataset_dir / f"subj_{sid}_mask.icsf"),
    )
