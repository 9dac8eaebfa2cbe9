"""Normalization conventions, deviation scores, surface metrics and the
classification harness.

Abnormal scores follow the reference-set z-score: a subject's per-ROI feature
mean is standardized against the ROI means of N reference samples, using the
sample (N-1) standard deviation. Scores are invariant to any per-ROI affine
rescaling of the inputs, so they can be computed in model space or mm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc

from .errors import DegenerateReferenceError
from .featuremap import FeatureMap
from .icosphere import IcosphereMesh, ROIAtlas, ring_window
from .rng import stream

THICKNESS_MAX_MM = 5.0


class ClampCounter:
    """Counts out-of-range thickness values clamped during normalization."""

    def __init__(self):
        self.count = 0


thickness_clamps = ClampCounter()


def normalize_thickness(ct_mm, counter: ClampCounter | None = None):
    """Linear map [0, 5] mm -> [-1, 1]; out-of-range values clamp and count."""
    arr = np.asarray(ct_mm, dtype=np.float64)
    out_of_range = int(((arr < 0.0) | (arr > THICKNESS_MAX_MM)).sum())
    if out_of_range:
        (counter or thickness_clamps).count += out_of_range
    y = np.clip(arr, 0.0, THICKNESS_MAX_MM) / (THICKNESS_MAX_MM / 2.0) - 1.0
    return float(y) if np.isscalar(ct_mm) else y


def denormalize_thickness(y):
    """Inverse of normalize_thickness: [-1, 1] -> mm."""
    arr = np.asarray(y, dtype=np.float64)
    ct = (arr + 1.0) * (THICKNESS_MAX_MM / 2.0)
    return float(ct) if np.isscalar(y) else ct


def normalize_age(age_years: float) -> float:
    if not 0.0 <= age_years <= 100.0:
        raise ValueError(f"age must be in [0, 100], got {age_years}")
    return age_years / 100.0


def _as_vertex_values(fmap, atlas: ROIAtlas) -> np.ndarray:
    if isinstance(fmap, FeatureMap):
        if fmap.channels != 1:
            raise ValueError("roi_means expects a single-channel map")
        if fmap.order != atlas.order:
            raise ValueError("map and atlas orders differ")
        return fmap.data[0]
    values = np.asarray(fmap, dtype=np.float64)
    if values.shape != atlas.labels.shape:
        raise ValueError("value count does not match atlas")
    return values


def roi_means(fmap, atlas: ROIAtlas) -> np.ndarray:
    """Arithmetic mean of vertex values within each ROI; (roi_count,) vector."""
    values = _as_vertex_values(fmap, atlas)
    sums = np.bincount(atlas.labels, weights=values, minlength=atlas.roi_count)
    counts = np.bincount(atlas.labels, minlength=atlas.roi_count)
    return sums / counts


@dataclass
class AbnormalScores:
    subject_id: str
    scores: np.ndarray  # (roi_count,) z-scores

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("abnormal scores must be finite")


def abnormal_score(subject_roi, samples_roi, subject_id: str = "") -> AbnormalScores:
    """Per-ROI z-score of a subject against N reference samples.

    ``samples_roi`` is (N, R); the standard deviation uses the N-1 convention.
    Raises DegenerateReferenceError if any ROI's reference spread is < 1e-8.
    """
    subject_roi = np.asarray(subject_roi, dtype=np.float64)
    samples_roi = np.asarray(samples_roi, dtype=np.float64)
    if samples_roi.ndim != 2 or samples_roi.shape[0] < 2:
        raise ValueError("need at least 2 reference samples")
    if samples_roi.shape[1] != subject_roi.shape[0]:
        raise ValueError("subject and samples disagree on ROI count")
    std = samples_roi.std(axis=0, ddof=1)
    degenerate = np.flatnonzero(std < 1e-8)
    if degenerate.size:
        raise DegenerateReferenceError(
            f"reference set has ~zero variance in ROI {int(degenerate[0])}"
        )
    z = (subject_roi - samples_roi.mean(axis=0)) / std
    return AbnormalScores(subject_id=subject_id, scores=z)


def _window_stats(values: np.ndarray, idx: np.ndarray, counts: np.ndarray):
    vals = values[np.maximum(idx, 0)] * (idx >= 0)
    return vals.sum(axis=1) / counts


def ssim_sphere(a: FeatureMap, b: FeatureMap, mesh: IcosphereMesh,
                data_range: float) -> float:
    """Mean local SSIM with uniform-weight 2-ring windows on the mesh."""
    if a.channels != 1 or b.channels != 1:
        raise ValueError("ssim_sphere expects single-channel maps")
    if a.order != b.order or a.order != mesh.order:
        raise ValueError("maps and mesh must share one order")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    idx, counts = ring_window(mesh, 2)
    av = a.data[0].astype(np.float64)
    bv = b.data[0].astype(np.float64)
    mu_a = _window_stats(av, idx, counts)
    mu_b = _window_stats(bv, idx, counts)
    var_a = _window_stats(av * av, idx, counts) - mu_a**2
    var_b = _window_stats(bv * bv, idx, counts) - mu_b**2
    cov = _window_stats(av * bv, idx, counts) - mu_a * mu_b
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    ssim = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return float(ssim.mean())


def mse(a: FeatureMap, b: FeatureMap) -> float:
    """Mean squared difference over all channels and vertices."""
    if a.order != b.order or a.data.shape != b.data.shape:
        raise ValueError("mse: shape mismatch")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    return float(np.mean(diff * diff))


def welch_p_value(group_a, group_b) -> float:
    """Two-sided Welch t-test p-value via the regularized incomplete beta."""
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each group needs at least 2 values")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va <= 0.0 and vb <= 0.0:
        raise ValueError("both groups have zero variance")
    sa, sb = va / a.size, vb / b.size
    t = (a.mean() - b.mean()) / np.sqrt(sa + sb)
    df = (sa + sb) ** 2 / (
        sa**2 / (a.size - 1) + sb**2 / (b.size - 1)
    )
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def svm_train(features, labels, c_reg: float = 1.0, epochs: int = 200,
              seed: int = 0):
    """Linear SVM by per-sample subgradient descent on the hinge objective.

    Objective: lam/2 ||w||^2 + mean hinge, lam = 1/(c_reg * M); step size
    1e-2/sqrt(epoch); per-epoch shuffling from the seeded stream. Returns
    (weights, bias).
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need an (M, R) feature matrix with M >= 2")
    if set(np.unique(y)) != {-1.0, 1.0}:
        raise ValueError("labels must contain both classes, coded -1/+1")
    m = x.shape[0]
    lam = 1.0 / (c_reg * m)
    w = np.zeros(x.shape[1])
    b = 0.0
    for epoch in range(1, epochs + 1):
        eta = 1e-2 / np.sqrt(epoch)
        for i in stream(seed, 3001, epoch).permutation(m):
            margin = y[i] * (x[i] @ w + b)
            grad_w = lam * w
            if margin < 1.0:
                grad_w = grad_w - y[i] * x[i]
                b += eta * y[i]
            w -= eta * grad_w
    return w, b


def svm_predict(features, w, b) -> np.ndarray:
    scores = np.asarray(features, dtype=np.float64) @ w + b
    return np.where(scores >= 0.0, 1.0, -1.0)


@dataclass
class FoldResult:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def accuracy(self) -> float:
        total = self.tp + self.fp + self.tn + self.fn
        return (self.tp + self.tn) / total if total else 0.0


@dataclass
class ClassifierReport:
    accuracy: float
    precision: float
    recall: float
    folds: list[FoldResult] = field(default_factory=list)

    def __post_init__(self):
        tp = sum(f.tp for f in self.folds)
        fp = sum(f.fp for f in self.folds)
        tn = sum(f.tn for f in self.folds)
        fn = sum(f.fn for f in self.folds)
        total = tp + fp + tn + fn
        checks = (
            abs(self.accuracy - (tp + tn) / total) < 1e-9,
            abs(self.precision - (tp / (tp + fp) if tp + fp else 0.0)) < 1e-9,
            abs(self.recall - (tp / (tp + fn) if tp + fn else 0.0)) < 1e-9,
        )
        if not all(checks):
            raise ValueError("report metrics inconsistent with confusion counts")


def kfold_cv(features, labels, k: int = 10, seed: int = 0,
             invert_split: bool = False) -> ClassifierReport:
    """Stratified k-fold cross-validation of the linear SVM.

    Standard split trains on k-1 folds and tests on 1; ``invert_split``
    flips that (train on 1, test on k-1). Features are standardized with
    train-fold column statistics. Positive class is +1 (disease).
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if set(np.unique(y)) != {-1.0, 1.0}:
        raise ValueError("labels must contain both classes, coded -1/+1")
    fold_of = np.empty(len(y), dtype=np.int64)
    for cls in (-1.0, 1.0):
        idx = np.flatnonzero(y == cls)
        if len(idx) < k:
            raise ValueError(
                f"class {int(cls)} has {len(idx)} members, need >= k={k}"
            )
        shuffled = idx[stream(seed, 3101, int(cls)).permutation(len(idx))]
        fold_of[shuffled] = np.arange(len(idx)) % k
    folds = []
    for f in range(k):
        test_sel = fold_of == f if not invert_split else fold_of != f
        train_sel = ~test_sel
        mu = x[train_sel].mean(axis=0)
        sd = x[train_sel].std(axis=0)
        sd[sd < 1e-12] = 1.0
        w, b = svm_train((x[train_sel] - mu) / sd, y[train_sel],
                         seed=stream(seed, 3102, f).integers(2**31))
        pred = svm_predict((x[test_sel] - mu) / sd, w, b)
        truth = y[test_sel]
        folds.append(FoldResult(
            tp=int(((pred == 1) & (truth == 1)).sum()),
            fp=int(((pred == 1) & (truth == -1)).sum()),
            tn=int(((pred == -1) & (truth == -1)).sum()),
            fn=int(((pred == -1) & (truth == 1)).sum()),
        ))
    tp = sum(f.tp for f in folds)
    fp = sum(f.fp for f in folds)
    tn = sum(f.tn for f in folds)
    fn = sum(f.fn for f in folds)
    total = tp + fp + tn + fn
    return ClassifierReport(
        accuracy=(tp + tn) / total,
        precision=tp / (tp + fp) if tp + fp else 0.0,
        recall=tp / (tp + fn) if tp + fn else 0.0,
        folds=folds,
    )
