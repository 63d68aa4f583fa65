"""Evaluation: Dice statistics on prostate-containing slices, slice-level
detection rates, and classification of mispredicted slices into base/apex
versus mid-gland."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Literal, Mapping, Sequence

import numpy as np

from .data import Zone


@dataclass
class MetricsReport:
    mean_dsc: float
    std_dsc: float
    sensitivity: float | None
    specificity: float | None
    precision: float | None
    n_slices_total: int
    n_slices_with_prostate: int
    TP: int
    FP: int
    TN: int
    FN: int
    mean_dsc_patient: float | None = None

    @property
    def confusion(self) -> dict[str, int]:
        return {"TP": self.TP, "FP": self.FP, "TN": self.TN, "FN": self.FN}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        return cls(**d)


def slice_dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Unsmoothed Dice for one slice; two empty masks score 1."""
    p, g = pred.astype(bool), gt.astype(bool)
    total = np.count_nonzero(p) + np.count_nonzero(g)
    if total == 0:
        return 1.0
    return 2.0 * np.count_nonzero(p & g) / total


def dsc_statistics(values: Sequence[float]) -> tuple[float, float]:
    """Arithmetic mean and population standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("no DSC values to summarise")
    return float(arr.mean()), float(arr.std())


def _rate(num: int, den: int) -> float | None:
    return num / den if den else None


def _aligned(pred_volumes: Mapping[str, np.ndarray], gt_volumes: Mapping[str, np.ndarray]):
    if set(pred_volumes) != set(gt_volumes):
        missing = sorted(set(gt_volumes) ^ set(pred_volumes))
        raise ValueError(f"prediction and ground truth cover different patients: {missing}")
    for pid in sorted(gt_volumes):
        pred, gt = np.asarray(pred_volumes[pid]), np.asarray(gt_volumes[pid])
        if pred.shape != gt.shape:
            raise ValueError(f"patient {pid}: prediction shape {pred.shape} != ground truth {gt.shape}")
        yield pid, pred, gt


def evaluate_cohort(
    pred_volumes: Mapping[str, np.ndarray],
    gt_volumes: Mapping[str, np.ndarray],
    zone: Zone | None = None,
) -> MetricsReport:
    """Metrics over all slices of all patients.

    Both arguments map patient id -> (n_slices, H, W) binary masks for one
    zone. DSC is averaged over slices with non-empty ground truth only; a
    slice is detection-positive when its predicted mask is non-empty.
    """
    dscs: list[float] = []
    patient_means: list[float] = []
    tp = fp = tn = fn = 0
    for _, pred, gt in _aligned(pred_volumes, gt_volumes):
        pred_pos = pred.reshape(pred.shape[0], -1).any(1)
        gt_pos = gt.reshape(gt.shape[0], -1).any(1)
        tp += int(np.sum(pred_pos & gt_pos))
        fp += int(np.sum(pred_pos & ~gt_pos))
        tn += int(np.sum(~pred_pos & ~gt_pos))
        fn += int(np.sum(~pred_pos & gt_pos))
        these = [slice_dsc(pred[k], gt[k]) for k in np.flatnonzero(gt_pos)]
        dscs.extend(these)
        if these:
            patient_means.append(float(np.mean(these)))
    if dscs:
        mean, std = dsc_statistics(dscs)
    else:
        mean, std = float("nan"), float("nan")
    return MetricsReport(
        mean_dsc=mean,
        std_dsc=std,
        sensitivity=_rate(tp, tp + fn),
        specificity=_rate(tn, tn + fp),
        precision=_rate(tp, tp + fp),
        n_slices_total=tp + fp + tn + fn,
        n_slices_with_prostate=tp + fn,
        TP=tp,
        FP=fp,
        TN=tn,
        FN=fn,
        mean_dsc_patient=float(np.mean(patient_means)) if patient_means else None,
    )


def base_apex_size_band(gt_volumes: Mapping[str, np.ndarray]) -> tuple[int, int]:
    """(min, max) pixel count over the first and last non-empty GT slices of each patient."""
    counts = []
    for gt in gt_volumes.values():
        sizes = np.asarray(gt).reshape(len(gt), -1).sum(1)
        idx = np.flatnonzero(sizes)
        if idx.size:
            counts += [int(sizes[idx[0]]), int(sizes[idx[-1]])]
    if not counts:
        raise ValueError("no ground-truth masks")
    return min(counts), max(counts)


def base_apex_analysis(
    pred_volumes: Mapping[str, np.ndarray],
    gt_volumes: Mapping[str, np.ndarray],
    zone: Zone | None = None,
    size_stats: tuple[int, int] | None = None,
) -> dict[str, int]:
    """Split slice-level detection errors into base/apex and mid-gland.

    An error slice is mid-gland when the same patient has detection-positive
    slices both before and after it, unless its GT mask is non-empty and no
    larger than the upper end of ``size_stats`` (the base/apex size band), in
    which case it counts as base/apex.
    """
    upper = size_stats[1] if size_stats is not None else None
    n_mis = n_ba = n_mid = 0
    for _, pred, gt in _aligned(pred_volumes, gt_volumes):
        pred_pos = pred.reshape(pred.shape[0], -1).any(1)
        gt_size = gt.reshape(gt.shape[0], -1).sum(1)
        gt_pos = gt_size > 0
        positives = np.flatnonzero(pred_pos)
        for k in np.flatnonzero(pred_pos != gt_pos):
            n_mis += 1
            mid = positives.size > 0 and positives[0] < k < positives[-1]
            if mid and upper is not None and 0 < gt_size[k] <= upper:
                mid = False
            if mid:
                n_mid += 1
            else:
                n_ba += 1
    return {"n_mispredicted": n_mis, "n_base_apex": n_ba, "n_midgland": n_mid}
