"""Morphological cleanup and small-mask suppression for predicted masks."""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import asdict, dataclass
from typing import Literal

import numpy as np
from scipy import ndimage

from .data import Cohort, Zone


@dataclass
class PostprocessConfig:
    radius: int = 2
    min_mask_pixels_wg: int = 0
    min_mask_pixels_tz: int = 0
    threshold_fraction: float = 0.9
    order: Literal["close-open", "open-close"] = "close-open"

    def __post_init__(self) -> None:
        if self.radius < 1:
            raise ValueError("structuring element radius must be >= 1")
        if self.min_mask_pixels_wg < 0 or self.min_mask_pixels_tz < 0:
            raise ValueError("minimum mask sizes must be >= 0")
        if not 0 < self.threshold_fraction <= 1:
            raise ValueError("threshold_fraction must lie in (0, 1]")
        if self.order not in ("close-open", "open-close"):
            raise ValueError(f"unknown order {self.order!r}")

    def min_pixels(self, zone: Zone) -> int:
        if zone == "WG":
            return self.min_mask_pixels_wg
        if zone == "TZ":
            return self.min_mask_pixels_tz
        raise ValueError(f"unknown zone {zone!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return (xx**2 + yy**2 <= radius**2)


def close_mask(mask, radius: int = 2) -> np.ndarray:
    """Dilation followed by erosion with a disk.

    The mask is zero-padded first so the image border does not erode away
    foreground; the result always contains the input.
    """
    m = np.asarray(mask).astype(bool)
    pad = 2 * radius + 1
    padded = np.pad(m, pad)
    se = disk(radius)
    closed = ndimage.binary_erosion(ndimage.binary_dilation(padded, se), se)
    return closed[pad:-pad, pad:-pad].astype(np.uint8)


def open_mask(mask, radius: int = 2) -> np.ndarray:
    """Erosion followed by dilation with a disk (background outside the image)."""
    m = np.asarray(mask).astype(bool)
    se = disk(radius)
    opened = ndimage.binary_dilation(ndimage.binary_erosion(m, se, border_value=0), se)
    return opened.astype(np.uint8)


def derive_min_size_threshold(cohort: Cohort, zone: Zone, fraction: float = 0.9) -> int:
    """Floor of ``fraction`` times the mean base/apex mask size over all patients.

    Base and apex are the first and last slices with a non-empty mask.
    """
    counts = []
    for p in cohort.patients:
        masks = p.masks(zone)
        idx = p.prostate_slices(zone)
        if idx.size == 0:
            raise ValueError(f"patient {p.patient_id} has no {zone} mask")
        counts.append(int(masks[idx[0]].sum()))
        counts.append(int(masks[idx[-1]].sum()))
    if not counts:
        raise ValueError("cohort contains no masks")
    return threshold_from_counts(counts, fraction)


def threshold_from_counts(counts, fraction: float = 0.9) -> int:
    # exact rationals: 0.9 * 400/3 must give 120, not 119.99999
    counts = [int(c) for c in counts]
    return math.floor(Fraction(str(fraction)) * Fraction(sum(counts), len(counts)))


def filter_small_masks(masks, min_pixels: int) -> np.ndarray:
    """Empty every slice whose non-empty mask has fewer than ``min_pixels`` pixels."""
    masks = np.asarray(masks).astype(np.uint8)
    out = masks.copy()
    sizes = out.reshape(out.shape[0], -1).sum(1)
    out[(sizes > 0) & (sizes < min_pixels)] = 0
    return out


def postprocess_volume(pred_masks, config: PostprocessConfig, zone: Zone) -> np.ndarray:
    """Per slice: closing and opening (order per ``config.order``), then the size filter."""
    pred = np.asarray(pred_masks)
    out = np.empty(pred.shape, np.uint8)
    first, second = (close_mask, open_mask) if config.order == "close-open" else (open_mask, close_mask)
    for k in range(pred.shape[0]):
        out[k] = second(first(pred[k], config.radius), config.radius)
    return filter_small_masks(out, config.min_pixels(zone))
