"""Dice scores and losses: conventional (with smoothing) and the modified
variant that pays a fixed reward ``X`` when prediction and ground truth are
both empty.

The numpy functions are the evaluation/reference forms; ``dice_loss_torch``
is the batched differentiable surrogate used during training and is kept
consistent with :func:`soft_dice_training_loss`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Literal

import numpy as np
import torch

X_GRID = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass
class LossConfig:
    family: Literal["conventional", "modified"] = "conventional"
    X: float = 1.0
    epsilon: float = 1e-6
    binarize_threshold: float = 0.5
    # extra -2*eps/(sum p + eps) term on empty-G slices with a non-empty prediction
    fp_suppression: bool = False

    def __post_init__(self) -> None:
        if self.family not in ("conventional", "modified"):
            raise ValueError(f"unknown loss family {self.family!r}")
        if not 0.0 <= self.X <= 1.0:
            raise ValueError(f"X must lie in [0, 1], got {self.X}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _binary_pair(P, G):
    P = np.asarray(P)
    G = np.asarray(G)
    if P.shape != G.shape:
        raise ValueError(f"shape mismatch: {P.shape} vs {G.shape}")
    return P.astype(bool), G.astype(bool)


def binary_dsc(P, G, epsilon: float = 1e-6) -> float:
    """Smoothed Dice ``2(|P&G| + eps) / (|P| + |G| + 2 eps)``, clamped to [0, 1].

    Two empty masks score 1.
    """
    P, G = _binary_pair(P, G)
    inter = float(np.count_nonzero(P & G))
    total = float(np.count_nonzero(P) + np.count_nonzero(G))
    return min(1.0, 2.0 * (inter + epsilon) / (total + 2.0 * epsilon))


def dice_loss(P, G, epsilon: float = 1e-6) -> float:
    return -binary_dsc(P, G, epsilon)


def modified_dsc(P, G, X: float) -> float:
    """``X`` if both masks are empty, else the unsmoothed Dice ratio."""
    P, G = _binary_pair(P, G)
    np_, ng = np.count_nonzero(P), np.count_nonzero(G)
    if np_ == 0 and ng == 0:
        return float(X)
    return 2.0 * np.count_nonzero(P & G) / (np_ + ng)


def modified_dice_loss(P, G, X: float) -> float:
    return -modified_dsc(P, G, X)


def soft_dice_training_loss(P_soft, G, config: LossConfig) -> tuple[float, np.ndarray]:
    """Loss value and analytic gradient w.r.t. ``P_soft`` for one slice."""
    p = np.asarray(P_soft, dtype=np.float64)
    g = np.asarray(G, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    if p.size and (p.min() < 0 or p.max() > 1):
        raise ValueError("soft prediction must lie in [0, 1]")
    eps = config.epsilon
    sp, sg, spg = p.sum(), g.sum(), (p * g).sum()

    if config.family == "conventional":
        num, den = spg + eps, sp + sg + eps
        return -2.0 * num / den, -2.0 * (g * den - num) / den**2

    if sg == 0:
        pred_empty = not (p >= config.binarize_threshold).any()
        if pred_empty:
            return -float(config.X), np.zeros_like(p)
        if config.fp_suppression:
            den = sp + eps
            return -2.0 * eps / den, np.full_like(p, 2.0 * eps / den**2)
        return 0.0, np.zeros_like(p)

    den = sp + sg
    return -2.0 * spg / den, -2.0 * (g * den - spg) / den**2


def dice_loss_torch(p: torch.Tensor, g: torch.Tensor, config: LossConfig) -> torch.Tensor:
    """Batched training loss: mean over slices of the per-slice loss.

    ``p`` and ``g`` are (N, ...) with one slice per leading index.
    """
    p = p.reshape(p.shape[0], -1)
    g = g.reshape(g.shape[0], -1).to(p.dtype)
    eps = config.epsilon
    sp, sg, spg = p.sum(1), g.sum(1), (p * g).sum(1)

    if config.family == "conventional":
        return (-2.0 * (spg + eps) / (sp + sg + eps)).mean()

    g_empty = sg == 0
    pred_empty = ~(p >= config.binarize_threshold).any(1)
    safe_den = torch.where(g_empty, torch.ones_like(sp), sp + sg)
    per_slice = -2.0 * spg / safe_den
    if config.fp_suppression:
        empty_term = -2.0 * eps / (sp + eps)
    else:
        empty_term = torch.zeros_like(sp)
    empty_term = torch.where(pred_empty, torch.full_like(sp, -float(config.X)), empty_term)
    per_slice = torch.where(g_empty, empty_term, per_slice)
    return per_slice.mean()
