"""Prostate zone segmentation on DWI with transfer learning and a modified Dice loss."""

from .loss import LossConfig, binary_dsc, dice_loss, modified_dice_loss, modified_dsc
from .model import ModelConfig, ModifiedUNet, build_model

__all__ = [
    "LossConfig",
    "ModelConfig",
    "ModifiedUNet",
    "binary_dsc",
    "build_model",
    "dice_loss",
    "modified_dice_loss",
    "modified_dsc",
]
__version__ = "0.1.0"
