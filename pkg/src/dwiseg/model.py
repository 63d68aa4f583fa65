"""Modified U-net with inception blocks and residual skip connections.

Parameters are partitioned into named groups (``Down-1`` .. ``Down-L``,
``Bottleneck``, ``Up-1`` .. ``Up-L``, ``Head``) so that fine-tuning schemes
can freeze whole blocks. ``Down-1`` is the shallowest encoder block and
``Up-1`` is the decoder block paired with it (the one closest to the output).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ModelConfig:
    n_levels: int = 4
    base_channels: int = 16
    input_channels: int = 1

    def __post_init__(self) -> None:
        if self.n_levels < 1:
            raise ValueError(f"n_levels must be >= 1, got {self.n_levels}")
        if self.base_channels < 4 or self.base_channels % 4:
            raise ValueError("base_channels must be a positive multiple of 4 (four equal inception branches)")
        if self.input_channels != 1:
            raise ValueError("only single-channel input is supported")

    def channels(self, level: int) -> int:
        """Channel width of down-block ``level`` (1-based); ``n_levels + 1`` is the bottleneck."""
        return self.base_channels * 2 ** (level - 1)

    def check_spatial(self, height: int, width: int) -> None:
        div = 2**self.n_levels
        if height % div or width % div or height <= 0 or width <= 0:
            raise ValueError(
                f"spatial size {height}x{width} is not divisible by 2**n_levels={div}"
            )

    def to_dict(self) -> dict:
        return asdict(self)


class InceptionBlock(nn.Module):
    """Four parallel branches concatenated on channels.

    1x1 conv | 1x1 -> 3x3 conv | 1x1 -> 5x5 conv | 3x3 max-pool -> 1x1 conv.
    Each branch emits ``out_channels // 4`` maps; spatial size is preserved.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        if out_channels % 4:
            raise ValueError("out_channels must be divisible by 4")
        w = out_channels // 4
        self.branch1 = nn.Conv2d(in_channels, w, 1)
        self.branch3_reduce = nn.Conv2d(in_channels, w, 1)
        self.branch3 = nn.Conv2d(w, w, 3, padding=1)
        self.branch5_reduce = nn.Conv2d(in_channels, w, 1)
        self.branch5 = nn.Conv2d(w, w, 5, padding=2)
        self.branch_pool = nn.Conv2d(in_channels, w, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b1 = F.relu(self.branch1(x))
        b3 = F.relu(self.branch3(F.relu(self.branch3_reduce(x))))
        b5 = F.relu(self.branch5(F.relu(self.branch5_reduce(x))))
        bp = F.relu(self.branch_pool(F.max_pool2d(x, 3, stride=1, padding=1)))
        return torch.cat([b1, b3, b5, bp], dim=1)


class ResidualSkip(nn.Module):
    """``y = x + conv(x)`` with a channel-preserving 3x3 convolution."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv(x)


class DownBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.inception = InceptionBlock(in_channels, out_channels)

    def forward(self, x):
        skip = self.inception(x)
        return F.max_pool2d(skip, 2), skip


class UpBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.upsample = nn.ConvTranspose2d(in_channels, out_channels, 2, stride=2)
        self.skip = ResidualSkip(out_channels)
        self.inception = InceptionBlock(2 * out_channels, out_channels)

    def forward(self, x, skip):
        x = F.relu(self.upsample(x))
        return self.inception(torch.cat([x, self.skip(skip)], dim=1))


class ModifiedUNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        L = config.n_levels
        self.down = nn.ModuleList(
            DownBlock(config.input_channels if i == 1 else config.channels(i - 1), config.channels(i))
            for i in range(1, L + 1)
        )
        self.bottleneck = InceptionBlock(config.channels(L), config.channels(L + 1))
        # up[i-1] is Up-i, paired with Down-i
        self.up = nn.ModuleList(
            UpBlock(config.channels(i + 1), config.channels(i)) for i in range(1, L + 1)
        )
        self.head = nn.Conv2d(config.channels(1), 1, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValueError(f"expected input of shape (N, 1, H, W), got {tuple(x.shape)}")
        self.config.check_spatial(x.shape[-2], x.shape[-1])
        # channels_last roughly halves CPU cost of the pooling/conv kernels
        x = x.contiguous(memory_format=torch.channels_last)
        skips = []
        for block in self.down:
            x, s = block(x)
            skips.append(s)
        x = self.bottleneck(x)
        for block, s in zip(reversed(self.up), reversed(skips)):
            x = block(x, s)
        return self.head(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))

    def param_groups(self) -> dict[str, dict[str, nn.Parameter]]:
        return param_groups(self)


def group_names(n_levels: int) -> list[str]:
    return (
        [f"Down-{i}" for i in range(1, n_levels + 1)]
        + ["Bottleneck"]
        + [f"Up-{i}" for i in range(1, n_levels + 1)]
        + ["Head"]
    )


def _group_of(param_name: str) -> str:
    head, _, rest = param_name.partition(".")
    if head in ("down", "up"):
        idx = int(rest.split(".", 1)[0]) + 1
        return f"{head.capitalize()}-{idx}"
    if head == "bottleneck":
        return "Bottleneck"
    if head == "head":
        return "Head"
    raise KeyError(f"parameter {param_name!r} does not belong to any group")


def param_groups(model: ModifiedUNet) -> dict[str, dict[str, nn.Parameter]]:
    """Map group name -> {parameter name: parameter}, covering every parameter once."""
    groups: dict[str, dict[str, nn.Parameter]] = {g: {} for g in group_names(model.config.n_levels)}
    for name, p in model.named_parameters():
        groups[_group_of(name)][name] = p
    return groups


def build_model(config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> ModifiedUNet:
    """Build a model with deterministic initialisation for ``seed``."""
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        model = ModifiedUNet(config)
    finally:
        torch.random.set_rng_state(gen_state)
    return model.to(dtype=dtype, memory_format=torch.channels_last)


def forward(model: ModifiedUNet, image) -> np.ndarray:
    """Soft mask in [0, 1] for a single H x W image."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {arr.shape}")
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(arr, dtype=dtype)[None, None]
    with torch.no_grad():
        y = model(x)
    return y[0, 0].cpu().numpy()
