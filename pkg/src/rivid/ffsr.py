"""Foreground-focus restoration network and its masked reconstruction loss."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class FfsrConfig:
    """Layer plan (12 layers, 1-indexed):

    1 conv3x3/s1, 2-3 conv3x3/s2, 4-9 conv3x3/s1, 10-11 tconv4x4/s2, 12 conv3x3 head.
    Skip connections add layer 2's output to layer 10's and layer 1's to
    layer 11's, the two places where encoder and decoder share a scale.
    """

    n_layers: int = 12
    base_channels: int = 32
    downsample_stages: int = 2
    in_channels: int = 3

    def __post_init__(self) -> None:
        if self.n_layers != 12 or self.downsample_stages != 2:
            raise ValueError("only the 12-layer, 2-stage plan is supported")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")

    @property
    def skip_pairs(self) -> list[tuple[int, int]]:
        return [(2, 10), (1, 11)]

    def to_dict(self) -> dict:
        return asdict(self)


class FFSR(nn.Module):
    """Auto-encoder with additive symmetric skips and a residual output head.

    Hidden layers use He-normal weights so activations keep their scale through
    the twelve ReLU layers; the head is zero-initialised, so an untrained module
    returns its input.
    """

    def __init__(self, config: FfsrConfig | None = None):
        super().__init__()
        self.config = config = config or FfsrConfig()
        c, cin = config.base_channels, config.in_channels
        self.conv1 = nn.Conv2d(cin, c, 3, stride=1, padding=1)
        self.conv2 = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.body = nn.ModuleList([nn.Conv2d(c, c, 3, stride=1, padding=1) for _ in range(6)])
        self.up1 = nn.ConvTranspose2d(c, c, 4, stride=2, padding=1)
        self.up2 = nn.ConvTranspose2d(c, c, 4, stride=2, padding=1)
        self.head = nn.Conv2d(c, cin, 3, stride=1, padding=1)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)) and m is not self.head:
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected N x {self.config.in_channels} x H x W, got {tuple(x.shape)}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(f"spatial size {tuple(x.shape[2:])} must be divisible by 4")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Return the unclamped restoration (training path)."""
        self.check_input(x)
        s1 = F.relu(self.conv1(x))
        s2 = F.relu(self.conv2(s1))
        out = F.relu(self.conv3(s2))
        for conv in self.body:
            out = F.relu(conv(out))
        out = F.relu(self.up1(out) + s2)
        out = F.relu(self.up2(out) + s1)
        return x + self.head(out)

    @torch.no_grad()
    def restore(self, x: torch.Tensor) -> torch.Tensor:
        """Inference path: restoration clamped to [0, 1]."""
        return self.forward(x).clamp(0.0, 1.0)


def ffsr_loss(output: torch.Tensor, target: torch.Tensor, mask: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Mean of (mask * (output - target))^2 over pixels and channels.

    ``mask`` is H x W (or broadcastable N x 1 x H x W). With ``reduction="none"``
    the per-sample means are returned.
    """
    if output.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(output.shape)} vs {tuple(target.shape)}")
    if mask.shape[-2:] != output.shape[-2:]:
        raise ValueError(f"mask {tuple(mask.shape)} does not match image {tuple(output.shape)}")
    sq = (mask * (output - target)) ** 2
    if reduction == "none":
        return sq.flatten(1).mean(dim=1)
    return sq.mean()


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
