"""Dual-stream residual feature extractor with resolution-driven fusion weights."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class RifeConfig:
    n_blocks: int = 4
    widths: tuple[int, ...] = (16, 32, 64, 128)
    units_per_block: int = 2
    embedding_dim: int = 256
    n_classes: int = 16
    beta: float = 0.1
    dual: bool = True
    head_hidden: int = 64

    def __post_init__(self) -> None:
        self.widths = tuple(int(w) for w in self.widths)
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if len(self.widths) != self.n_blocks:
            raise ValueError(f"need {self.n_blocks} widths, got {len(self.widths)}")
        if self.embedding_dim < 8:
            raise ValueError("embedding_dim must be >= 8")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


class ResidualUnit(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


def make_stream(cin: int, cout: int, units: int, stride: int) -> nn.Sequential:
    layers = [ResidualUnit(cin, cout, stride)]
    layers += [ResidualUnit(cout, cout, 1) for _ in range(units - 1)]
    return nn.Sequential(*layers)


class WeightHead(nn.Module):
    """GAP -> FC(hidden) -> ReLU -> FC(1) -> sigmoid; one scalar per sample."""

    def __init__(self, channels: int, hidden: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        pooled = fmap.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(pooled)))).squeeze(1)


class DsbState(NamedTuple):
    m_low: torch.Tensor
    m_high: torch.Tensor
    w_low: torch.Tensor
    w_high: torch.Tensor
    fused: torch.Tensor


def fuse(m_low: torch.Tensor, m_high: torch.Tensor, w_low: torch.Tensor, w_high: torch.Tensor) -> torch.Tensor:
    """Per-sample weighted sum of the two stream maps."""
    return w_low.view(-1, 1, 1, 1) * m_low + w_high.view(-1, 1, 1, 1) * m_high


class DualStreamBlock(nn.Module):
    """Two parameter-independent copies of one backbone stage, fused by predicted weights.

    The high stream starts as an exact copy of the low one. Setting
    ``forced_weights`` to a (w_low, w_high) pair bypasses the weight heads.
    """

    def __init__(self, cin: int, cout: int, units: int, stride: int, head_hidden: int = 64):
        super().__init__()
        self.low = make_stream(cin, cout, units, stride)
        self.high = copy.deepcopy(self.low)
        self.head_low = WeightHead(cout, head_hidden)
        self.head_high = WeightHead(cout, head_hidden)
        self.forced_weights: tuple[float, float] | None = None

    def forward(self, x: torch.Tensor) -> DsbState:
        m_low, m_high = self.low(x), self.high(x)
        if self.forced_weights is None:
            w_low, w_high = self.head_low(m_low), self.head_high(m_high)
        else:
            n = x.shape[0]
            w_low = torch.full((n,), float(self.forced_weights[0]), dtype=x.dtype)
            w_high = torch.full((n,), float(self.forced_weights[1]), dtype=x.dtype)
        return DsbState(m_low, m_high, w_low, w_high, fuse(m_low, m_high, w_low, w_high))


class SingleStreamBlock(nn.Module):
    """Baseline stage: one stream, no fusion weights."""

    def __init__(self, cin: int, cout: int, units: int, stride: int, head_hidden: int = 64):
        super().__init__()
        self.low = make_stream(cin, cout, units, stride)

    def forward(self, x: torch.Tensor) -> DsbState:
        m = self.low(x)
        return DsbState(m, m, None, None, m)


class RifeOutput(NamedTuple):
    embedding: torch.Tensor
    logits: torch.Tensor
    block_weights: list[tuple[torch.Tensor, torch.Tensor]]


class RIFE(nn.Module):
    def __init__(self, config: RifeConfig | None = None):
        super().__init__()
        self.config = config = config or RifeConfig()
        w0 = config.widths[0]
        self.stem = nn.Sequential(nn.Conv2d(3, w0, 3, stride=2, padding=1, bias=False), nn.BatchNorm2d(w0), nn.ReLU())
        block_cls = DualStreamBlock if config.dual else SingleStreamBlock
        blocks, cin = [], w0
        for t, cout in enumerate(config.widths):
            blocks.append(block_cls(cin, cout, config.units_per_block, 1 if t == 0 else 2, config.head_hidden))
            cin = cout
        self.blocks = nn.ModuleList(blocks)
        self.embed = nn.Linear(cin, config.embedding_dim)
        self.classifier = nn.Linear(config.embedding_dim, config.n_classes)

    def forward(self, x: torch.Tensor) -> RifeOutput:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected N x 3 x H x W, got {tuple(x.shape)}")
        out = self.stem(x)
        weights = []
        for block in self.blocks:
            state = block(out)
            out = state.fused
            if state.w_low is not None:
                weights.append((state.w_low, state.w_high))
        f = self.embed(out.mean(dim=(2, 3)))
        return RifeOutput(f, self.classifier(f), weights)

    def dual_blocks(self) -> list[DualStreamBlock]:
        return [b for b in self.blocks if isinstance(b, DualStreamBlock)]


def _check_resolution(r) -> None:
    r = torch.as_tensor(r)
    if torch.any(r <= 0) or torch.any(r > 1):
        raise ValueError("resolution must lie in (0, 1]")


def rw_loss(w_low, w_high, r) -> torch.Tensor:
    """(w_low - (1 - r))^2 + (w_high - r)^2, element-wise over the batch."""
    _check_resolution(r)
    return (w_low - (1 - r)) ** 2 + (w_high - r) ** 2


def xent_loss(logits: torch.Tensor, labels: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    labels = torch.as_tensor(labels)
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise ValueError(f"label outside [0, {logits.shape[-1]})")
    return F.cross_entropy(logits, labels, reduction=reduction)


@dataclass
class RifeLoss:
    total: torch.Tensor
    xent: torch.Tensor
    rw: torch.Tensor = field(default_factory=lambda: torch.tensor(0.0))


def rife_loss(output: RifeOutput, labels: torch.Tensor, r: torch.Tensor, beta: float = 0.1) -> RifeLoss:
    """Cross entropy plus beta times the summed per-block weighting penalties (batch means)."""
    xent = xent_loss(output.logits, labels)
    if not output.block_weights:
        return RifeLoss(xent, xent, torch.zeros((), dtype=xent.dtype))
    rw = sum(rw_loss(wl, wh, r) for wl, wh in output.block_weights).mean()
    return RifeLoss(xent + beta * rw, xent, rw)
