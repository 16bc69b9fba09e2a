"""Visually conditioned U-Net mask predictor, mask heads and training loss."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InvalidInputError

CE_EPS = 1e-7


@dataclass(frozen=True)
class SeparatorConfig:
    head: str = "softmax"
    depth: int = 7
    base_channels: int = 32
    max_channels: int = 512
    feature_dim: int = 32
    input_shape: tuple = (256, 256)
    conditioning: str = "bottleneck"
    upsample: str = "bilinear"
    feature_norm: str = "batch"

    def __post_init__(self):
        if self.head not in ("sigmoid", "softmax"):
            raise ConfigError(f"head must be 'sigmoid' or 'softmax', not {self.head!r}")
        if self.conditioning != "bottleneck":
            raise ConfigError("only bottleneck conditioning is implemented")
        if self.upsample not in ("bilinear", "nearest"):
            raise ConfigError(f"upsample must be 'bilinear' or 'nearest', not {self.upsample!r}")
        if self.feature_norm not in ("batch", "layer", "none"):
            raise ConfigError(f"feature_norm must be 'batch', 'layer' or 'none', not {self.feature_norm!r}")
        if self.depth < 1:
            raise ConfigError("U-Net depth must be >= 1")
        for n in self.input_shape:
            if n % (2 ** self.depth):
                raise ConfigError(f"input size {n} is not divisible by 2**depth={2 ** self.depth}")


class _Down(nn.Module):
    def __init__(self, cin, cout, norm=True):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 4, stride=2, padding=1, bias=not norm)
        self.norm = nn.BatchNorm2d(cout) if norm else nn.Identity()

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), 0.2)


class _Up(nn.Module):
    def __init__(self, cin, cout, mode="bilinear"):
        super().__init__()
        self.mode = mode
        self.conv = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
        self.norm = nn.BatchNorm2d(cout)

    def forward(self, x):
        if self.mode == "nearest":
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        else:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return F.relu(self.norm(self.conv(x)))


class _FeatureNorm(nn.BatchNorm1d):
    """BatchNorm1d that falls back to running statistics for a single-item training batch."""

    def forward(self, x):
        if self.training and x.shape[0] == 1:
            return F.batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias, False, 0.0, self.eps)
        return super().forward(x)


class ConditionedUNet(nn.Module):
    """U-Net whose bottleneck is concatenated with a spatially tiled image feature."""

    def __init__(self, cfg: SeparatorConfig):
        super().__init__()
        self.cfg = cfg
        chans = [min(cfg.base_channels * 2 ** i, cfg.max_channels) for i in range(cfg.depth)]
        self.input_norm = nn.BatchNorm2d(1)
        # crop features come out of a linear layer at a much smaller scale than the
        # bottleneck activations they are concatenated with
        self.feature_norm = {"batch": lambda: _FeatureNorm(cfg.feature_dim),
                             "layer": lambda: nn.LayerNorm(cfg.feature_dim),
                             "none": nn.Identity}[cfg.feature_norm]()
        self.downs = nn.ModuleList()
        cin = 1
        for i, c in enumerate(chans):
            self.downs.append(_Down(cin, c, norm=i > 0))
            cin = c
        self.ups = nn.ModuleList()
        # decoder level i receives the level-(i) encoder skip
        up_in = chans[-1] + cfg.feature_dim
        for i in reversed(range(cfg.depth)):
            cout = chans[i - 1] if i > 0 else cfg.base_channels
            self.ups.append(_Up(up_in, cout, cfg.upsample))
            up_in = cout + (chans[i - 1] if i > 0 else 0)
        self.out = nn.Conv2d(up_in, 1, 3, padding=1)

    def forward(self, spec: torch.Tensor, feature: torch.Tensor) -> torch.Tensor:
        """spec: (B, F, T) or (B, 1, F, T) log-magnitude; feature: (B, C).  Returns (B, F, T) logits."""
        skips = self.encode(spec)
        return self.decode(skips, feature)

    def encode(self, spec: torch.Tensor) -> list:
        """Feature-independent contracting path; returns the per-level activations."""
        if spec.dim() == 3:
            spec = spec.unsqueeze(1)
        if spec.dim() != 4 or spec.shape[1] != 1:
            raise InvalidInputError(f"expected (B, 1, F, T) spectrograms, got {tuple(spec.shape)}")
        if tuple(spec.shape[-2:]) != tuple(self.cfg.input_shape):
            raise InvalidInputError(f"spectrogram shape {tuple(spec.shape[-2:])} != {self.cfg.input_shape}")
        x = self.input_norm(spec)
        skips = []
        for down in self.downs:
            x = down(x)
            skips.append(x)
        return skips

    def decode(self, skips: list, feature: torch.Tensor) -> torch.Tensor:
        x = skips[-1]
        if feature.dim() != 2 or feature.shape[-1] != self.cfg.feature_dim or feature.shape[0] != x.shape[0]:
            raise InvalidInputError(
                f"feature shape {tuple(feature.shape)} incompatible with batch {x.shape[0]}, "
                f"C={self.cfg.feature_dim}")
        feature = self.feature_norm(feature)
        tiled = feature[:, :, None, None].expand(-1, -1, x.shape[2], x.shape[3])
        x = torch.cat([x, tiled], dim=1)
        pending = list(skips[:-1])
        for up in self.ups:
            x = up(x)
            if pending:
                x = torch.cat([x, pending.pop()], dim=1)
        return self.out(x).squeeze(1)


def sigmoid_head(U: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(U)


def softmax_head(U1: torch.Tensor, U2: torch.Tensor):
    """Two-way softmax across the logits of the two conditioned passes."""
    m = torch.maximum(U1, U2)
    e1 = torch.exp(U1 - m)
    e2 = torch.exp(U2 - m)
    z = e1 + e2
    return e1 / z, e2 / z


def apply_head(head: str, U1: torch.Tensor, U2: torch.Tensor):
    if head == "sigmoid":
        return sigmoid_head(U1), sigmoid_head(U2)
    if head == "softmax":
        return softmax_head(U1, U2)
    raise ConfigError(f"unknown head {head!r}")


def per_pixel_cross_entropy(preds, targets, eps: float = CE_EPS) -> torch.Tensor:
    """Binary cross-entropy averaged over pixels and over all sources."""
    if len(preds) != len(targets):
        raise InvalidInputError("need one target per predicted mask")
    losses = []
    for p, t in zip(preds, targets):
        t = torch.as_tensor(t, dtype=p.dtype)
        if p.shape != t.shape:
            raise InvalidInputError(f"prediction shape {tuple(p.shape)} != target shape {tuple(t.shape)}")
        p = p.clamp(eps, 1 - eps)
        losses.append(-(t * torch.log(p) + (1 - t) * torch.log(1 - p)).mean())
    return torch.stack(losses).mean()
