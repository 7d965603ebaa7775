"""Multi-scale convolutional audio encoder over the complex spectrogram."""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import ConfigError


class MultiScaleEncoder(nn.Module):
    """Four parallel 2-D conv branches with different receptive fields.

    A 1x1 convolution plus three 3x3 convolutions with dilations 1, 2, 3, each
    producing C/4 channels, concatenated channel-wise and passed through group
    normalization and PReLU.  'Same' zero padding preserves (T, F).
    """

    def __init__(self, channels: int = 192, in_channels: int = 2, norm_groups: int = 8):
        super().__init__()
        if channels % 4 != 0:
            raise ConfigError(f"channel count {channels} must be divisible by 4")
        if channels % norm_groups != 0:
            raise ConfigError(
                f"channel count {channels} must be divisible by {norm_groups} norm groups"
            )
        branch = channels // 4
        self.branch1x1 = nn.Conv2d(in_channels, branch, 1)
        self.branch3x3 = nn.ModuleList(
            nn.Conv2d(in_channels, branch, 3, padding=d, dilation=d) for d in (1, 2, 3)
        )
        self.norm = nn.GroupNorm(norm_groups, channels)
        self.act = nn.PReLU()
        self.channels = channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, 2, T, F) -> (B, C, T, F)
        parts = [self.branch1x1(x)] + [conv(x) for conv in self.branch3x3]
        return self.act(self.norm(torch.cat(parts, dim=1)))
