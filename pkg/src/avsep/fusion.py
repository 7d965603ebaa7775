"""Speaker-wise fusion of the audio feature map with per-speaker semantic streams."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InvalidInputError

MAX_SPEAKERS = 4


class SemanticAligner(nn.Module):
    """Project a semantic stream to C channels and align it to the (T, F) grid.

    Per timestep linear projection Cv -> C, linear interpolation along time
    from T1 up to T, and replication across all frequency bins.
    """

    def __init__(self, semantic_dim: int, channels: int):
        super().__init__()
        self.proj = nn.Linear(semantic_dim, channels)

    def forward(self, stream: torch.Tensor, num_frames: int, num_bins: int) -> torch.Tensor:
        # stream: (B, T1, Cv) -> (B, C, T, F), constant along F
        t1 = stream.shape[1]
        if t1 < 2:
            raise InvalidInputError("temporal interpolation needs at least 2 steps")
        if num_frames < t1:
            raise InvalidInputError(
                f"cannot align {t1} steps onto a shorter axis of {num_frames} frames"
            )
        x = self.proj(stream).transpose(1, 2)  # (B, C, T1)
        x = F.interpolate(x, size=num_frames, mode="linear", align_corners=True)
        return x.unsqueeze(-1).expand(-1, -1, -1, num_bins)


class SpeakerFusion(nn.Module):
    """Fuse the audio map with S aligned speaker streams.

    A shared pointwise two-layer MLP produces one cross-modal map per speaker
    plus one joint map over the summed streams; these are concatenated with the
    audio map ((S + 2) * C channels) and reduced back to C channels by a 1x1
    convolution, group normalization, and PReLU.  A missing speaker is an
    all-zero stream.
    """

    def __init__(self, channels: int, num_speakers: int, norm_groups: int = 8):
        super().__init__()
        if not 1 <= num_speakers <= MAX_SPEAKERS:
            raise ConfigError(f"speaker count must be 1..{MAX_SPEAKERS}, got {num_speakers}")
        if channels % norm_groups != 0:
            raise ConfigError(
                f"channel count {channels} must be divisible by {norm_groups} norm groups"
            )
        self.channels = channels
        self.num_speakers = num_speakers
        self.pairwise = self._pointwise_mlp(channels)
        self.joint = self._pointwise_mlp(channels)
        self.reduce = nn.Conv2d((num_speakers + 2) * channels, channels, 1)
        self.norm = nn.GroupNorm(norm_groups, channels)
        self.act = nn.PReLU()

    @staticmethod
    def _pointwise_mlp(channels: int) -> nn.Sequential:
        return nn.Sequential(
            nn.Conv2d(2 * channels, channels, 1),
            nn.PReLU(),
            nn.Conv2d(channels, channels, 1),
        )

    def _check(self, audio: torch.Tensor, aligned: torch.Tensor) -> None:
        if aligned.ndim != 5 or aligned.shape[1] != self.num_speakers:
            raise InvalidInputError(
                f"expected (B, {self.num_speakers}, C, T, F) streams, got {tuple(aligned.shape)}"
            )
        if aligned.shape[0] != audio.shape[0] or aligned.shape[2:] != audio.shape[1:]:
            raise InvalidInputError(
                f"stream shape {tuple(aligned.shape)} does not match audio {tuple(audio.shape)}"
            )

    def cross_modal_stack(self, audio: torch.Tensor, aligned: torch.Tensor) -> torch.Tensor:
        """Pre-reduction concatenation: (B, (S + 2) * C, T, F).

        Slot order is [audio, per-speaker maps..., joint map]; swapping two
        speaker streams permutes only the per-speaker slots.
        """
        self._check(audio, aligned)
        maps = [
            self.pairwise(torch.cat((audio, aligned[:, i]), dim=1))
            for i in range(self.num_speakers)
        ]
        joint = self.joint(torch.cat((audio, aligned.sum(dim=1)), dim=1))
        return torch.cat([audio] + maps + [joint], dim=1)

    def forward(self, audio: torch.Tensor, aligned: torch.Tensor) -> torch.Tensor:
        # audio: (B, C, T, F); aligned: (B, S, C, T, F) -> (B, C, T, F)
        return self.act(self.norm(self.reduce(self.cross_modal_stack(audio, aligned))))
