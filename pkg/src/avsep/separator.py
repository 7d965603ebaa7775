"""Multi-range spectro-temporal separation backbone.

Each block runs three stages: a multi-branch recurrent module along the
frequency axis, the same along the time axis, and full-band multi-head
self-attention over frames.  Every branch unfolds its axis into windows of
size I at stride J, projects to the recurrent width, runs a bidirectional
LSTM, folds back with a transposed convolution, and adds the input
residually.  The three branches of a stage share one LSTM (each keeps its
own projection and fold-back), which is what keeps the parameter budget at
the reported scale; branch outputs are summed and layer-normalized over
channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InvalidInputError

AXIS_TIME = "time"
AXIS_FREQUENCY = "frequency"

GLOBAL_BRANCH = (1, 1)
DEFAULT_BRANCHES = ((1, 1), (4, 1), (8, 1))


@dataclass(frozen=True)
class MstConfig:
    """Separator hyperparameters: channels, recurrent width, depth, attention."""

    channels: int = 192
    hidden: int = 96
    num_blocks: int = 6
    num_heads: int = 4
    branches: tuple[tuple[int, int], ...] = DEFAULT_BRANCHES
    qk_head_dim: int = 2

    def __post_init__(self):
        if self.hidden <= 0:
            raise ConfigError("hidden size must be positive")
        if self.num_blocks < 1:
            raise ConfigError("need at least one separation block")
        if self.channels % self.num_heads != 0:
            raise ConfigError(
                f"head count {self.num_heads} must divide the attention width {self.channels}"
            )
        if self.qk_head_dim < 1:
            raise ConfigError("query/key head width must be positive")
        if GLOBAL_BRANCH not in self.branches:
            raise ConfigError("the branch list must contain the (1, 1) global branch")
        for i, j in self.branches:
            if i < 1 or j < 1:
                raise ConfigError(f"branch window/stride must be >= 1, got ({i}, {j})")


def _unfolded_length(length: int, window: int, stride: int) -> tuple[int, int]:
    """(positions, right-padding) so that (padded - window) is divisible by stride."""
    positions = max(math.ceil(max(length - window, 0) / stride), 0) + 1
    padded = (positions - 1) * stride + window
    return positions, padded - length


def unfold_axis(x: torch.Tensor, axis: str, window: int, stride: int) -> torch.Tensor:
    """Sliding windows along time or frequency, window merged into channels.

    Input (..., C, T, F); the chosen axis is zero-padded on the right, windows
    of size `window` at stride `stride` are extracted, and the window index is
    merged into the channel axis (channel-major: output channel c * I + i holds
    window element i of channel c).  The (1, 1) global branch is an identity
    reshape.
    """
    if window < 1 or stride < 1:
        raise InvalidInputError(f"window and stride must be >= 1, got ({window}, {stride})")
    if x.ndim not in (3, 4):
        raise InvalidInputError(f"expected (C, T, F) or (B, C, T, F), got {tuple(x.shape)}")
    squeeze = x.ndim == 3
    if squeeze:
        x = x.unsqueeze(0)
    if axis == AXIS_FREQUENCY:
        _, pad = _unfolded_length(x.shape[-1], window, stride)
        x = F.pad(x, (0, pad))
        w = x.unfold(-1, window, stride)  # (B, C, T, F', I)
        out = w.permute(0, 1, 4, 2, 3)  # (B, C, I, T, F')
    elif axis == AXIS_TIME:
        _, pad = _unfolded_length(x.shape[-2], window, stride)
        x = F.pad(x, (0, 0, 0, pad))
        w = x.unfold(-2, window, stride)  # (B, C, T', F, I)
        out = w.permute(0, 1, 4, 2, 3)  # (B, C, I, T', F)
    else:
        raise InvalidInputError(f"axis must be {AXIS_TIME!r} or {AXIS_FREQUENCY!r}")
    b, c = out.shape[0], out.shape[1]
    out = out.reshape(b, c * window, out.shape[3], out.shape[4])
    return out.squeeze(0) if squeeze else out


class ChannelLayerNorm(nn.Module):
    """Layer normalization over the channel axis at every (t, f) position."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(1, channels, 1, 1))
        self.beta = nn.Parameter(torch.zeros(1, channels, 1, 1))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mu = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, unbiased=False, keepdim=True)
        return (x - mu) / torch.sqrt(var + self.eps) * self.gamma + self.beta


class _BranchHead(nn.Module):
    """Per-branch input projection and fold-back deconvolution.

    The projection is the pointwise linear C*I -> H on unfolded windows,
    realized as a kernel-I stride-J convolution so the window tensor is never
    materialized: conv weight [h, c, i] is linear weight [h, c*I + i].
    """

    def __init__(self, channels: int, hidden: int, window: int, stride: int):
        super().__init__()
        self.window = window
        self.stride = stride
        self.proj = nn.Conv1d(channels, hidden, window, stride=stride)
        self.deconv = nn.ConvTranspose1d(2 * hidden, channels, window, stride=stride)


class MultiRangeStage(nn.Module):
    """Parallel multi-range recurrent module along one axis.

    Branch outputs (each residual around the stage input) are summed and
    layer-normalized over channels.  One bidirectional LSTM is shared by all
    branches.
    """

    def __init__(
        self,
        axis: str,
        channels: int,
        hidden: int,
        branches: tuple[tuple[int, int], ...] = DEFAULT_BRANCHES,
    ):
        super().__init__()
        if axis not in (AXIS_TIME, AXIS_FREQUENCY):
            raise ConfigError(f"unknown axis {axis!r}")
        self.axis = axis
        self.channels = channels
        self.rnn = nn.LSTM(hidden, hidden, batch_first=True, bidirectional=True)
        self.heads = nn.ModuleList(
            _BranchHead(channels, hidden, i, j) for i, j in branches
        )
        self.norm = ChannelLayerNorm(channels)

    def _to_sequences(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, T, F) -> (N, C, L) with L along the stage axis."""
        b, c, t, f = x.shape
        if self.axis == AXIS_FREQUENCY:
            return x.permute(0, 2, 1, 3).reshape(b * t, c, f)
        return x.permute(0, 3, 1, 2).reshape(b * f, c, t)

    def _from_sequences(self, seq: torch.Tensor, shape: tuple[int, ...]) -> torch.Tensor:
        b, c, t, f = shape
        if self.axis == AXIS_FREQUENCY:
            return seq.reshape(b, t, c, f).permute(0, 2, 1, 3)
        return seq.reshape(b, f, c, t).permute(0, 2, 3, 1)

    def _branch_sequences(self, seq: torch.Tensor, head: _BranchHead) -> torch.Tensor:
        """conv-project -> shared BLSTM -> fold back, all in (N, C, L) layout."""
        length = seq.shape[-1]
        _, pad = _unfolded_length(length, head.window, head.stride)
        if pad:
            seq = F.pad(seq, (0, pad))
        h = head.proj(seq)  # (N, H, positions)
        r = self.rnn(h.transpose(1, 2))[0]  # (N, positions, 2H)
        return head.deconv(r.transpose(1, 2))[..., :length]  # (N, C, L)

    def branch_forward(self, x: torch.Tensor, index: int) -> torch.Tensor:
        """One branch: unfold -> project -> shared BLSTM -> fold back -> residual."""
        seq = self._to_sequences(x)
        out = self._branch_sequences(seq, self.heads[index])
        return x + self._from_sequences(out, x.shape)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        seq = self._to_sequences(x)
        total = self._branch_sequences(seq, self.heads[0])
        for head in self.heads[1:]:
            total = total + self._branch_sequences(seq, head)
        out = len(self.heads) * x + self._from_sequences(total, x.shape)
        return self.norm(out)


class FullBandAttention(nn.Module):
    """Multi-head self-attention over frames with all-frequency embeddings.

    Queries/keys/values are pointwise-conv features concatenated across the
    whole frequency axis per frame; the attended context is projected back to
    C channels and added residually.
    """

    def __init__(self, channels: int, num_heads: int, qk_head_dim: int):
        super().__init__()
        if channels % num_heads != 0:
            raise ConfigError("head count must divide the channel count")
        self.num_heads = num_heads
        self.qk_head_dim = qk_head_dim
        self.head_dim = channels // num_heads
        qk = num_heads * qk_head_dim
        self.conv_q = nn.Conv2d(channels, qk, 1)
        self.norm_q = nn.Sequential(nn.PReLU(), ChannelLayerNorm(qk))
        self.conv_k = nn.Conv2d(channels, qk, 1)
        self.norm_k = nn.Sequential(nn.PReLU(), ChannelLayerNorm(qk))
        self.conv_v = nn.Conv2d(channels, channels, 1)
        self.norm_v = nn.Sequential(nn.PReLU(), ChannelLayerNorm(channels))
        self.out = nn.Sequential(
            nn.Conv2d(channels, channels, 1), nn.PReLU(), ChannelLayerNorm(channels)
        )

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Softmax attention matrix, shape (B, heads, T, T); rows sum to 1."""
        return self._attend(x)[1]

    def _attend(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, c, t, f = x.shape
        h, e = self.num_heads, self.qk_head_dim
        q = self.norm_q(self.conv_q(x)).reshape(b, h, e, t, f)
        k = self.norm_k(self.conv_k(x)).reshape(b, h, e, t, f)
        v = self.norm_v(self.conv_v(x)).reshape(b, h, self.head_dim, t, f)
        q = q.permute(0, 1, 3, 2, 4).reshape(b * h, t, e * f)
        k = k.permute(0, 1, 3, 2, 4).reshape(b * h, t, e * f)
        v = v.permute(0, 1, 3, 2, 4).reshape(b * h, t, self.head_dim * f)
        scores = q @ k.transpose(1, 2) / math.sqrt(e * f)
        weights = torch.softmax(scores, dim=-1)  # (B*h, T, T)
        ctx = weights @ v  # (B*h, T, head_dim*F)
        ctx = ctx.reshape(b, h, t, self.head_dim, f).permute(0, 1, 3, 2, 4)
        ctx = ctx.reshape(b, c, t, f)
        return ctx, weights.reshape(b, h, t, t)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        ctx, _ = self._attend(x)
        return x + self.out(ctx)


class MstBlock(nn.Module):
    """One separation block: frequency stage, time stage, full-band attention."""

    def __init__(self, cfg: MstConfig):
        super().__init__()
        self.spectral = MultiRangeStage(AXIS_FREQUENCY, cfg.channels, cfg.hidden, cfg.branches)
        self.temporal = MultiRangeStage(AXIS_TIME, cfg.channels, cfg.hidden, cfg.branches)
        self.attention = FullBandAttention(cfg.channels, cfg.num_heads, cfg.qk_head_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.attention(self.temporal(self.spectral(x)))


class MstSeparator(nn.Module):
    """B stacked separation blocks; shape (B, C, T, F) is preserved throughout."""

    def __init__(self, cfg: MstConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(MstBlock(cfg) for _ in range(cfg.num_blocks))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class SpectrogramDecoder(nn.Module):
    """Transposed 1x1 convolution mapping C channels to per-speaker complex spectra."""

    def __init__(self, channels: int, num_speakers: int):
        super().__init__()
        if num_speakers < 1:
            raise InvalidInputError(f"speaker count must be >= 1, got {num_speakers}")
        self.num_speakers = num_speakers
        self.deconv = nn.ConvTranspose2d(channels, 2 * num_speakers, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # (B, C, T, F) -> (B, S, 2, T, F)
        b, _, t, f = x.shape
        return self.deconv(x).reshape(b, self.num_speakers, 2, t, f)


def parameter_report(module: nn.Module, title: str = "model") -> str:
    """Structured text record of every parameter: name, shape, count, total."""
    lines = [f"# parameter report: {title}", f"{'name':60s} {'shape':>20s} {'count':>12s}"]
    total = 0
    for name, p in module.named_parameters():
        shape = "x".join(str(d) for d in p.shape) or "scalar"
        count = p.numel()
        total += count
        lines.append(f"{name:60s} {shape:>20s} {count:>12d}")
    lines.append(f"{'total':60s} {'':>20s} {total:>12d}")
    return "\n".join(lines)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
