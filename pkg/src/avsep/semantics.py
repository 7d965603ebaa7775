"""Semantic front ends and the visual-occlusion simulator.

The visual and audio encoders here are small trainable stand-ins for a large
pretrained audio-visual recognizer: a residual-CNN + TCN lip encoder, a
log-magnitude-spectrum audio encoder, and an MLP that fuses the two streams.
The fusion is residual around the video stream with a zero-initialized final
layer, so a freshly initialized audio-visual stream equals the video-only
stream exactly; the audio-visual increment is learned during refinement.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .dsp import StftConfig, Waveform, stft_tensor
from .errors import InvalidInputError

MOUTH_SIZE = 88
DEFAULT_FPS = 25
DEFAULT_SEMANTIC_DIM = 64

VIDEO_ONLY = "video-only"
AUDIO = "audio"
AUDIO_VISUAL = "audio-visual"

_MROI_MAGIC = b"MROI"
_LOG_EPS = 1e-8


@dataclass(frozen=True)
class MouthFrames:
    """Grayscale mouth-ROI sequence: uint8, (T_v, 88, 88), 25 fps."""

    frames: np.ndarray
    fps: int = DEFAULT_FPS

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 3 or frames.shape[1:] != (MOUTH_SIZE, MOUTH_SIZE):
            raise InvalidInputError(
                f"mouth frames must be (T, {MOUTH_SIZE}, {MOUTH_SIZE}), got {frames.shape}"
            )
        if frames.dtype != np.uint8:
            raise InvalidInputError(f"mouth frames must be uint8, got {frames.dtype}")
        if self.fps <= 0:
            raise InvalidInputError("fps must be positive")
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        """Frames as floats in [0, 1]."""
        return torch.as_tensor(self.frames, dtype=dtype) / 255.0


@dataclass(frozen=True)
class SemanticStream:
    """Per-speaker semantic feature sequence, (T1, Cv), tagged by producing stage."""

    features: torch.Tensor
    source_stage: str

    def __post_init__(self):
        if self.features.ndim != 2:
            raise InvalidInputError(
                f"semantic stream must be (T1, Cv), got {tuple(self.features.shape)}"
            )
        if not torch.all(torch.isfinite(self.features)):
            raise InvalidInputError("semantic stream contains non-finite entries")
        if self.source_stage not in (VIDEO_ONLY, AUDIO, AUDIO_VISUAL):
            raise InvalidInputError(f"unknown source stage {self.source_stage!r}")

    @property
    def num_steps(self) -> int:
        return self.features.shape[0]


def occlude(m: MouthFrames, n_missing: int, rng_seed: int) -> MouthFrames:
    """Zero out exactly `n_missing` consecutive frames at a seeded uniform start.

    The start index is uniform over [0, T_v - n_missing]; callers simulating
    multiple occluded speakers invoke this independently per speaker.
    """
    t_v = m.num_frames
    if not 0 <= n_missing <= t_v:
        raise InvalidInputError(f"n_missing must be in [0, {t_v}], got {n_missing}")
    rng = np.random.default_rng(rng_seed)
    start = int(rng.integers(0, t_v - n_missing + 1))
    frames = m.frames.copy()
    frames[start : start + n_missing] = 0
    return MouthFrames(frames, fps=m.fps)


class _ResidualBlock(nn.Module):
    """Two 3x3 convolutions with batch norm and PReLU; 1x1 skip when widths differ."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.act1 = nn.PReLU()
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.act2 = nn.PReLU()

    def forward(self, x):
        y = self.bn2(self.conv2(self.act1(self.bn1(self.conv1(x)))))
        return self.act2(y + self.skip(x))


class VisualEncoder(nn.Module):
    """Lip-sequence encoder: 3 residual conv blocks -> global pool -> dilated TCN.

    Input (B, T, 88, 88) floats in [0, 1]; output (B, T, Cv).  Spatial size is
    halved by a stride-2 max pool after each block (88 -> 44 -> 22 -> 11).
    """

    def __init__(
        self,
        embed_dim: int = DEFAULT_SEMANTIC_DIM,
        channels: tuple[int, ...] = (16, 32, 64),
        tcn_dilations: tuple[int, ...] = (1, 2, 4),
    ):
        super().__init__()
        widths = (1,) + channels
        self.blocks = nn.ModuleList(
            _ResidualBlock(widths[i], widths[i + 1]) for i in range(len(channels))
        )
        self.pool = nn.MaxPool2d(2)
        # replicate padding keeps constant sequences constant at the borders
        self.tcn_convs = nn.ModuleList(
            nn.Conv1d(
                channels[-1], channels[-1], 3, dilation=d, padding=d,
                padding_mode="replicate",
            )
            for d in tcn_dilations
        )
        self.tcn_acts = nn.ModuleList(nn.PReLU() for _ in tcn_dilations)
        self.proj = nn.Linear(channels[-1], embed_dim)

    def spatial_features(self, frames: torch.Tensor) -> torch.Tensor:
        """(N, 1, H, W) -> (N, C) per-frame embedding after the conv trunk."""
        x = frames
        for block in self.blocks:
            x = self.pool(block(x))
        return x.mean(dim=(2, 3))

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.shape[-2:] != (MOUTH_SIZE, MOUTH_SIZE):
            raise InvalidInputError(
                f"expected {MOUTH_SIZE}x{MOUTH_SIZE} frames, got {tuple(frames.shape[-2:])}"
            )
        b, t = frames.shape[0], frames.shape[1]
        x = self.spatial_features(frames.reshape(b * t, 1, MOUTH_SIZE, MOUTH_SIZE))
        x = x.reshape(b, t, -1).transpose(1, 2)  # (B, C, T)
        for conv, act in zip(self.tcn_convs, self.tcn_acts):
            x = x + act(conv(x))
        return self.proj(x.transpose(1, 2))  # (B, T, Cv)


class AudioSemanticEncoder(nn.Module):
    """Log-magnitude spectrum -> temporal convs -> adaptive pool to the video rate.

    Input (B, n) samples; output (B, T1, Cv) with T1 = n * fps / sample_rate.
    """

    def __init__(
        self,
        stft_cfg: StftConfig,
        embed_dim: int = DEFAULT_SEMANTIC_DIM,
        hidden: int = 128,
        fps: int = DEFAULT_FPS,
    ):
        super().__init__()
        self.stft_cfg = stft_cfg
        self.fps = fps
        self.conv1 = nn.Conv1d(
            stft_cfg.num_bins, hidden, 3, padding=1, padding_mode="replicate"
        )
        self.act1 = nn.PReLU()
        self.conv2 = nn.Conv1d(hidden, hidden, 3, padding=1, padding_mode="replicate")
        self.act2 = nn.PReLU()
        self.proj = nn.Linear(hidden, embed_dim)

    def num_steps(self, num_samples: int) -> int:
        steps = num_samples * self.fps
        if steps % self.stft_cfg.sample_rate != 0:
            raise InvalidInputError(
                f"{num_samples} samples is not a whole number of {self.fps} fps frames"
            )
        return steps // self.stft_cfg.sample_rate

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        t1 = self.num_steps(wave.shape[-1])
        spec = stft_tensor(wave, self.stft_cfg)  # (B, 2, T, F)
        logmag = torch.log(
            torch.sqrt(spec[:, 0] ** 2 + spec[:, 1] ** 2) + _LOG_EPS
        )  # (B, T, F)
        x = logmag.transpose(1, 2)  # (B, F, T)
        x = self.act1(self.conv1(x))
        x = self.act2(self.conv2(x))
        x = nn.functional.adaptive_avg_pool1d(x, t1)  # (B, hidden, T1)
        return self.proj(x.transpose(1, 2))  # (B, T1, Cv)


class SemanticFusion(nn.Module):
    """Audio-visual fusion: video stream plus an MLP increment over both streams.

    The final layer starts at zero, so the fused stream equals the video stream
    at initialization; refinement training learns the increment.
    """

    def __init__(self, embed_dim: int = DEFAULT_SEMANTIC_DIM):
        super().__init__()
        self.fc1 = nn.Linear(2 * embed_dim, embed_dim)
        self.act = nn.PReLU()
        self.fc2 = nn.Linear(embed_dim, embed_dim)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def increment(self, video: torch.Tensor, audio: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(torch.cat((video, audio), dim=-1))))

    def forward(self, video: torch.Tensor, audio: torch.Tensor) -> torch.Tensor:
        if video.shape != audio.shape:
            raise InvalidInputError(
                f"stream shapes differ: {tuple(video.shape)} vs {tuple(audio.shape)}"
            )
        return video + self.increment(video, audio)


def vsr_encode(encoder: VisualEncoder, m: MouthFrames) -> SemanticStream:
    """Encode mouth frames into a video-only semantic stream (T1 = T_v)."""
    features = encoder(m.tensor(dtype=_module_dtype(encoder)).unsqueeze(0)).squeeze(0)
    return SemanticStream(features=features, source_stage=VIDEO_ONLY)


def asr_encode(encoder: AudioSemanticEncoder, w: Waveform) -> SemanticStream:
    """Encode a waveform into an audio semantic stream at the video frame rate."""
    if w.sample_rate != encoder.stft_cfg.sample_rate:
        raise InvalidInputError(
            f"waveform rate {w.sample_rate} != encoder rate {encoder.stft_cfg.sample_rate}"
        )
    features = encoder(w.tensor(dtype=_module_dtype(encoder)).unsqueeze(0)).squeeze(0)
    return SemanticStream(features=features, source_stage=AUDIO)


def av_fuse(fusion: SemanticFusion, v: SemanticStream, a: SemanticStream) -> SemanticStream:
    """Fuse a video-only and an audio stream into an audio-visual stream."""
    if v.source_stage != VIDEO_ONLY or a.source_stage != AUDIO:
        raise InvalidInputError("av_fuse expects a video-only and an audio stream")
    if v.num_steps != a.num_steps:
        raise InvalidInputError(
            f"stream lengths differ: {v.num_steps} vs {a.num_steps}"
        )
    features = fusion(v.features.unsqueeze(0), a.features.unsqueeze(0)).squeeze(0)
    return SemanticStream(features=features, source_stage=AUDIO_VISUAL)


def _module_dtype(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


def save_mouth_frames(path: str | Path, m: MouthFrames) -> None:
    """Write mouth frames: a directory of PGM files, or a packed MROI container."""
    path = Path(path)
    if path.suffix == "":  # no extension: a directory of PGM frames
        path.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(m.frames):
            _write_pgm(path / f"frame_{i:05d}.pgm", frame)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        _write_mroi(path, m)


def load_mouth_frames(path: str | Path, fps: int = DEFAULT_FPS) -> MouthFrames:
    """Read mouth frames from a PGM directory or an MROI container file."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("frame_*.pgm"))
        if not files:
            raise InvalidInputError(f"{path}: no frame_*.pgm files found")
        frames = np.stack([_read_pgm(f) for f in files])
        return MouthFrames(frames, fps=fps)
    return _read_mroi(path, fps=fps)


def _write_mroi(path: Path, m: MouthFrames) -> None:
    t, h, w = m.frames.shape
    with open(path, "wb") as fh:
        fh.write(_MROI_MAGIC + struct.pack("<III", t, h, w))
        fh.write(m.frames.tobytes())


def _read_mroi(path: Path, fps: int) -> MouthFrames:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != _MROI_MAGIC:
            raise InvalidInputError(f"{path}: not an MROI container")
        t, h, w = struct.unpack("<III", header[4:])
        payload = fh.read(t * h * w)
    if len(payload) != t * h * w:
        raise InvalidInputError(f"{path}: truncated MROI payload")
    frames = np.frombuffer(payload, dtype=np.uint8).reshape(t, h, w)
    return MouthFrames(frames.copy(), fps=fps)


def _write_pgm(path: Path, frame: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(f"P5\n{frame.shape[1]} {frame.shape[0]}\n255\n".encode())
        fh.write(frame.tobytes())


def _read_pgm(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise InvalidInputError(f"{path}: not a binary PGM file")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":  # comment line
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise InvalidInputError(f"{path}: only 8-bit PGM is supported")
    pixels = np.frombuffer(data[pos : pos + width * height], dtype=np.uint8)
    if pixels.size != width * height:
        raise InvalidInputError(f"{path}: truncated PGM payload")
    return pixels.reshape(height, width).copy()
