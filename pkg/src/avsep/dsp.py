"""Deterministic signal front end: STFT/iSTFT and SNR-controlled mixture synthesis.

All transforms here are pure functions of their inputs.  The tensor-level
functions (`stft_tensor` / `istft_tensor`) are differentiable and accept a
leading batch dimension; the `Waveform`-level wrappers run in float64 and
return the domain dataclasses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.io import wavfile

from .errors import ConfigMismatchError, DegenerateSourceError, InvalidInputError

DEFAULT_SAMPLE_RATE = 16000
_ENVELOPE_EPS = 1e-10


@dataclass(frozen=True)
class Waveform:
    """Mono audio: linear-amplitude samples at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise InvalidInputError(f"waveform must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise InvalidInputError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise InvalidInputError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    @property
    def num_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate

    def power(self) -> float:
        """Full-utterance average power (mean square)."""
        return float(np.mean(self.samples**2))

    def tensor(self, dtype=torch.float64) -> torch.Tensor:
        return torch.as_tensor(self.samples, dtype=dtype)


@dataclass(frozen=True)
class StftConfig:
    """Analysis/synthesis configuration: sqrt-Hann window, 75% overlap by default."""

    window_ms: float = 32.0
    hop_ms: float = 8.0
    window: str = "sqrt_hann"
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if self.window != "sqrt_hann":
            raise InvalidInputError(f"unsupported window kind: {self.window!r}")
        if self.sample_rate <= 0:
            raise InvalidInputError("sample_rate must be positive")
        win, hop = self.win_length, self.hop_length
        if hop < 1:
            raise InvalidInputError("hop length must be at least one sample")
        if win % 2 != 0 or win < 4 * hop:
            raise InvalidInputError(
                f"window length {win} must be even and at least 4x the hop {hop}"
            )

    @property
    def win_length(self) -> int:
        return int(round(self.window_ms * self.sample_rate / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000.0))

    @property
    def num_bins(self) -> int:
        """F = window_samples / 2 + 1 (FFT size equals the window length)."""
        return self.win_length // 2 + 1

    def num_frames(self, num_samples: int) -> int:
        """Centered framing with window/2 reflection padding on both ends."""
        return num_samples // self.hop_length + 1


@dataclass(frozen=True)
class ComplexSpectrogram:
    """Real/imaginary T-F representation, shape (2, T, F)."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != 2:
            raise InvalidInputError(
                f"spectrogram must have shape (2, T, F), got {tuple(self.data.shape)}"
            )
        if not torch.all(torch.isfinite(self.data)):
            raise InvalidInputError("spectrogram contains non-finite entries")

    @property
    def num_frames(self) -> int:
        return self.data.shape[1]

    @property
    def num_bins(self) -> int:
        return self.data.shape[2]


def sqrt_hann_window(win_length: int, dtype=torch.float64) -> torch.Tensor:
    """Square root of the periodic Hann window."""
    return torch.sqrt(torch.hann_window(win_length, periodic=True, dtype=dtype))


def stft_tensor(x: torch.Tensor, cfg: StftConfig) -> torch.Tensor:
    """STFT of (..., n) samples -> (..., 2, T, F) with T = n // hop + 1.

    Frames are centered: the signal is reflection-padded by window/2 on both
    ends, so T depends only on the input length.
    """
    win, hop = cfg.win_length, cfg.hop_length
    n = x.shape[-1]
    if n == 0:
        raise InvalidInputError("cannot transform an empty waveform")
    pad = win // 2
    if n <= pad:
        raise InvalidInputError(
            f"waveform of {n} samples is shorter than the {pad}-sample reflection pad"
        )
    lead = x.shape[:-1]
    flat = x.reshape(-1, n)
    padded = F.pad(flat.unsqueeze(1), (pad, pad), mode="reflect").squeeze(1)
    frames = padded.unfold(-1, win, hop)  # (N, T, win)
    window = sqrt_hann_window(win, dtype=x.dtype)
    spec = torch.fft.rfft(frames * window, dim=-1)  # (N, T, F)
    out = torch.stack((spec.real, spec.imag), dim=1)  # (N, 2, T, F)
    return out.reshape(*lead, 2, out.shape[-2], out.shape[-1])


def istft_tensor(spec: torch.Tensor, cfg: StftConfig, length: int) -> torch.Tensor:
    """Overlap-add inverse of `stft_tensor`: (..., 2, T, F) -> (..., length)."""
    win, hop = cfg.win_length, cfg.hop_length
    if spec.shape[-1] != cfg.num_bins:
        raise ConfigMismatchError(
            f"spectrogram has {spec.shape[-1]} bins but the config implies {cfg.num_bins}"
        )
    if spec.shape[-3] != 2:
        raise InvalidInputError("expected a real/imag channel axis of size 2")
    lead = spec.shape[:-3]
    num_frames = spec.shape[-2]
    flat = spec.reshape(-1, 2, num_frames, spec.shape[-1])
    window = sqrt_hann_window(win, dtype=spec.dtype)
    frames = torch.fft.irfft(torch.complex(flat[:, 0], flat[:, 1]), n=win, dim=-1)
    frames = frames * window  # synthesis window = analysis window

    ola_len = (num_frames - 1) * hop + win
    positions = (
        torch.arange(num_frames).unsqueeze(1) * hop + torch.arange(win)
    ).reshape(-1)
    buf = frames.new_zeros(flat.shape[0], ola_len)
    buf.index_add_(1, positions, frames.reshape(flat.shape[0], -1))
    envelope = torch.zeros(ola_len, dtype=spec.dtype)
    envelope.index_add_(0, positions, (window**2).repeat(num_frames))
    buf = buf / envelope.clamp_min(_ENVELOPE_EPS)

    pad = win // 2
    out = buf[:, pad : pad + length]
    if out.shape[1] < length:
        out = F.pad(out, (0, length - out.shape[1]))
    return out.reshape(*lead, length)


def stft(w: Waveform, cfg: StftConfig) -> ComplexSpectrogram:
    if w.sample_rate != cfg.sample_rate:
        raise ConfigMismatchError(
            f"waveform rate {w.sample_rate} != config rate {cfg.sample_rate}"
        )
    return ComplexSpectrogram(stft_tensor(w.tensor(), cfg))


def istft(s: ComplexSpectrogram, cfg: StftConfig, out_len: int) -> Waveform:
    samples = istft_tensor(s.data, cfg, out_len)
    return Waveform(samples.numpy(), sample_rate=cfg.sample_rate)


@dataclass(frozen=True)
class MixResult:
    """A synthesized mixture with its separation targets (and scaled noise)."""

    mixture: Waveform
    sources: list[Waveform] = field(default_factory=list)
    noise: Waveform | None = None


def mix_sources(
    sources: list[Waveform],
    gains_db: list[float],
    noise: Waveform | None = None,
    noise_snr_db: float | None = None,
) -> MixResult:
    """Rescale sources to the requested dB offsets and sum them.

    The first source is the 0 dB reference; source i is scaled so that
    10*log10(P_i / P_ref) == gains_db[i], measured on full-utterance average
    power.  Optional noise is scaled so the clean-mixture-to-noise power ratio
    equals noise_snr_db.  If the mixture peak exceeds 1.0, the mixture and all
    targets are rescaled by the same factor (SNRs are unchanged).  The returned
    mixture is the exact elementwise sum of the returned scaled signals.
    """
    if not 2 <= len(sources) <= 4:
        raise InvalidInputError(f"need 2..4 sources, got {len(sources)}")
    if len(gains_db) != len(sources):
        raise InvalidInputError("gains_db must match the source count")
    if gains_db[0] != 0.0:
        raise InvalidInputError("the first source is the reference; gains_db[0] must be 0")
    if (noise is None) != (noise_snr_db is None):
        raise InvalidInputError("noise and noise_snr_db must be given together")
    ref = sources[0]
    for s in sources[1:]:
        if s.num_samples != ref.num_samples or s.sample_rate != ref.sample_rate:
            raise InvalidInputError("all sources must share length and sample rate")
    if noise is not None and (
        noise.num_samples != ref.num_samples or noise.sample_rate != ref.sample_rate
    ):
        raise InvalidInputError("noise must share length and sample rate with the sources")

    powers = [s.power() for s in sources]
    for i, p in enumerate(powers):
        if p == 0.0:
            raise DegenerateSourceError(f"source {i} is silent")

    scaled = [sources[0].samples.copy()]
    for s, g, p in zip(sources[1:], gains_db[1:], powers[1:]):
        scale = math.sqrt(powers[0] * 10.0 ** (g / 10.0) / p)
        scaled.append(s.samples * scale)

    clean = np.sum(scaled, axis=0)
    scaled_noise = None
    if noise is not None:
        p_noise = noise.power()
        if p_noise == 0.0:
            raise DegenerateSourceError("noise signal is silent")
        p_clean = float(np.mean(clean**2))
        scaled_noise = noise.samples * math.sqrt(
            p_clean / (p_noise * 10.0 ** (noise_snr_db / 10.0))
        )

    parts = scaled + ([scaled_noise] if scaled_noise is not None else [])
    mixture = np.sum(parts, axis=0)
    peak = float(np.max(np.abs(mixture))) if mixture.size else 0.0
    if peak > 1.0:
        factor = 1.0 / peak
        scaled = [s * factor for s in scaled]
        if scaled_noise is not None:
            scaled_noise = scaled_noise * factor
        parts = scaled + ([scaled_noise] if scaled_noise is not None else [])
        mixture = np.sum(parts, axis=0)

    rate = ref.sample_rate
    return MixResult(
        mixture=Waveform(mixture, rate),
        sources=[Waveform(s, rate) for s in scaled],
        noise=Waveform(scaled_noise, rate) if scaled_noise is not None else None,
    )


def read_wav(path: str | Path) -> Waveform:
    """Read a mono WAV file (16-bit PCM or 32/64-bit float)."""
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise InvalidInputError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise InvalidInputError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, sample_rate=int(rate))


def write_wav(path: str | Path, w: Waveform, fmt: str = "float32") -> None:
    """Write a mono WAV file; float32 preserves the samples losslessly."""
    if fmt == "float32":
        wavfile.write(str(path), w.sample_rate, w.samples.astype(np.float32))
    elif fmt == "int16":
        clipped = np.clip(w.samples, -1.0, 32767.0 / 32768.0)
        wavfile.write(str(path), w.sample_rate, np.round(clipped * 32768.0).astype(np.int16))
    else:
        raise InvalidInputError(f"unsupported WAV format {fmt!r}")
