"""Bundled synthetic dataset: tone/chirp "speakers" with procedural mouth streams.

Eight two-speaker utterances small enough to memorize on a CPU: speaker 0 is
an amplitude-modulated low-band tone, speaker 1 a high-band chirp, so their
spectral supports barely overlap and the mixtures are cleanly separable.
Mouth streams are deterministic moving shapes whose geometry tracks each
source's amplitude envelope.  `desk_scale_model_config` and
`desk_scale_train_config` hold the CPU-sized recipe that memorizes this set.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import MixManifestEntry, write_manifest
from .dsp import StftConfig, Waveform, write_wav
from .model import ModelConfig
from .semantics import MOUTH_SIZE, MouthFrames, save_mouth_frames
from .separator import MstConfig
from .training import TrainConfig

TOY_NUM_UTTERANCES = 8
TOY_SAMPLE_RATE = 16000
TOY_DURATION = 2.0
TOY_FPS = 25
TOY_SNR_RANGE = (-2.5, 2.5)


def desk_scale_model_config(num_speakers: int = 2) -> ModelConfig:
    """A CPU-sized network that can memorize the bundled dataset."""
    return ModelConfig(
        stft=StftConfig(),
        mst=MstConfig(channels=32, hidden=16, num_blocks=1, num_heads=2, qk_head_dim=1),
        num_speakers=num_speakers,
        semantic_dim=8,
        visual_channels=(2, 4, 8),
        asr_hidden=16,
        norm_groups=4,
    )


def desk_scale_train_config(stage: str, max_epochs: int = 30, seed: int = 0) -> TrainConfig:
    """Overfit recipe: single-item batches, no holdout (validation = training)."""
    return TrainConfig(
        stage=stage,
        batch_size=1,
        max_epochs=max_epochs,
        seed=seed,
        val_fraction=0.0,
    )


def _tone_source(rng: np.random.Generator, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    f0 = rng.uniform(220.0, 700.0)
    mod_rate = rng.uniform(1.5, 4.0)
    phase = rng.uniform(0, 2 * np.pi)
    envelope = 0.55 + 0.45 * np.sin(2 * np.pi * mod_rate * t + phase)
    wave = 0.25 * envelope * np.sin(2 * np.pi * f0 * t)
    return wave, envelope


def _chirp_source(rng: np.random.Generator, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    f_lo = rng.uniform(1500.0, 2200.0)
    f_hi = rng.uniform(2600.0, 3500.0)
    mod_rate = rng.uniform(1.0, 3.0)
    phase = rng.uniform(0, 2 * np.pi)
    duration = t[-1] if len(t) else 1.0
    inst_phase = 2 * np.pi * (f_lo * t + (f_hi - f_lo) * t**2 / (2 * duration))
    envelope = 0.55 + 0.45 * np.cos(2 * np.pi * mod_rate * t + phase)
    wave = 0.25 * envelope * np.sin(inst_phase)
    return wave, envelope


def _mouth_video(
    envelope: np.ndarray, num_frames: int, style: int, rng: np.random.Generator
) -> MouthFrames:
    """Bright shape whose size follows the audio envelope; style picks the shape."""
    hop = len(envelope) // num_frames
    frame_env = envelope[: num_frames * hop].reshape(num_frames, hop).mean(axis=1)
    yy, xx = np.mgrid[0:MOUTH_SIZE, 0:MOUTH_SIZE]
    cx = MOUTH_SIZE / 2 + rng.uniform(-6, 6)
    cy = MOUTH_SIZE / 2 + rng.uniform(-6, 6)
    frames = np.zeros((num_frames, MOUTH_SIZE, MOUTH_SIZE), dtype=np.uint8)
    for i, e in enumerate(frame_env):
        if style == 0:  # ellipse opening vertically with the envelope
            ry = 6 + 18 * e
            mask = ((xx - cx) / 24.0) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        else:  # horizontal bar widening with the envelope
            half_w = 8 + 26 * e
            mask = (np.abs(xx - cx) <= half_w) & (np.abs(yy - cy) <= 7.0)
        frames[i][mask] = np.uint8(90 + 160 * e)
    return MouthFrames(frames, fps=TOY_FPS)


def make_toy_dataset(
    out_dir: str | Path,
    num_utterances: int = TOY_NUM_UTTERANCES,
    duration: float = TOY_DURATION,
    sample_rate: int = TOY_SAMPLE_RATE,
    seed: int = 0,
) -> Path:
    """Write source WAVs, mouth containers, and a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    num_frames = int(round(duration * TOY_FPS))
    entries = []
    for u in range(num_utterances):
        rng = np.random.default_rng((seed, u))
        utt = f"toy{u:03d}"
        utt_dir = out_dir / utt
        utt_dir.mkdir(parents=True, exist_ok=True)
        waves_envs = [_tone_source(rng, t), _chirp_source(rng, t)]
        source_paths, mouth_paths = [], []
        for spk, (wave, env) in enumerate(waves_envs):
            wav_path = utt_dir / f"src{spk}.wav"
            write_wav(wav_path, Waveform(wave, sample_rate))
            mouth_path = utt_dir / f"mouth{spk}.mroi"
            save_mouth_frames(mouth_path, _mouth_video(env, num_frames, spk, rng))
            source_paths.append(str(wav_path))
            mouth_paths.append(str(mouth_path))
        entries.append(
            MixManifestEntry(
                utterance_id=utt,
                sources=tuple(source_paths),
                mouths=tuple(mouth_paths),
                duration=duration,
            )
        )
    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(manifest_path, entries)
    return manifest_path
