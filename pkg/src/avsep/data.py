"""Mixture manifests, dataset materialization, and in-memory training data."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dsp import Waveform, mix_sources, read_wav, write_wav
from .errors import InvalidInputError
from .semantics import MouthFrames, load_mouth_frames

DEFAULT_CLIP_SECONDS = 2.0
DEFAULT_SNR_RANGE = (-5.0, 5.0)
DEFAULT_NOISE_SNR_RANGE = (-5.0, 20.0)


@dataclass(frozen=True)
class MixManifestEntry:
    """One mixture recipe: per-speaker source and mouth paths plus gain offsets."""

    utterance_id: str
    sources: tuple[str, ...]
    mouths: tuple[str, ...]
    gains_db: tuple[float, ...] | None = None  # drawn at build time when absent
    noise: str | None = None
    noise_snr_db: float | None = None
    duration: float = DEFAULT_CLIP_SECONDS

    def __post_init__(self):
        if not 2 <= len(self.sources) <= 4:
            raise InvalidInputError(
                f"{self.utterance_id}: need 2..4 sources, got {len(self.sources)}"
            )
        if len(self.mouths) != len(self.sources):
            raise InvalidInputError(
                f"{self.utterance_id}: mouth stream count must match source count"
            )
        if self.gains_db is not None and len(self.gains_db) != len(self.sources):
            raise InvalidInputError(f"{self.utterance_id}: gains_db length mismatch")
        object.__setattr__(self, "sources", tuple(self.sources))
        object.__setattr__(self, "mouths", tuple(self.mouths))
        if self.gains_db is not None:
            object.__setattr__(self, "gains_db", tuple(float(g) for g in self.gains_db))

    @property
    def num_speakers(self) -> int:
        return len(self.sources)

    def to_json(self) -> str:
        d = {
            "utterance_id": self.utterance_id,
            "sources": list(self.sources),
            "mouths": list(self.mouths),
            "gains_db": list(self.gains_db) if self.gains_db is not None else None,
            "noise": self.noise,
            "noise_snr_db": self.noise_snr_db,
            "duration": self.duration,
        }
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MixManifestEntry":
        d = json.loads(line)
        return cls(
            utterance_id=d["utterance_id"],
            sources=tuple(d["sources"]),
            mouths=tuple(d["mouths"]),
            gains_db=tuple(d["gains_db"]) if d.get("gains_db") is not None else None,
            noise=d.get("noise"),
            noise_snr_db=d.get("noise_snr_db"),
            duration=d.get("duration", DEFAULT_CLIP_SECONDS),
        )


def read_manifest(path: str | Path) -> list[MixManifestEntry]:
    entries = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(MixManifestEntry.from_json(line))
    if not entries:
        raise InvalidInputError(f"{path}: empty manifest")
    return entries


def write_manifest(path: str | Path, entries: list[MixManifestEntry]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for e in entries:
            fh.write(e.to_json() + "\n")


def draw_gains(
    num_speakers: int, snr_range: tuple[float, float], rng: np.random.Generator
) -> tuple[float, ...]:
    """Uniform gain offsets; the first speaker is the 0 dB reference."""
    lo, hi = snr_range
    if hi < lo:
        raise InvalidInputError(f"bad SNR range [{lo}, {hi}]")
    return (0.0,) + tuple(float(rng.uniform(lo, hi)) for _ in range(num_speakers - 1))


def build_mix_dataset(
    manifest: list[MixManifestEntry] | str | Path,
    out_dir: str | Path,
    snr_range: tuple[float, float] = DEFAULT_SNR_RANGE,
    noise_snr_range: tuple[float, float] = DEFAULT_NOISE_SNR_RANGE,
    seed: int = 0,
) -> Path:
    """Materialize mixtures: per entry, a mixture WAV, target WAVs, and a record.

    Gains are drawn uniformly from `snr_range` with the seeded generator unless
    the entry pins them; noise SNRs likewise from `noise_snr_range`.  Entries
    whose inputs are missing produce an error record and are skipped; the build
    fails only if every entry fails.
    """
    if not isinstance(manifest, list):
        manifest = read_manifest(manifest)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records, errors = [], []
    for entry in manifest:
        # draw per-entry randomness unconditionally so the stream stays aligned
        gains = draw_gains(entry.num_speakers, snr_range, rng)
        noise_snr = float(rng.uniform(*noise_snr_range))
        if entry.gains_db is not None:
            gains = entry.gains_db
        if entry.noise_snr_db is not None:
            noise_snr = entry.noise_snr_db
        try:
            sources = [read_wav(p) for p in entry.sources]
            noise = read_wav(entry.noise) if entry.noise else None
            mixed = mix_sources(
                sources,
                list(gains),
                noise=noise,
                noise_snr_db=noise_snr if noise is not None else None,
            )
        except (OSError, InvalidInputError) as exc:
            errors.append({"utterance_id": entry.utterance_id, "error": str(exc)})
            continue
        utt_dir = out_dir / entry.utterance_id
        utt_dir.mkdir(parents=True, exist_ok=True)
        write_wav(utt_dir / "mixture.wav", mixed.mixture)
        target_paths = []
        for i, src in enumerate(mixed.sources):
            p = utt_dir / f"s{i}.wav"
            write_wav(p, src)
            target_paths.append(str(p))
        record = {
            "utterance_id": entry.utterance_id,
            "mixture": str(utt_dir / "mixture.wav"),
            "targets": target_paths,
            "mouths": list(entry.mouths),
            "sources": list(entry.sources),
            "gains_db": list(gains),
            "noise": entry.noise,
            "noise_snr_db": noise_snr if entry.noise else None,
            "duration": entry.duration,
            "sample_rate": mixed.mixture.sample_rate,
        }
        records.append(record)
    with open(out_dir / "records.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    if errors:
        with open(out_dir / "errors.jsonl", "w") as fh:
            for r in errors:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    if not records:
        raise InvalidInputError(f"all {len(errors)} manifest entries failed to build")
    return out_dir


@dataclass
class MixtureItem:
    """One loaded training example, audio as float64 numpy, mouths as uint8."""

    utterance_id: str
    mixture: Waveform
    targets: list[Waveform]
    mouths: list[MouthFrames]
    source_paths: list[str] = field(default_factory=list)
    gains_db: list[float] = field(default_factory=list)
    noise_path: str | None = None
    noise_snr_db: float | None = None

    @property
    def num_speakers(self) -> int:
        return len(self.targets)


class MixtureDataset:
    """In-memory dataset over a materialized directory; supports remixing."""

    def __init__(self, dataset_dir: str | Path):
        self.dataset_dir = Path(dataset_dir)
        records_path = self.dataset_dir / "records.jsonl"
        if not records_path.exists():
            raise InvalidInputError(f"{records_path} not found; build the dataset first")
        self.items: list[MixtureItem] = []
        with open(records_path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                r = json.loads(line)
                self.items.append(
                    MixtureItem(
                        utterance_id=r["utterance_id"],
                        mixture=read_wav(r["mixture"]),
                        targets=[read_wav(p) for p in r["targets"]],
                        mouths=[load_mouth_frames(p) for p in r["mouths"]],
                        source_paths=r.get("sources", []),
                        gains_db=r.get("gains_db", []),
                        noise_path=r.get("noise"),
                        noise_snr_db=r.get("noise_snr_db"),
                    )
                )
        if not self.items:
            raise InvalidInputError(f"{records_path}: no usable records")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def num_speakers(self) -> int:
        return self.items[0].num_speakers

    def remix(self, snr_range: tuple[float, float], seed: int) -> None:
        """Redraw gain offsets from fresh and rebuild mixtures in memory.

        Speaker pairings are kept; this is the per-epoch dynamic-mixing step.
        """
        rng = np.random.default_rng(seed)
        for item in self.items:
            if not item.source_paths:
                raise InvalidInputError(
                    f"{item.utterance_id}: record lacks source paths; cannot remix"
                )
            gains = draw_gains(len(item.source_paths), snr_range, rng)
            sources = [read_wav(p) for p in item.source_paths]
            noise = read_wav(item.noise_path) if item.noise_path else None
            mixed = mix_sources(
                sources,
                list(gains),
                noise=noise,
                noise_snr_db=item.noise_snr_db if noise is not None else None,
            )
            item.mixture = mixed.mixture
            item.targets = mixed.sources
            item.gains_db = list(gains)

    def tensors(
        self, indices: list[int], dtype=torch.float32
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Collate items into (mixture, targets, mouths) batch tensors."""
        items = [self.items[i] for i in indices]
        mix = torch.stack([torch.as_tensor(it.mixture.samples, dtype=dtype) for it in items])
        tgt = torch.stack(
            [
                torch.stack([torch.as_tensor(t.samples, dtype=dtype) for t in it.targets])
                for it in items
            ]
        )
        mouths = torch.stack(
            [torch.stack([m.tensor(dtype=dtype) for m in it.mouths]) for it in items]
        )
        return mix, tgt, mouths
