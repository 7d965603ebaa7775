"""Separation metrics over a dataset, with the optional visual-occlusion sweep."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import MixtureDataset
from .dsp import Waveform, read_wav
from .errors import InvalidInputError
from .model import STAGE_FINE, StageCheckpoint
from .objectives import pit, sdri, si_sdr, si_sdri
from .semantics import MouthFrames, occlude
from .training import coarse_estimates_for_refs

OCCLUSION_SWEEP = (0, 5, 10, 20, 30, 40, 50)


@dataclass
class UtteranceMetrics:
    utterance_id: str
    num_speakers: int
    si_sdri: list[float]
    sdri: list[float]
    permutation: tuple[int, ...]

    def line(self) -> str:
        si = " ".join(f"{v:.4f}" for v in self.si_sdri)
        sd = " ".join(f"{v:.4f}" for v in self.sdri)
        perm = ",".join(str(p) for p in self.permutation)
        return (
            f"utt={self.utterance_id} S={self.num_speakers} "
            f"si_sdri=[{si}] sdri=[{sd}] perm=({perm})"
        )


@dataclass
class EvaluationReport:
    utterances: list[UtteranceMetrics] = field(default_factory=list)

    @property
    def mean_si_sdri(self) -> float:
        return float(np.mean([np.mean(u.si_sdri) for u in self.utterances]))

    @property
    def mean_sdri(self) -> float:
        return float(np.mean([np.mean(u.sdri) for u in self.utterances]))

    def summary(self) -> dict:
        return {
            "num_utterances": len(self.utterances),
            "mean_si_sdri": self.mean_si_sdri,
            "mean_sdri": self.mean_sdri,
        }

    def render(self) -> str:
        lines = [u.line() for u in self.utterances]
        lines.append("# sdri is plain (unfiltered) SDR improvement")
        lines.append(json.dumps(self.summary(), sort_keys=True))
        return "\n".join(lines)


def score_estimates(
    utterance_id: str, ests: list[Waveform], refs: list[Waveform], mixture: Waveform
) -> UtteranceMetrics:
    """PIT-aligned per-speaker SI-SDRi and SDRi for one utterance."""
    result = pit(
        [e.tensor() for e in ests],
        [r.tensor() for r in refs],
        lambda e, r: -si_sdr(e, r),
    )
    si_rows, sdr_rows = [0.0] * len(refs), [0.0] * len(refs)
    for est_idx, ref_idx in enumerate(result.permutation):
        est, ref = ests[est_idx], refs[ref_idx]
        si_rows[ref_idx] = float(si_sdri(est.tensor(), ref.tensor(), mixture.tensor()))
        sdr_rows[ref_idx] = float(sdri(est.tensor(), ref.tensor(), mixture.tensor()))
    return UtteranceMetrics(
        utterance_id=utterance_id,
        num_speakers=len(refs),
        si_sdri=si_rows,
        sdri=sdr_rows,
        permutation=result.permutation,
    )


def separate_utterance(
    ckpt: StageCheckpoint,
    mixture: Waveform,
    mouths: list[MouthFrames],
    audio_only: bool = False,
) -> list[Waveform]:
    """Run the checkpointed model on one utterance (fine checkpoints run both passes).

    At inference the first-pass estimate in slot i is paired with mouth
    stream i (positional order).
    """
    model = ckpt.build_model()
    model.eval()
    mix = torch.as_tensor(mixture.samples, dtype=torch.float32).unsqueeze(0)
    mouth_batch = torch.stack([m.tensor() for m in mouths]).unsqueeze(0)
    with torch.no_grad():
        if ckpt.stage == STAGE_FINE:
            coarse_model = ckpt.build_coarse_model()
            coarse_model.eval()
            coarse = coarse_model.coarse_forward(mix, mouth_batch, audio_only=audio_only)
            waves = model.fine_forward(mix, mouth_batch, coarse, audio_only=audio_only)
        else:
            waves = model.coarse_forward(mix, mouth_batch, audio_only=audio_only)
    return [
        Waveform(waves[0, i].double().numpy(), mixture.sample_rate)
        for i in range(waves.shape[1])
    ]


def evaluate_dataset(
    ckpt: StageCheckpoint,
    dataset: MixtureDataset,
    occlusion: dict[int, int] | None = None,
    occlusion_seed: int = 0,
    audio_only: bool = False,
) -> EvaluationReport:
    """Separate and score every utterance; `occlusion` maps speaker index -> n_missing."""
    report = EvaluationReport()
    for utt_index, item in enumerate(dataset.items):
        mouths = list(item.mouths)
        if occlusion:
            for spk, n_missing in occlusion.items():
                # independent draw per (utterance, speaker)
                seed = occlusion_seed * 1_000_003 + utt_index * 101 + spk
                mouths[spk] = occlude(mouths[spk], n_missing, seed)
        ests = separate_utterance(ckpt, item.mixture, mouths, audio_only=audio_only)
        report.utterances.append(
            score_estimates(item.utterance_id, ests, item.targets, item.mixture)
        )
    return report


def evaluate_estimate_dir(estimates_dir: str | Path, dataset: MixtureDataset) -> EvaluationReport:
    """Score pre-separated WAVs laid out as <dir>/<utterance_id>/s*.wav."""
    estimates_dir = Path(estimates_dir)
    report = EvaluationReport()
    for item in dataset.items:
        utt_dir = estimates_dir / item.utterance_id
        paths = sorted(utt_dir.glob("s*.wav"))
        if len(paths) != item.num_speakers:
            raise InvalidInputError(
                f"{utt_dir}: expected {item.num_speakers} estimate WAVs, found {len(paths)}"
            )
        ests = [read_wav(p) for p in paths]
        report.utterances.append(
            score_estimates(item.utterance_id, ests, item.targets, item.mixture)
        )
    return report


def occlusion_sweep(
    ckpt: StageCheckpoint,
    dataset: MixtureDataset,
    speakers: str = "one",
    n_missing_values: tuple[int, ...] = OCCLUSION_SWEEP,
    seed: int = 0,
    audio_only: bool = False,
) -> list[dict]:
    """Mean SI-SDRi per occlusion level for one speaker or both speakers."""
    if speakers not in ("one", "both"):
        raise InvalidInputError("speakers must be 'one' or 'both'")
    rows = []
    for n in n_missing_values:
        occlusion = {0: n} if speakers == "one" else {0: n, 1: n}
        report = evaluate_dataset(
            ckpt, dataset, occlusion=occlusion, occlusion_seed=seed + n, audio_only=audio_only
        )
        rows.append(
            {
                "n_missing": n,
                "speakers": speakers,
                "mean_si_sdri": report.mean_si_sdri,
                "mean_sdri": report.mean_sdri,
            }
        )
    return rows


def render_sweep(rows: list[dict]) -> str:
    lines = [f"{'n_missing':>10s} {'speakers':>8s} {'si_sdri':>10s} {'sdri':>10s}"]
    for r in rows:
        lines.append(
            f"{r['n_missing']:>10d} {r['speakers']:>8s} "
            f"{r['mean_si_sdri']:>10.4f} {r['mean_sdri']:>10.4f}"
        )
    return "\n".join(lines)
