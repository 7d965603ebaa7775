"""End-to-end separation model: coarse pass, refinement pass, checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

from .dsp import StftConfig, istft_tensor, stft_tensor
from .encoder import MultiScaleEncoder
from .errors import ConfigMismatchError, InvalidInputError
from .fusion import SemanticAligner, SpeakerFusion
from .semantics import (
    DEFAULT_FPS,
    DEFAULT_SEMANTIC_DIM,
    AudioSemanticEncoder,
    SemanticFusion,
    VisualEncoder,
)
from .separator import MstConfig, MstSeparator, SpectrogramDecoder

STAGE_COARSE = "coarse"
STAGE_FINE = "fine"


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to rebuild the network deterministically."""

    stft: StftConfig = field(default_factory=StftConfig)
    mst: MstConfig = field(default_factory=MstConfig)
    num_speakers: int = 2
    semantic_dim: int = DEFAULT_SEMANTIC_DIM
    fps: int = DEFAULT_FPS
    visual_channels: tuple[int, ...] = (16, 32, 64)
    asr_hidden: int = 128
    norm_groups: int = 8

    def __post_init__(self):
        object.__setattr__(self, "visual_channels", tuple(self.visual_channels))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mst"]["branches"] = [list(b) for b in self.mst.branches]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        mst = dict(d.pop("mst"))
        mst["branches"] = tuple(tuple(b) for b in mst["branches"])
        return cls(
            stft=StftConfig(**d.pop("stft")),
            mst=MstConfig(**mst),
            visual_channels=tuple(d.pop("visual_channels")),
            **d,
        )

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class SeparationModel(nn.Module):
    """Audio-visual separator with a recursive semantic refinement path.

    The coarse pass drives the separation backbone with video-only semantic
    streams; the refinement pass re-encodes first-pass audio together with the
    video stream and drives the same backbone with the fused streams.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.mst.channels
        self.visual_encoder = VisualEncoder(
            embed_dim=config.semantic_dim, channels=config.visual_channels
        )
        self.audio_semantic_encoder = AudioSemanticEncoder(
            config.stft,
            embed_dim=config.semantic_dim,
            hidden=config.asr_hidden,
            fps=config.fps,
        )
        self.semantic_fusion = SemanticFusion(embed_dim=config.semantic_dim)
        self.aligner = SemanticAligner(config.semantic_dim, c)
        self.encoder = MultiScaleEncoder(c, norm_groups=config.norm_groups)
        self.fusion = SpeakerFusion(c, config.num_speakers, norm_groups=config.norm_groups)
        self.separator = MstSeparator(config.mst)
        self.decoder = SpectrogramDecoder(c, config.num_speakers)

    @property
    def num_speakers(self) -> int:
        return self.config.num_speakers

    def encode_video(self, mouths: torch.Tensor) -> torch.Tensor:
        """(B, S, Tv, 88, 88) floats in [0, 1] -> (B, S, Tv, Cv)."""
        b, s = mouths.shape[0], mouths.shape[1]
        if s != self.num_speakers:
            raise InvalidInputError(
                f"model expects {self.num_speakers} mouth streams, got {s}"
            )
        flat = self.visual_encoder(mouths.reshape(b * s, *mouths.shape[2:]))
        return flat.reshape(b, s, *flat.shape[1:])

    def separate_with_streams(
        self, mixture: torch.Tensor, streams: torch.Tensor
    ) -> torch.Tensor:
        """Run one separation pass: (B, n) + (B, S, T1, Cv) -> (B, S, n)."""
        b, n = mixture.shape
        spec = stft_tensor(mixture, self.config.stft)  # (B, 2, T, F)
        audio = self.encoder(spec)
        t, f = audio.shape[-2], audio.shape[-1]
        aligned = torch.stack(
            [self.aligner(streams[:, i], t, f) for i in range(self.num_speakers)], dim=1
        )
        fused = self.fusion(audio, aligned)
        separated = self.separator(fused)
        specs = self.decoder(separated)  # (B, S, 2, T, F)
        waves = istft_tensor(specs.reshape(b * self.num_speakers, 2, t, f), self.config.stft, n)
        return waves.reshape(b, self.num_speakers, n)

    def coarse_forward(
        self, mixture: torch.Tensor, mouths: torch.Tensor, audio_only: bool = False
    ) -> torch.Tensor:
        """First pass from the mixture and video-only semantic streams."""
        streams = self.coarse_streams(mixture, mouths, audio_only=audio_only)
        return self.separate_with_streams(mixture, streams)

    def coarse_streams(
        self, mixture: torch.Tensor, mouths: torch.Tensor, audio_only: bool = False
    ) -> torch.Tensor:
        if audio_only:
            b = mixture.shape[0]
            t1 = self.audio_semantic_encoder.num_steps(mixture.shape[-1])
            return mixture.new_zeros(b, self.num_speakers, t1, self.config.semantic_dim)
        return self.encode_video(mouths)

    def fine_streams(
        self, coarse_waves: torch.Tensor, mouths: torch.Tensor, audio_only: bool = False
    ) -> torch.Tensor:
        """Audio-visual streams from first-pass audio: (B, S, n) + mouths -> (B, S, T1, Cv).

        coarse_waves[:, i] must correspond to the speaker of mouths[:, i].
        """
        b, s, n = coarse_waves.shape
        if audio_only:
            video = coarse_waves.new_zeros(
                b, s, self.audio_semantic_encoder.num_steps(n), self.config.semantic_dim
            )
        else:
            video = self.encode_video(mouths)
        audio = self.audio_semantic_encoder(coarse_waves.reshape(b * s, n))
        audio = audio.reshape(b, s, *audio.shape[1:])
        return self.semantic_fusion(video, audio)

    def fine_forward(
        self,
        mixture: torch.Tensor,
        mouths: torch.Tensor,
        coarse_waves: torch.Tensor,
        audio_only: bool = False,
    ) -> torch.Tensor:
        """Refinement pass given first-pass audio aligned to the mouth streams."""
        streams = self.fine_streams(coarse_waves, mouths, audio_only=audio_only)
        return self.separate_with_streams(mixture, streams)


@dataclass
class StageCheckpoint:
    """Serialized training state linking the coarse and fine runs."""

    stage: str
    model_state: dict
    config: ModelConfig
    epoch: int = 0
    best_val_loss: float = float("inf")
    optimizer_state: dict | None = None
    parent_fingerprint: str | None = None  # coarse run a fine run started from
    coarse_model_state: dict | None = None  # frozen first-pass weights (fine only)
    history: list = field(default_factory=list)
    train_config: dict | None = None

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()

    def build_model(self) -> SeparationModel:
        model = SeparationModel(self.config)
        model.load_state_dict(self.model_state)
        return model

    def build_coarse_model(self) -> SeparationModel:
        """The frozen first-pass model for a fine checkpoint."""
        if self.stage != STAGE_FINE:
            return self.build_model()
        if self.coarse_model_state is None:
            raise InvalidInputError("fine checkpoint is missing its coarse model state")
        model = SeparationModel(self.config)
        model.load_state_dict(self.coarse_model_state)
        return model


def save_checkpoint(path: str | Path, ckpt: StageCheckpoint) -> None:
    payload = {
        "stage": ckpt.stage,
        "model_state": ckpt.model_state,
        "config_json": json.dumps(ckpt.config.to_dict(), sort_keys=True),
        "epoch": ckpt.epoch,
        "best_val_loss": ckpt.best_val_loss,
        "optimizer_state": ckpt.optimizer_state,
        "parent_fingerprint": ckpt.parent_fingerprint,
        "coarse_model_state": ckpt.coarse_model_state,
        "history_json": json.dumps(ckpt.history),
        "train_config_json": json.dumps(ckpt.train_config) if ckpt.train_config else None,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, str(path))


def load_checkpoint(path: str | Path) -> StageCheckpoint:
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    return StageCheckpoint(
        stage=payload["stage"],
        model_state=payload["model_state"],
        config=ModelConfig.from_dict(json.loads(payload["config_json"])),
        epoch=payload["epoch"],
        best_val_loss=payload["best_val_loss"],
        optimizer_state=payload["optimizer_state"],
        parent_fingerprint=payload["parent_fingerprint"],
        coarse_model_state=payload["coarse_model_state"],
        history=json.loads(payload["history_json"]),
        train_config=json.loads(payload["train_config_json"])
        if payload["train_config_json"]
        else None,
    )


def check_same_fingerprint(a: ModelConfig, b: ModelConfig, context: str) -> None:
    if a.fingerprint() != b.fingerprint():
        raise ConfigMismatchError(
            f"{context}: config fingerprint {a.fingerprint()} != {b.fingerprint()}"
        )
