"""Two-stage training: coarse separation, then semantic-refinement finetuning."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .data import DEFAULT_SNR_RANGE, MixtureDataset
from .errors import ConfigError, DivergenceError
from .model import (
    STAGE_COARSE,
    STAGE_FINE,
    ModelConfig,
    SeparationModel,
    StageCheckpoint,
    check_same_fingerprint,
)
from .objectives import pairwise_total_loss, pit_from_matrix

STAGE_DEFAULTS = {
    STAGE_COARSE: {"batch_size": 16, "learning_rate": 1e-3},
    STAGE_FINE: {"batch_size": 8, "learning_rate": 1e-4},
}


@dataclass
class TrainConfig:
    """Optimization recipe; unset batch size / learning rate fall back to the
    stage defaults (16 / 1e-3 coarse, 8 / 1e-4 fine)."""

    stage: str = STAGE_COARSE
    batch_size: int | None = None
    learning_rate: float | None = None
    scheduler_patience: int = 3
    lr_factor: float = 0.5
    max_epochs: int = 200
    grad_clip_norm: float = 5.0
    dynamic_mixing: bool = False
    dm_snr_range: tuple[float, float] = DEFAULT_SNR_RANGE
    seed: int = 0
    val_fraction: float = 0.1
    audio_only: bool = False
    finetune_audio_encoder: bool = True  # fine stage; the coarse stage trains everything

    def __post_init__(self):
        if self.stage not in STAGE_DEFAULTS:
            raise ConfigError(f"unknown stage {self.stage!r}")
        defaults = STAGE_DEFAULTS[self.stage]
        if self.batch_size is None:
            self.batch_size = defaults["batch_size"]
        if self.learning_rate is None:
            self.learning_rate = defaults["learning_rate"]
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("batch size and learning rate must be positive")
        if self.max_epochs < 1 or self.grad_clip_norm <= 0:
            raise ConfigError("max_epochs and grad_clip_norm must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")


class PlateauHalver:
    """Halve the learning rate after `patience` consecutive non-improving epochs."""

    def __init__(self, optimizer, patience: int = 3, factor: float = 0.5):
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.best = math.inf
        self.stale = 0

    def step(self, val_loss: float) -> bool:
        """Returns True when the learning rate was reduced this epoch."""
        if val_loss < self.best:
            self.best = val_loss
            self.stale = 0
            return False
        self.stale += 1
        if self.stale >= self.patience:
            for group in self.optimizer.param_groups:
                group["lr"] *= self.factor
            self.stale = 0
            return True
        return False

    @property
    def learning_rate(self) -> float:
        return self.optimizer.param_groups[0]["lr"]


def split_train_val(num_items: int, val_fraction: float, seed: int) -> tuple[list, list]:
    """Seed-stable holdout split; at least one item in each side when possible."""
    order = list(np.random.default_rng(seed).permutation(num_items))
    n_val = int(round(num_items * val_fraction))
    if val_fraction > 0:
        n_val = min(max(n_val, 1), num_items - 1)
    return order[n_val:], order[:n_val]


def _global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


def _batched(indices: list[int], batch_size: int):
    for i in range(0, len(indices), batch_size):
        yield indices[i : i + batch_size]


class _StageRunner:
    """Shared epoch loop for both stages; subclass hooks pick the forward pass."""

    def __init__(self, cfg: TrainConfig, model: SeparationModel, dataset: MixtureDataset):
        self.cfg = cfg
        self.model = model
        self.dataset = dataset
        self.optimizer = torch.optim.Adam(
            [p for p in model.parameters() if p.requires_grad], lr=cfg.learning_rate
        )
        self.scheduler = PlateauHalver(
            self.optimizer, patience=cfg.scheduler_patience, factor=cfg.lr_factor
        )
        self.history: list[dict] = []

    def batch_loss(self, indices, mix, targets, mouths) -> torch.Tensor:
        raise NotImplementedError

    def set_train_mode(self) -> None:
        self.model.train()

    def run(self) -> tuple[dict, list[dict]]:
        cfg = self.cfg
        torch.manual_seed(cfg.seed)
        train_idx, val_idx = split_train_val(len(self.dataset), cfg.val_fraction, cfg.seed)
        best_state, best_val, best_epoch = None, math.inf, -1
        for epoch in range(cfg.max_epochs):
            if cfg.dynamic_mixing:
                self.dataset.remix(cfg.dm_snr_range, seed=cfg.seed * 100003 + epoch)
            self.set_train_mode()
            order = list(np.random.default_rng((cfg.seed, epoch)).permutation(train_idx))
            train_losses, grad_norms = [], []
            for batch in _batched(order, cfg.batch_size):
                mix, targets, mouths = self.dataset.tensors(batch)
                loss = self.batch_loss(batch, mix, targets, mouths)
                if not torch.isfinite(loss):
                    raise DivergenceError(
                        "training loss is non-finite",
                        record={"epoch": epoch, "loss": float(loss.detach()), "stage": cfg.stage},
                    )
                self.optimizer.zero_grad()
                loss.backward()
                params = [p for p in self.model.parameters() if p.requires_grad]
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip_norm)
                grad_norms.append(_global_grad_norm(params))  # post-clip global norm
                self.optimizer.step()
                train_losses.append(float(loss.detach()))
            val_loss = self.validation_loss(val_idx if val_idx else train_idx)
            if not math.isfinite(val_loss):
                raise DivergenceError(
                    "validation loss is non-finite",
                    record={"epoch": epoch, "loss": val_loss, "stage": cfg.stage},
                )
            reduced = self.scheduler.step(val_loss)
            self.history.append(
                {
                    "epoch": epoch,
                    "train_loss": float(np.mean(train_losses)),
                    "val_loss": val_loss,
                    "lr": self.scheduler.learning_rate,
                    "lr_reduced": reduced,
                    "grad_norms": grad_norms,
                }
            )
            if val_loss < best_val:
                best_val = val_loss
                best_epoch = epoch
                best_state = {
                    k: v.detach().clone() for k, v in self.model.state_dict().items()
                }
        if best_state is None:  # max_epochs >= 1 and finite losses guarantee a best
            raise DivergenceError("no epoch produced a finite validation loss")
        return (
            {"state": best_state, "val_loss": best_val, "epoch": best_epoch},
            self.history,
        )

    def validation_loss(self, indices: list[int]) -> float:
        self.model.eval()
        losses = []
        with torch.no_grad():
            for batch in _batched(list(indices), self.cfg.batch_size):
                mix, targets, mouths = self.dataset.tensors(batch)
                losses.append(float(self.batch_loss(batch, mix, targets, mouths)))
        return float(np.mean(losses))


class _CoarseRunner(_StageRunner):
    def batch_loss(self, indices, mix, targets, mouths) -> torch.Tensor:
        ests = self.model.coarse_forward(mix, mouths, audio_only=self.cfg.audio_only)
        losses = []
        for b in range(mix.shape[0]):
            matrix = pairwise_total_loss(ests[b], targets[b], self.model.config.stft)
            losses.append(pit_from_matrix(matrix).loss)
        return torch.stack(losses).mean()


class _FineRunner(_StageRunner):
    def __init__(self, cfg, model, dataset, coarse_model: SeparationModel):
        super().__init__(cfg, model, dataset)
        self.coarse_model = coarse_model
        self.coarse_model.eval()
        for p in self.coarse_model.parameters():
            p.requires_grad_(False)
        # the frozen first pass is input-determined; without dynamic mixing its
        # estimates never change across epochs, so cache them per item
        self._coarse_cache: dict[int, torch.Tensor] = {}

    def set_train_mode(self) -> None:
        self.model.train()
        self.model.visual_encoder.eval()  # frozen stand-in stays in inference mode

    def _coarse_for_batch(self, indices, mix, targets, mouths) -> torch.Tensor:
        if self.cfg.dynamic_mixing:
            return coarse_estimates_for_refs(
                self.coarse_model, mix, targets, mouths, audio_only=self.cfg.audio_only
            )
        missing = [i for i, idx in enumerate(indices) if idx not in self._coarse_cache]
        if missing:
            fresh = coarse_estimates_for_refs(
                self.coarse_model,
                mix[missing],
                targets[missing],
                mouths[missing],
                audio_only=self.cfg.audio_only,
            )
            for row, i in enumerate(missing):
                self._coarse_cache[indices[i]] = fresh[row]
        return torch.stack([self._coarse_cache[idx] for idx in indices])

    def batch_loss(self, indices, mix, targets, mouths) -> torch.Tensor:
        coarse = self._coarse_for_batch(indices, mix, targets, mouths)
        ests = self.model.fine_forward(mix, mouths, coarse, audio_only=self.cfg.audio_only)
        losses = []
        for b in range(mix.shape[0]):
            matrix = pairwise_total_loss(ests[b], targets[b], self.model.config.stft)
            losses.append(pit_from_matrix(matrix).loss)
        return torch.stack(losses).mean()


def coarse_estimates_for_refs(
    coarse_model: SeparationModel,
    mix: torch.Tensor,
    targets: torch.Tensor,
    mouths: torch.Tensor,
    audio_only: bool = False,
) -> torch.Tensor:
    """First-pass estimates reordered so slot i matches reference/mouth i.

    The assignment reuses the first pass's own PIT permutation against the
    targets, so the refinement pass re-encodes each speaker's coarse audio
    together with that speaker's mouth stream.
    """
    with torch.no_grad():
        ests = coarse_model.coarse_forward(mix, mouths, audio_only=audio_only)
        ordered = torch.empty_like(ests)
        for b in range(mix.shape[0]):
            matrix = pairwise_total_loss(ests[b], targets[b], coarse_model.config.stft)
            perm = pit_from_matrix(matrix).permutation  # est index -> ref index
            for est_idx, ref_idx in enumerate(perm):
                ordered[b, ref_idx] = ests[b, est_idx]
    return ordered


def run_coarse_stage(
    cfg: TrainConfig, dataset: MixtureDataset, model_config: ModelConfig
) -> StageCheckpoint:
    """Train the first-pass separator jointly with the visual stand-in encoder."""
    if cfg.stage != STAGE_COARSE:
        raise ConfigError(f"expected a coarse-stage config, got {cfg.stage!r}")
    torch.manual_seed(cfg.seed)
    model = SeparationModel(model_config)
    runner = _CoarseRunner(cfg, model, dataset)
    best, history = runner.run()
    return StageCheckpoint(
        stage=STAGE_COARSE,
        model_state=best["state"],
        config=model_config,
        epoch=best["epoch"],
        best_val_loss=best["val_loss"],
        optimizer_state=None,
        history=history,
        train_config=asdict(cfg),
    )


def run_fine_stage(
    cfg: TrainConfig,
    coarse_ckpt: StageCheckpoint,
    dataset: MixtureDataset,
    model_config: ModelConfig | None = None,
) -> StageCheckpoint:
    """Finetune the separator on refinement streams built from first-pass audio.

    The fine model starts from the coarse weights; the frozen coarse model
    generates first-pass audio each batch.  The visual encoder stays frozen;
    the audio-semantic encoder and the semantic fusion train from here, and the
    audio encoder finetunes unless disabled.  A `model_config` that does not
    fingerprint-match the coarse checkpoint refuses to start.
    """
    if cfg.stage != STAGE_FINE:
        raise ConfigError(f"expected a fine-stage config, got {cfg.stage!r}")
    if coarse_ckpt.stage != STAGE_COARSE:
        raise ConfigError("fine stage must start from a coarse checkpoint")
    if model_config is not None:
        check_same_fingerprint(model_config, coarse_ckpt.config, "fine-stage init")
    model_config = coarse_ckpt.config
    torch.manual_seed(cfg.seed)
    coarse_model = coarse_ckpt.build_model()
    fine_model = coarse_ckpt.build_model()  # same weights: fine == coarse at init
    for p in fine_model.visual_encoder.parameters():
        p.requires_grad_(False)
    if not cfg.finetune_audio_encoder:
        for p in fine_model.encoder.parameters():
            p.requires_grad_(False)
    runner = _FineRunner(cfg, fine_model, dataset, coarse_model)
    best, history = runner.run()
    return StageCheckpoint(
        stage=STAGE_FINE,
        model_state=best["state"],
        config=model_config,
        epoch=best["epoch"],
        best_val_loss=best["val_loss"],
        optimizer_state=None,
        parent_fingerprint=coarse_ckpt.fingerprint,
        coarse_model_state={k: v.clone() for k, v in coarse_ckpt.model_state.items()},
        history=history,
        train_config=asdict(cfg),
    )
