"""Training losses and separation metrics: SI-SDR, magnitude loss, PIT, SI-SDRi/SDRi.

Everything here is differentiable almost everywhere and accepts either
1-D torch tensors, numpy arrays, or `Waveform` objects.  SI-SDR uses the
standard scale-invariant form (projection-scaled target energy over residual
energy); a 1e-12 relative floor on every denominator caps the value at
+/- 120 dB instead of producing non-finite results.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import torch

from .dsp import StftConfig, Waveform, stft_tensor
from .errors import InvalidInputError

EPS = 1e-12
SI_SDR_FLOOR_DB = 10.0 * torch.log10(torch.tensor(EPS)).item()  # -120 dB


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, Waveform):
        return x.tensor()
    t = torch.as_tensor(x)
    if t.ndim != 1:
        raise InvalidInputError(f"expected a 1-D signal, got shape {tuple(t.shape)}")
    return t


def _check_pair(est: torch.Tensor, ref: torch.Tensor) -> None:
    if est.shape != ref.shape:
        raise InvalidInputError(
            f"estimate length {est.shape[0]} != reference length {ref.shape[0]}"
        )


def si_sdr(est, ref, eps: float = EPS) -> torch.Tensor:
    """Scale-invariant SDR in dB: 10*log10(||a s||^2 / (||s_hat - a s||^2 + eps*||a s||^2))
    with a = <s, s_hat> / <s, s>.
    """
    est, ref = _as_tensor(est), _as_tensor(ref)
    _check_pair(est, ref)
    ref_energy = torch.dot(ref, ref)
    if ref_energy.item() == 0.0:
        raise InvalidInputError("reference signal is all-zero")
    alpha = torch.dot(ref, est) / ref_energy
    target = alpha * ref
    num = torch.dot(target, target)
    if num.item() == 0.0:
        # zero estimate, or estimate exactly orthogonal to the reference
        return torch.tensor(SI_SDR_FLOOR_DB, dtype=est.dtype)
    residual = est - target
    den = torch.dot(residual, residual)
    return 10.0 * torch.log10(num / (den + eps * num))


def sdr(est, ref, eps: float = EPS) -> torch.Tensor:
    """Plain (unfiltered) SDR in dB: 10*log10(||s||^2 / (||s - s_hat||^2 + eps*||s||^2))."""
    est, ref = _as_tensor(est), _as_tensor(ref)
    _check_pair(est, ref)
    num = torch.dot(ref, ref)
    if num.item() == 0.0:
        raise InvalidInputError("reference signal is all-zero")
    residual = ref - est
    den = torch.dot(residual, residual)
    return 10.0 * torch.log10(num / (den + eps * num))


def l_mag(est, ref, cfg: StftConfig) -> torch.Tensor:
    """Magnitude-spectrogram L1 distance, normalized by the reference magnitude L1 norm."""
    est, ref = _as_tensor(est), _as_tensor(ref)
    _check_pair(est, ref)
    est_spec = stft_tensor(est, cfg)
    ref_spec = stft_tensor(ref, cfg)
    est_mag = torch.sqrt(est_spec[0] ** 2 + est_spec[1] ** 2)
    ref_mag = torch.sqrt(ref_spec[0] ** 2 + ref_spec[1] ** 2)
    ref_norm = ref_mag.sum()
    if ref_norm.item() == 0.0:
        raise InvalidInputError("reference signal is all-zero")
    return (est_mag - ref_mag).abs().sum() / ref_norm


def total_loss(est, ref, cfg: StftConfig) -> torch.Tensor:
    """Combined loss: magnitude term plus negated SI-SDR."""
    return l_mag(est, ref, cfg) - si_sdr(est, ref)


@dataclass(frozen=True)
class PitResult:
    """Outcome of permutation-invariant assignment.

    `permutation[i]` is the reference index assigned to estimate i; `loss` is
    the mean of the assigned entries of the pairwise loss matrix `per_pair`.
    """

    loss: torch.Tensor
    permutation: tuple[int, ...]
    per_pair: torch.Tensor


def pit_from_matrix(per_pair: torch.Tensor) -> PitResult:
    """Exhaustive minimum-mean-loss assignment over all S! permutations."""
    n = per_pair.shape[0]
    if per_pair.shape != (n, n):
        raise InvalidInputError("pairwise loss matrix must be square")
    best_loss, best_perm = None, None
    idx = torch.arange(n)
    for perm in permutations(range(n)):
        loss = per_pair[idx, torch.tensor(perm)].mean()
        if best_loss is None or loss.item() < best_loss.item():
            best_loss, best_perm = loss, perm
    return PitResult(loss=best_loss, permutation=best_perm, per_pair=per_pair)


def pit(ests: list, refs: list, loss_fn) -> PitResult:
    """Permutation-invariant loss over all estimate/reference pairings."""
    if len(ests) != len(refs):
        raise InvalidInputError("estimate and reference counts differ")
    if not 2 <= len(ests) <= 4:
        raise InvalidInputError(f"PIT supports 2..4 signals, got {len(ests)}")
    rows = [torch.stack([loss_fn(e, r) for r in refs]) for e in ests]
    return pit_from_matrix(torch.stack(rows))


def pairwise_total_loss(
    ests: torch.Tensor, refs: torch.Tensor, cfg: StftConfig, eps: float = EPS
) -> torch.Tensor:
    """(S, n) x (S, n) -> (S, S) matrix of total_loss values, computed in one pass.

    Entry [i, j] is total_loss(ests[i], refs[j]); STFTs are shared across pairs.
    """
    if ests.shape != refs.shape or ests.ndim != 2:
        raise InvalidInputError("expected matching (S, n) stacks of signals")
    ref_energy = (refs**2).sum(dim=1)  # (S,)
    if torch.any(ref_energy == 0):
        raise InvalidInputError("a reference signal is all-zero")
    cross = ests @ refs.T  # (S_est, S_ref)
    alpha = cross / ref_energy.unsqueeze(0)
    target = alpha.unsqueeze(-1) * refs.unsqueeze(0)  # (S_est, S_ref, n)
    num = (target**2).sum(dim=-1)
    den = ((ests.unsqueeze(1) - target) ** 2).sum(dim=-1)
    floor = torch.full_like(num, SI_SDR_FLOOR_DB)
    safe_num = torch.where(num == 0, torch.ones_like(num), num)
    si = torch.where(num == 0, floor, 10.0 * torch.log10(safe_num / (den + eps * safe_num)))

    est_spec = stft_tensor(ests, cfg)  # (S, 2, T, F)
    ref_spec = stft_tensor(refs, cfg)
    est_mag = torch.sqrt(est_spec[:, 0] ** 2 + est_spec[:, 1] ** 2)
    ref_mag = torch.sqrt(ref_spec[:, 0] ** 2 + ref_spec[:, 1] ** 2)
    dist = (est_mag.unsqueeze(1) - ref_mag.unsqueeze(0)).abs().sum(dim=(-2, -1))
    mag = dist / ref_mag.sum(dim=(-2, -1)).unsqueeze(0)
    return mag - si


def si_sdri(est, ref, mixture) -> torch.Tensor:
    """SI-SDR improvement of the estimate over the unprocessed mixture."""
    return si_sdr(est, ref) - si_sdr(mixture, ref)


def sdri(est, ref, mixture) -> torch.Tensor:
    """SDR improvement of the estimate over the unprocessed mixture."""
    return sdr(est, ref) - sdr(mixture, ref)
