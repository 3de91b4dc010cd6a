"""Image-text alignment and masked language modelling objectives."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .taskstream import CLS_ID, MASK_ID, PAD_ID

IGNORE_INDEX = -100


@dataclass
class MaskedBatch:
    input_tokens: torch.Tensor
    labels: torch.Tensor
    mask_positions: torch.Tensor  # bool, same shape as tokens

    @property
    def num_masked(self) -> int:
        return int(self.mask_positions.sum())


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def ita_loss(v: torch.Tensor, w: torch.Tensor, tau: float = 0.07) -> torch.Tensor:
    """Symmetric in-batch contrastive loss over the B x B similarity matrix."""
    _check_tau(tau)
    sim = v @ w.t() / tau
    target = torch.arange(sim.shape[0], device=sim.device)
    i2t = F.cross_entropy(sim, target)
    t2i = F.cross_entropy(sim.t(), target)
    return (i2t + t2i) / 2


def mask_tokens(
    tokens: torch.Tensor,
    rate: float = 0.15,
    seed: int | torch.Generator = 0,
    mask_token_id: int = MASK_ID,
) -> MaskedBatch:
    """Replace each maskable position with ``mask_token_id`` with probability ``rate``.

    CLS and PAD positions are never masked.
    """
    if not 0 < rate < 1:
        raise ValueError("mask rate must lie in (0, 1)")
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    maskable = (tokens != PAD_ID) & (tokens != CLS_ID)
    draw = torch.rand(tokens.shape, generator=gen)
    positions = maskable & (draw < rate)
    inputs = tokens.masked_fill(positions, mask_token_id)
    labels = tokens.masked_fill(~positions, IGNORE_INDEX)
    return MaskedBatch(input_tokens=inputs, labels=labels, mask_positions=positions)


def mlm_loss(mlm_logits: torch.Tensor, masked: MaskedBatch) -> torch.Tensor:
    """Mean token cross-entropy over masked positions; 0 when nothing is masked."""
    pos = masked.mask_positions
    if not bool(pos.any()):
        return mlm_logits.sum() * 0.0
    return F.cross_entropy(mlm_logits[pos], masked.labels[pos])
