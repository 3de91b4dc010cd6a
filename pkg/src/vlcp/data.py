"""Batching, caption padding and the light image augmentation used in training."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .losses import MaskedBatch, mask_tokens
from .taskstream import CLS_ID, MASK_ID, PAD_ID, ImageTextPair


@dataclass
class Batch:
    images: torch.Tensor
    tokens: torch.Tensor
    attention_mask: torch.Tensor
    masked: MaskedBatch | None
    pair_ids: list[int]
    task_ids: list[int]
    class_ids: list[int]

    def __len__(self) -> int:
        return self.images.shape[0]


def pad_captions(captions: Sequence[Sequence[int]], max_seq_len: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Prepend CLS and right-pad to ``max_seq_len + 1``."""
    out = torch.full((len(captions), max_seq_len + 1), PAD_ID, dtype=torch.long)
    for i, cap in enumerate(captions):
        if len(cap) > max_seq_len:
            raise ValueError(f"caption of length {len(cap)} exceeds max_seq_len {max_seq_len}")
        out[i, 0] = CLS_ID
        out[i, 1 : len(cap) + 1] = torch.as_tensor(list(cap), dtype=torch.long)
    return out, (out != PAD_ID).long()


def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 2, jitter: float = 0.1) -> np.ndarray:
    """Random crop (zero padding + shift), horizontal flip and per-image colour jitter."""
    n, h, w, _ = images.shape
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.empty_like(images)
    for i in range(n):
        dy, dx = rng.integers(0, 2 * pad + 1, size=2)
        crop = padded[i, dy : dy + h, dx : dx + w]
        if rng.random() < 0.5:
            crop = crop[:, ::-1]
        gain = 1.0 + rng.uniform(-jitter, jitter, size=(1, 1, 3))
        out[i] = np.clip(crop * gain, 0.0, 1.0)
    return out


def collate(
    pairs: Sequence[ImageTextPair],
    max_seq_len: int,
    rng: np.random.Generator | None = None,
    mask_rate: float | None = None,
    mask_generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> Batch:
    images = np.stack([p.image for p in pairs]).astype(np.float32)
    if rng is not None:
        images = augment(images, rng)
    tokens, attn = pad_captions([p.caption for p in pairs], max_seq_len)
    masked = None
    if mask_rate is not None:
        masked = mask_tokens(tokens, mask_rate, mask_generator or 0, MASK_ID)
    return Batch(
        images=torch.from_numpy(images).to(dtype),
        tokens=tokens,
        attention_mask=attn,
        masked=masked,
        pair_ids=[p.pair_id for p in pairs],
        task_ids=[p.task_id for p in pairs],
        class_ids=[p.class_id for p in pairs],
    )

