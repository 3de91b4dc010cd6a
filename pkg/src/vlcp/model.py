"""Align-before-fuse vision-language model at toy scale.

Image encoder (patch transformer), text encoder (transformer over tokens),
fusion encoder (text self-attention + cross-attention into image tokens),
two linear projection heads with L2 normalisation, and an MLM head.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_VERSION = 1
NORM_EPS = 1e-12


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    proj_dim: int = 32
    num_layers_image: int = 2
    num_layers_text: int = 2
    num_layers_fusion: int = 2
    num_heads: int = 4
    vocab_size: int = 256
    max_seq_len: int = 14
    mlp_ratio: int = 2
    dropout: float = 0.0
    cosine_heads: bool = False

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.proj_dim < 2:
            raise ValueError("proj_dim must be >= 2")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(NORM_EPS)


class Attention(nn.Module):
    """Multi-head attention; ``pad_mask`` is True at key positions to ignore."""

    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.out = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, context=None, pad_mask=None):
        context = x if context is None else context
        b, n, d = x.shape
        h = self.heads
        q = self.q(x).view(b, n, h, d // h).transpose(1, 2)
        k, v = self.kv(context).view(b, -1, 2, h, d // h).permute(2, 0, 3, 1, 4)
        att = q @ k.transpose(-1, -2) * (d // h) ** -0.5
        if pad_mask is not None:
            att = att.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        att = self.drop(att.softmax(dim=-1))
        return self.out((att @ v).transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    """Pre-norm transformer block with optional cross-attention."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, dropout: float, cross: bool = False):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, dropout)
        self.cross = cross
        if cross:
            self.norm_c = nn.LayerNorm(dim)
            self.cross_attn = Attention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x, pad_mask=None, context=None, context_pad_mask=None):
        h = self.norm1(x)
        x = x + self.attn(h, pad_mask=pad_mask)
        if self.cross:
            x = x + self.cross_attn(self.norm_c(x), context=context, pad_mask=context_pad_mask)
        return x + self.mlp(self.norm2(x))


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch = cfg.patch_size
        self.proj = nn.Linear(cfg.patch_size * cfg.patch_size * cfg.channels, cfg.embed_dim)
        self.cls = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        self.pos = nn.Parameter(torch.randn(1, cfg.num_patches + 1, cfg.embed_dim) * 0.02)
        self.blocks = nn.ModuleList(
            Block(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio, cfg.dropout)
            for _ in range(cfg.num_layers_image)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        # images: B x H x W x C
        b, h, w, c = images.shape
        p = self.patch
        x = images.reshape(b, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5)
        x = self.proj(x.reshape(b, (h // p) * (w // p), p * p * c))
        x = torch.cat([self.cls.expand(b, -1, -1), x], dim=1) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.tok = nn.Embedding(cfg.vocab_size, cfg.embed_dim)
        self.pos = nn.Parameter(torch.randn(1, cfg.max_seq_len + 1, cfg.embed_dim) * 0.02)
        self.blocks = nn.ModuleList(
            Block(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio, cfg.dropout)
            for _ in range(cfg.num_layers_text)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, tokens: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        x = self.tok(tokens) + self.pos[:, : tokens.shape[1]]
        pad = ~attention_mask.bool()
        for blk in self.blocks:
            x = blk(x, pad_mask=pad)
        return self.norm(x)


class FusionEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            Block(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio, cfg.dropout, cross=True)
            for _ in range(cfg.num_layers_fusion)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, text_seq, text_mask, image_seq):
        pad = ~text_mask.bool()
        x = text_seq
        for blk in self.blocks:
            x = blk(x, pad_mask=pad, context=image_seq)
        return self.norm(x)


class CosineLinear(nn.Module):
    """Linear map on L2-normalised inputs and weight rows (no bias)."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_dim, in_dim) / in_dim**0.5)

    def forward(self, x):
        return F.linear(l2_normalize(x), l2_normalize(self.weight))


class VLPModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.image_encoder = ImageEncoder(cfg)
        self.text_encoder = TextEncoder(cfg)
        self.fusion = FusionEncoder(cfg)
        if cfg.cosine_heads:
            self.proj_image = CosineLinear(cfg.embed_dim, cfg.proj_dim)
            self.proj_text = CosineLinear(cfg.embed_dim, cfg.proj_dim)
        else:
            self.proj_image = nn.Linear(cfg.embed_dim, cfg.proj_dim)
            self.proj_text = nn.Linear(cfg.embed_dim, cfg.proj_dim)
        self.mlm_head = nn.Sequential(
            nn.Linear(cfg.embed_dim, cfg.embed_dim),
            nn.GELU(),
            nn.LayerNorm(cfg.embed_dim),
            nn.Linear(cfg.embed_dim, cfg.vocab_size),
        )

    def _check_images(self, images: torch.Tensor) -> None:
        c = self.cfg
        if images.dim() != 4 or tuple(images.shape[1:]) != (c.image_size, c.image_size, c.channels):
            raise ValueError(
                f"expected images of shape B x {c.image_size} x {c.image_size} x {c.channels}, "
                f"got {tuple(images.shape)}"
            )

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        self._check_images(images)
        return self.image_encoder(images)

    def encode_text(self, tokens: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        if tokens.dim() != 2 or tokens.shape != attention_mask.shape:
            raise ValueError("tokens and attention_mask must both be B x (L+1)")
        if tokens.shape[1] > self.cfg.max_seq_len + 1:
            raise ValueError(f"sequence longer than max_seq_len + 1 = {self.cfg.max_seq_len + 1}")
        return self.text_encoder(tokens, attention_mask)

    def project(self, cls_vectors: torch.Tensor, modality: str) -> torch.Tensor:
        if modality == "image":
            head = self.proj_image
        elif modality == "text":
            head = self.proj_text
        else:
            raise ValueError(f"modality must be 'image' or 'text', got {modality!r}")
        return l2_normalize(head(cls_vectors))

    def fuse(self, image_seq, text_seq, text_mask) -> dict[str, torch.Tensor]:
        if image_seq.shape[0] != text_seq.shape[0] or image_seq.shape[-1] != text_seq.shape[-1]:
            raise ValueError("image_seq and text_seq disagree on batch size or width")
        fused = self.fusion(text_seq, text_mask, image_seq)
        return {"fused_seq": fused, "fused_cls": fused[:, 0], "mlm_logits": self.mlm_head(fused)}

    def features(self, images, tokens, attention_mask) -> dict[str, torch.Tensor]:
        """Unimodal sequences and their unit projections."""
        image_seq = self.encode_image(images)
        text_seq = self.encode_text(tokens, attention_mask)
        return {
            "image_seq": image_seq,
            "text_seq": text_seq,
            "v": self.project(image_seq[:, 0], "image"),
            "w": self.project(text_seq[:, 0], "text"),
        }

    def forward(self, images, tokens, attention_mask, masked_tokens=None) -> dict[str, torch.Tensor]:
        """Projections from the clean caption; fusion outputs from ``masked_tokens`` when given."""
        out = self.features(images, tokens, attention_mask)
        fuse_text = out["text_seq"]
        if masked_tokens is not None:
            fuse_text = self.encode_text(masked_tokens, attention_mask)
        out.update(self.fuse(out["image_seq"], fuse_text, attention_mask))
        return out


def clone_state(model: VLPModel) -> VLPModel:
    return copy.deepcopy(model)


def freeze(model: nn.Module) -> nn.Module:
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def save_checkpoint(model: VLPModel, path: str | Path, extra: dict | None = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "state": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, Path(path))


def load_checkpoint(path: str | Path, cfg: ModelConfig | None = None) -> VLPModel:
    """Rebuild a model from a checkpoint; ``cfg`` (if given) must match tensor shapes."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if "version" not in payload:
        raise ValueError(f"{path}: checkpoint has no version field")
    if payload["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload['version']}")
    model = VLPModel(cfg if cfg is not None else ModelConfig(**payload["config"]))
    load_state_into(model, payload["state"])
    return model


def load_state_into(model: nn.Module, state: dict[str, torch.Tensor]) -> None:
    own = model.state_dict()
    for name, tensor in own.items():
        if name not in state:
            raise ValueError(f"checkpoint is missing tensor {name!r}")
        if tuple(state[name].shape) != tuple(tensor.shape):
            raise ValueError(
                f"tensor {name!r}: checkpoint shape {tuple(state[name].shape)} "
                f"!= model shape {tuple(tensor.shape)}"
            )
    extra = set(state) - set(own)
    if extra:
        raise ValueError(f"checkpoint has unexpected tensor {sorted(extra)[0]!r}")
    model.load_state_dict(state)
