"""Foreground pooling, codebook retrieval and retrieval-driven condition enhancement.

Shapes: condition features ``cf`` and latents are ``(B, c, h, w)``; latent
masks ``cm`` are ``(B, 1, h, w)`` with 1 on the editable background;
superpixel labels are ``(B, h, w)`` long with -1 on background.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


def masked_average_pool(cf: torch.Tensor, cm: torch.Tensor) -> torch.Tensor:
    """Mean of each channel of ``cf`` over foreground cells (``cm == 0``). Returns (B, 1, c)."""
    fg = 1 - cm
    count = fg.sum(dim=(2, 3))
    if (count == 0).any():
        raise ValueError("empty foreground")
    pooled = (cf * fg).sum(dim=(2, 3)) / count
    return pooled[:, None, :]


def localized_masked_pool(cf: torch.Tensor, labels: torch.Tensor, n_labels: int):
    """Per-superpixel channel means. Returns ``(B, n_labels, c)`` and per-slot counts ``(B, n_labels)``.

    Slots with no cells (images with fewer than ``n_labels`` superpixels)
    get a zero vector and count 0.
    """
    b, c, h, w = cf.shape
    onehot = (labels.reshape(b, 1, h * w) == torch.arange(n_labels, device=cf.device)[None, :, None])
    onehot = onehot.to(cf.dtype)
    counts = onehot.sum(-1)
    sums = onehot @ cf.reshape(b, c, h * w).transpose(1, 2)
    return sums / counts.clamp_min(1)[..., None], counts


def bkrm_retrieve(xf, memory, w_q, w_k, w_v, w_out, return_attention=False):
    """Multi-head attention from pooled foreground queries onto codebook tokens.

    ``xf`` (B, s, c) queries; ``memory`` (K, D) tokens; ``w_q`` (H, c, d_k),
    ``w_k`` (H, D, d_k), ``w_v`` (H, D, d_v), ``w_out`` (H*d_v, c).
    Each head attends with softmax(q k^T / sqrt(d_k)); head outputs are
    concatenated and projected back to ``c`` channels.
    """
    d_k = w_q.shape[-1]
    q = torch.einsum("bsc,hcd->bhsd", xf, w_q)
    k = torch.einsum("kc,hcd->hkd", memory, w_k)
    v = torch.einsum("kc,hcd->hkd", memory, w_v)
    logits = torch.einsum("bhsd,hkd->bhsk", q, k) / math.sqrt(d_k)
    attn = logits.softmax(-1)
    heads = torch.einsum("bhsk,hkd->bshd", attn, v)
    xb = heads.reshape(*heads.shape[:2], -1) @ w_out
    return (xb, attn) if return_attention else xb


class BackgroundRetrieval(nn.Module):
    def __init__(self, query_dim=3, token_dim=3, heads=4, key_dim=16, value_dim=16):
        super().__init__()
        self.w_q = nn.Parameter(torch.randn(heads, query_dim, key_dim) / math.sqrt(query_dim))
        self.w_k = nn.Parameter(torch.randn(heads, token_dim, key_dim) / math.sqrt(token_dim))
        self.w_v = nn.Parameter(torch.randn(heads, token_dim, value_dim) / math.sqrt(token_dim))
        self.w_out = nn.Parameter(torch.randn(heads * value_dim, query_dim) / math.sqrt(heads * value_dim))

    def forward(self, xf, memory, return_attention=False):
        return bkrm_retrieve(xf, memory, self.w_q, self.w_k, self.w_v, self.w_out, return_attention)


def scatter_upsample(xb: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """Spread one vector per superpixel over the latent grid.

    ``index`` (B, h, w) picks the row of ``xb`` (B, s, c) for every cell; see
    :func:`camoinpaint.superpixel.fill_index`. An all-zero index broadcasts a
    single vector.
    """
    b, s, c = xb.shape
    if index.max() >= s or index.min() < 0:
        raise ValueError(f"index refers to rows outside [0, {s})")
    h, w = index.shape[-2:]
    flat = index.reshape(b, h * w, 1).expand(b, h * w, c)
    return xb.gather(1, flat).transpose(1, 2).reshape(b, c, h, w)


class FusionMLP(nn.Module):
    """Per-cell two-layer perceptron over ``concat(cf, xb_grid)``: 2c -> 4c -> c."""

    def __init__(self, channels=3, hidden_mult=4):
        super().__init__()
        self.fc1 = nn.Conv2d(2 * channels, hidden_mult * channels, 1)
        self.fc2 = nn.Conv2d(hidden_mult * channels, channels, 1)

    def forward(self, x):
        return self.fc2(F.silu(self.fc1(x)))


def rcem_fuse(cf, xb_grid, fusion: FusionMLP):
    if cf.shape != xb_grid.shape:
        raise ValueError(f"shape mismatch {tuple(cf.shape)} vs {tuple(xb_grid.shape)}")
    return fusion(torch.cat([cf, xb_grid], 1))


def enhance_condition(cf, z_rec, cm):
    """Keep ``cf`` on the foreground and take ``z_rec`` on the background.

    Selection (rather than ``cf*(1-cm) + z_rec*cm``) keeps foreground cells
    bitwise identical to ``cf``.
    """
    if cf.shape != z_rec.shape or cm.shape[-2:] != cf.shape[-2:]:
        raise ValueError("shape mismatch")
    return torch.where(cm.bool().expand_as(cf), z_rec, cf)


def bgrec_loss(z_rec, z0, cm):
    """Squared background reconstruction error, averaged over cells, channels and batch."""
    if z_rec.shape != z0.shape:
        raise ValueError("shape mismatch")
    return ((z_rec * cm - z0 * cm) ** 2).mean()


@dataclass
class EnhancedCondition:
    features: torch.Tensor  # (B, c, h, w)
    mask: torch.Tensor  # (B, 1, h, w)
    z_rec: torch.Tensor | None = None
    attention: torch.Tensor | None = None  # (B, H, s, K)

    def concat(self):
        return torch.cat([self.features, self.mask], 1)


class ConditionEnhancer(nn.Module):
    """Pool -> retrieve -> scatter -> fuse -> enhance, with a frozen codebook memory."""

    def __init__(self, memory: torch.Tensor, channels=3, heads=4, key_dim=16, value_dim=16,
                 localized=True):
        super().__init__()
        self.register_buffer("memory", memory.detach().clone())
        self.localized = localized
        self.retrieval = BackgroundRetrieval(channels, memory.shape[1], heads, key_dim, value_dim)
        self.fusion = FusionMLP(channels)

    def forward(self, cf, cm, labels=None, index=None, n_labels=None) -> EnhancedCondition:
        if self.localized:
            xf, _ = localized_masked_pool(cf, labels, n_labels)
        else:
            xf = masked_average_pool(cf, cm)
            index = torch.zeros(cf.shape[0], *cf.shape[2:], dtype=torch.long, device=cf.device)
        xb, attn = self.retrieval(xf, self.memory, return_attention=True)
        z_rec = rcem_fuse(cf, scatter_upsample(xb, index), self.fusion)
        return EnhancedCondition(enhance_condition(cf, z_rec, cm), cm, z_rec, attn)
