"""Small convolutional VQ-VAE: latent compression and the codebook used as retrieval memory.

Tensors are channels-first: images ``(B, 3, H, W)``, latents ``(B, c, H/f, W/f)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(F.silu(x))))


def _width(hidden, level):
    return hidden * max(1, min(2, level))


def _encoder(in_ch, hidden, out_ch, n_down):
    layers = [nn.Conv2d(in_ch, hidden, 3, padding=1)]
    ch = hidden
    for i in range(n_down):
        nxt = _width(hidden, i + 1)
        layers += [nn.SiLU(), nn.Conv2d(ch, nxt, 4, stride=2, padding=1)]
        ch = nxt
    layers += [ResBlock(ch), ResBlock(ch), nn.SiLU(), nn.Conv2d(ch, out_ch, 1)]
    return nn.Sequential(*layers)


def _decoder(in_ch, hidden, out_ch, n_up):
    ch = _width(hidden, n_up)
    layers = [nn.Conv2d(in_ch, ch, 3, padding=1), ResBlock(ch), ResBlock(ch)]
    for i in reversed(range(n_up)):
        nxt = _width(hidden, i)
        layers += [nn.SiLU(), nn.ConvTranspose2d(ch, nxt, 4, stride=2, padding=1)]
        ch = nxt
    layers += [nn.SiLU(), nn.Conv2d(ch, out_ch, 3, padding=1)]
    return nn.Sequential(*layers)


@dataclass
class QuantizationResult:
    indices: torch.Tensor  # (B, h, w) long
    quantized: torch.Tensor  # (B, D, h, w), straight-through w.r.t. the input latent


def nearest_code(flat: torch.Tensor, codebook: torch.Tensor, chunk: int = 4096) -> torch.Tensor:
    """Index of the nearest codebook row for every row of ``flat``; first index wins ties.

    Distances are formed as explicit squared differences (not the expanded
    ``|a|^2 - 2ab + |b|^2`` form) so exact ties stay exact.
    """
    out = []
    for part in flat.split(chunk):
        d = ((part[:, None, :] - codebook[None]) ** 2).sum(-1)
        out.append(d.argmin(1))
    return torch.cat(out) if out else flat.new_zeros(0, dtype=torch.long)


def quantize(latent: torch.Tensor, codebook: torch.Tensor) -> QuantizationResult:
    """Snap each cell of ``latent`` (B, D, h, w) to its nearest codebook entry.

    The returned ``quantized`` carries straight-through gradients: its
    gradient w.r.t. ``latent`` is the identity.
    """
    b, d, h, w = latent.shape
    if d != codebook.shape[1]:
        raise ValueError(f"latent has {d} channels but codebook entries have dim {codebook.shape[1]}")
    flat = latent.detach().permute(0, 2, 3, 1).reshape(-1, d)
    idx = nearest_code(flat, codebook.detach())
    q = codebook[idx].reshape(b, h, w, d).permute(0, 3, 1, 2)
    st = latent + (q - latent).detach()
    return QuantizationResult(idx.reshape(b, h, w), st)


def lookup(codebook: torch.Tensor, indices: torch.Tensor) -> torch.Tensor:
    return codebook[indices].permute(0, 3, 1, 2)


def vqvae_loss(image, reconstruction, pre_quant, codes, beta=0.25, ema=False):
    """Reconstruction MSE + codebook MSE + ``beta`` * commitment MSE.

    ``codes`` are the raw (non straight-through) codebook vectors picked for
    each cell. With ``ema`` the codebook term is dropped since EMA updates
    move the codebook instead.
    """
    rec = F.mse_loss(reconstruction, image)
    commit = F.mse_loss(pre_quant, codes.detach())
    loss = rec + beta * commit
    if not ema:
        loss = loss + F.mse_loss(codes, pre_quant.detach())
    return loss


class VQVAE(nn.Module):
    def __init__(self, factor=4, latent_channels=3, codebook_size=512, hidden=32,
                 ema=False, ema_decay=0.99):
        super().__init__()
        n = int(round(math.log2(factor)))
        if 2**n != factor or n < 1:
            raise ValueError(f"factor must be a power of two >= 2, got {factor}")
        self.factor = factor
        self.latent_channels = latent_channels
        self.encoder = _encoder(3, hidden, latent_channels, n)
        self.decoder = _decoder(latent_channels, hidden, 3, n)
        self.codebook = nn.Parameter(torch.empty(codebook_size, latent_channels).uniform_(-1, 1))
        self.ema = ema
        self.ema_decay = ema_decay
        if ema:
            self.codebook.requires_grad_(False)
            self.register_buffer("ema_count", torch.ones(codebook_size))
            self.register_buffer("ema_sum", self.codebook.detach().clone())

    @property
    def codebook_size(self):
        return self.codebook.shape[0]

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        h, w = image.shape[-2:]
        if h % self.factor or w % self.factor:
            raise ValueError(f"image size {(h, w)} not divisible by {self.factor}")
        return self.encoder(image * 2 - 1)

    def quantize(self, latent: torch.Tensor) -> QuantizationResult:
        return quantize(latent, self.codebook)

    def decode(self, latent: torch.Tensor, quantized: bool = False) -> torch.Tensor:
        """Map a latent to an image in [0, 1]; unless ``quantized`` the latent is snapped first."""
        if not quantized:
            latent = self.quantize(latent).quantized
        return (self.decoder(latent) * 0.5 + 0.5).clamp(0, 1)

    def forward(self, image):
        z = self.encode(image)
        qr = self.quantize(z)
        raw = self.codebook[qr.indices].permute(0, 3, 1, 2)
        recon = self.decoder(qr.quantized) * 0.5 + 0.5
        loss = vqvae_loss(image, recon, z, raw, ema=self.ema)
        if self.training and self.ema:
            self._ema_update(z.detach(), qr.indices)
        return recon, loss, qr

    @torch.no_grad()
    def _ema_update(self, z, idx):
        flat = z.permute(0, 2, 3, 1).reshape(-1, z.shape[1])
        onehot = F.one_hot(idx.reshape(-1), self.codebook_size).to(flat.dtype)
        g = self.ema_decay
        self.ema_count.mul_(g).add_(onehot.sum(0), alpha=1 - g)
        self.ema_sum.mul_(g).add_(onehot.T @ flat, alpha=1 - g)
        n = self.ema_count.sum()
        count = (self.ema_count + 1e-5) / (n + self.codebook_size * 1e-5) * n
        self.codebook.data.copy_(self.ema_sum / count[:, None])

    @torch.no_grad()
    def revive_dead_codes(self, z: torch.Tensor, usage: torch.Tensor, generator=None) -> int:
        """Re-seed codebook entries never used since the last call onto random encoder outputs."""
        dead = torch.nonzero(usage == 0).flatten()
        if len(dead) == 0:
            return 0
        flat = z.permute(0, 2, 3, 1).reshape(-1, z.shape[1])
        pick = torch.randint(len(flat), (len(dead),), generator=generator)
        self.codebook.data[dead] = flat[pick] + 1e-3 * torch.randn(len(dead), flat.shape[1], generator=generator)
        if self.ema:
            self.ema_sum[dead] = self.codebook.data[dead]
            self.ema_count[dead] = 1.0
        return len(dead)


def export_global_embedding(codebook: torch.Tensor) -> torch.Tensor:
    """Frozen copy of the codebook: ``K`` retrieval tokens of dimension ``D``."""
    return codebook.detach().clone().requires_grad_(False)


def image_to_tensor(images) -> torch.Tensor:
    """(H, W, 3) or (B, H, W, 3) float arrays -> (B, 3, H, W) float32 tensor."""
    a = np.asarray(images, dtype=np.float32)
    if a.ndim == 3:
        a = a[None]
    return torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2)))


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """(B, 3, H, W) tensor -> (B, H, W, 3) float array."""
    return t.detach().cpu().numpy().transpose(0, 2, 3, 1)
