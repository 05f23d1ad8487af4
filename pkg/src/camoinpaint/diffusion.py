"""Latent diffusion inpainting with an optional retrieval-enhanced condition."""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .autoencoder import VQVAE, image_to_tensor
from .conditioning import ConditionEnhancer, EnhancedCondition, bgrec_loss
from .config import Ablation, RunConfig, component_seed
from .errors import DataError
from .data import CamoPair, composite_paste_back, downsample_mask, to_uint8
from .superpixel import fill_index, slic_foreground


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are indexed by timestep ``t`` in ``0..T``; entry 0 is the clean state."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas) - 1


def build_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear betas on ``1..T``; cumulative products with ``alpha_bar[0] = 1``."""
    if T < 1 or not 0 < beta_start <= beta_end < 1:
        raise ValueError("need T >= 1 and 0 < beta_start <= beta_end < 1")
    betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T) if T > 1 else [beta_start]])
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def forward_noise(z0, t, eps, schedule: NoiseSchedule):
    """z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps, with ``t`` a scalar or (B,) tensor."""
    t = torch.as_tensor(t)
    if (t < 0).any() or (t > schedule.T).any():
        raise ValueError(f"t outside [0, {schedule.T}]")
    if eps.shape != z0.shape:
        raise ValueError("eps and z0 shapes differ")
    ab = torch.as_tensor(schedule.alpha_bar, dtype=z0.dtype)[t.long()]
    ab = ab.reshape(-1, *([1] * (z0.dim() - 1))) if ab.dim() else ab
    return ab.sqrt() * z0 + (1 - ab).sqrt() * eps


def sampling_timesteps(T: int, steps: int) -> list[int]:
    """``steps`` evenly spaced timesteps from ``T`` down to 1."""
    ts = np.unique(np.rint(np.linspace(1, T, steps)).astype(int))
    return ts[::-1].tolist()


# -- condition construction ---------------------------------------------------


@dataclass
class ConditionBundle:
    cf: torch.Tensor  # (B, c, h, w)
    cm: torch.Tensor  # (B, 1, h, w)

    def concat(self):
        return torch.cat([self.cf, self.cm], 1)


def known_region(images: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Zero the editable background: ``x * (1 - m)`` with masks (B, H, W)."""
    return images * (1 - masks[:, None].to(images.dtype))


def latent_mask(masks, f: int) -> torch.Tensor:
    m = np.stack([downsample_mask(np.asarray(mk), f) for mk in np.asarray(masks)])
    return torch.from_numpy(m[:, None].astype(np.float32))


@torch.no_grad()
def build_condition(images: torch.Tensor, masks, autoencoder: VQVAE) -> ConditionBundle:
    masks_t = torch.as_tensor(np.asarray(masks))
    cf = autoencoder.encode(known_region(images, masks_t))
    return ConditionBundle(cf, latent_mask(masks, autoencoder.factor))


# -- denoiser -------------------------------------------------------------------


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([args.sin(), args.cos()], 1)


class TimeResBlock(nn.Module):
    def __init__(self, cin, cout, tdim):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class UNetDenoiser(nn.Module):
    """Two-level U-Net predicting noise from ``concat(z_t, condition, mask)`` and ``t``."""

    def __init__(self, latent_channels=3, cond_channels=4, base=32):
        super().__init__()
        self.tdim = base * 4
        self.time_mlp = nn.Sequential(nn.Linear(base, self.tdim), nn.SiLU(), nn.Linear(self.tdim, self.tdim))
        self.base = base
        c1, c2 = base, base * 2
        self.conv_in = nn.Conv2d(latent_channels + cond_channels, c1, 3, padding=1)
        self.down1 = TimeResBlock(c1, c1, self.tdim)
        self.pool1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.down2 = TimeResBlock(c1, c2, self.tdim)
        self.pool2 = nn.Conv2d(c2, c2, 3, stride=2, padding=1)
        self.mid1 = TimeResBlock(c2, c2, self.tdim)
        self.mid2 = TimeResBlock(c2, c2, self.tdim)
        self.up2 = TimeResBlock(c2 + c2, c2, self.tdim)
        self.up1 = TimeResBlock(c2 + c1, c1, self.tdim)
        self.out_norm = nn.GroupNorm(8, c1)
        self.conv_out = nn.Conv2d(c1, latent_channels, 3, padding=1)

    def forward(self, zt, cond, t):
        temb = self.time_mlp(timestep_embedding(t, self.base).to(zt.dtype))
        h0 = self.conv_in(torch.cat([zt, cond], 1))
        h1 = self.down1(h0, temb)
        h2 = self.down2(self.pool1(h1), temb)
        h = self.mid2(self.mid1(self.pool2(h2), temb), temb)
        h = F.interpolate(h, size=h2.shape[-2:], mode="nearest")
        h = self.up2(torch.cat([h, h2], 1), temb)
        h = F.interpolate(h, size=h1.shape[-2:], mode="nearest")
        h = self.up1(torch.cat([h, h1], 1), temb)
        return self.conv_out(F.silu(self.out_norm(h)))


# -- full model -------------------------------------------------------------------


@dataclass
class LatentBatch:
    """Precomputed per-pair tensors; the autoencoder is frozen so these never change."""

    z0: torch.Tensor  # (B, c, h, w) ground-truth latents
    cf: torch.Tensor  # (B, c, h, w) encoded known regions
    cm: torch.Tensor  # (B, 1, h, w)
    labels: torch.Tensor  # (B, h, w) superpixel labels, -1 on background
    index: torch.Tensor  # (B, h, w) fill index for scattering
    n_labels: int

    def __len__(self):
        return self.z0.shape[0]

    def select(self, idx) -> "LatentBatch":
        return LatentBatch(self.z0[idx], self.cf[idx], self.cm[idx], self.labels[idx],
                           self.index[idx], self.n_labels)

    def to(self, dtype) -> "LatentBatch":
        return LatentBatch(self.z0.to(dtype), self.cf.to(dtype), self.cm.to(dtype), self.labels,
                           self.index, self.n_labels)


@contextlib.contextmanager
def _init_rng(seed, name):
    if seed is None:
        yield
        return
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(component_seed(seed, name))
        yield


class InpaintModel(nn.Module):
    """Denoiser plus, depending on the ablation toggles, the retrieval/fusion condition path."""

    def __init__(self, config: RunConfig, memory: torch.Tensor, ablation: Ablation | None = None,
                 seed: int | None = None):
        super().__init__()
        self.ablation = ablation if ablation is not None else config.ablation
        c = config.latent_channels
        # separate init streams: switching the retrieval path on leaves the denoiser init unchanged
        with _init_rng(seed, "init-denoiser"):
            self.denoiser = UNetDenoiser(c, c + 1, config.unet_channels)
        self.enhancer = None
        if self.ablation.bkrm:
            with _init_rng(seed, "init-enhancer"):
                self.enhancer = ConditionEnhancer(memory, c, config.attn_heads, config.key_dim,
                                                  config.value_dim, localized=self.ablation.lmp)

    def condition(self, batch: LatentBatch) -> EnhancedCondition:
        if self.enhancer is None:
            return EnhancedCondition(batch.cf, batch.cm)
        return self.enhancer(batch.cf, batch.cm, batch.labels, batch.index, batch.n_labels)

    def denoise(self, zt, cond: EnhancedCondition, t):
        if zt.shape != cond.features.shape:
            raise ValueError(f"latent {tuple(zt.shape)} vs condition {tuple(cond.features.shape)}")
        t = torch.as_tensor(t).expand(zt.shape[0]) if torch.as_tensor(t).dim() == 0 else t
        return self.denoiser(zt, cond.concat(), t)

    def extra_parameter_count(self) -> int:
        return 0 if self.enhancer is None else sum(p.numel() for p in self.enhancer.parameters())


def denoise_predict(model: InpaintModel, zt, cond: EnhancedCondition, t):
    return model.denoise(zt, cond, t)


def total_loss(model: InpaintModel, batch: LatentBatch, t, eps, schedule: NoiseSchedule):
    """Noise-prediction MSE plus (with RCEM) the background reconstruction loss, unweighted."""
    cond = model.condition(batch)
    zt = forward_noise(batch.z0, t, eps, schedule)
    l_diff = F.mse_loss(model.denoise(zt, cond, t), eps)
    if model.ablation.rcem:
        l_bg = bgrec_loss(cond.z_rec, batch.z0, batch.cm)
    else:
        l_bg = torch.zeros((), dtype=l_diff.dtype)
    total = l_diff + l_bg
    return total, {"L_diff": l_diff.item(), "L_bgrec": l_bg.item(), "total": total.item()}


# -- preparation and sampling -----------------------------------------------------


def superpixels_for(cf: torch.Tensor, cm: torch.Tensor, config: RunConfig, seed: int = 0):
    """SLIC labels and fill indices for each item of a condition batch."""
    labels, index = [], []
    for i in range(cf.shape[0]):
        feat = cf[i].permute(1, 2, 0).double().numpy()
        spx = slic_foreground(feat, cm[i, 0].numpy(), config.superpixels, config.slic_compactness,
                              config.slic_iterations, seed=seed)
        labels.append(torch.from_numpy(spx.labels))
        index.append(torch.from_numpy(fill_index(spx)))
    return torch.stack(labels), torch.stack(index)


@torch.no_grad()
def encode_pairs(autoencoder: VQVAE, pairs, config: RunConfig, batch_size=128) -> LatentBatch:
    autoencoder.eval()
    z0s, cfs, cms = [], [], []
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i : i + batch_size]
        x = image_to_tensor(np.stack([p.image for p in chunk]))
        masks = np.stack([p.mask for p in chunk])
        cond = build_condition(x, masks, autoencoder)
        z0s.append(autoencoder.encode(x))
        cfs.append(cond.cf)
        cms.append(cond.cm)
    cf, cm = torch.cat(cfs), torch.cat(cms)
    fg_cells = (cm == 0).sum(dim=(1, 2, 3))
    if (fg_cells == 0).any() or (cm.sum(dim=(1, 2, 3)) == 0).any():
        bad = [p.id for p, n, b in zip(pairs, fg_cells, cm.sum(dim=(1, 2, 3))) if n == 0 or b == 0]
        raise DataError(f"degenerate mask at latent resolution: {bad[:5]}")
    labels, index = superpixels_for(cf, cm, config)
    return LatentBatch(torch.cat(z0s), cf, cm, labels, index, config.superpixels)


@torch.no_grad()
def sample_latents(model: InpaintModel, batch: LatentBatch, schedule: NoiseSchedule, steps: int,
                   generator: torch.Generator, trace=None):
    """Ancestral sampling over ``steps`` respaced timesteps. The condition is built once."""
    model.eval()
    cond = model.condition(batch)
    if trace is not None:
        trace.append(cond)
    z = torch.randn(batch.z0.shape, generator=generator)
    ab = torch.as_tensor(schedule.alpha_bar, dtype=z.dtype)
    ts = sampling_timesteps(schedule.T, steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps = model.denoise(z, cond, torch.full((z.shape[0],), t, dtype=torch.long))
        a_t, a_prev = ab[t], ab[t_prev]
        beta = 1 - a_t / a_prev
        z0_hat = (z - (1 - a_t).sqrt() * eps) / a_t.sqrt()
        mean = (a_prev.sqrt() * beta / (1 - a_t)) * z0_hat + ((1 - beta).sqrt() * (1 - a_prev) / (1 - a_t)) * z
        if t_prev > 0:
            var = beta * (1 - a_prev) / (1 - a_t)
            z = mean + var.sqrt() * torch.randn(z.shape, generator=generator)
        else:
            z = mean
    return z


@torch.no_grad()
def sample_inpaint(model: InpaintModel, autoencoder: VQVAE, pairs, schedule: NoiseSchedule,
                   config: RunConfig, steps: int | None = None, seed: int = 0, batch: LatentBatch | None = None,
                   trace=None) -> list[np.ndarray]:
    """Generate camouflaged images for ``pairs``; foreground pixels are pasted back from the source.

    Returns float arrays (H, W, 3) in [0, 1] holding exact 8-bit values.
    """
    if batch is None:
        batch = encode_pairs(autoencoder, pairs, config)
    g = torch.Generator()
    g.manual_seed(seed)
    z = sample_latents(model, batch, schedule, steps or config.sample_steps, g, trace)
    gen = autoencoder.decode(z).permute(0, 2, 3, 1).numpy()
    out = []
    for p, img in zip(pairs, gen):
        img8 = to_uint8(img).astype(np.float32) / 255.0
        src8 = to_uint8(p.image).astype(np.float32) / 255.0
        out.append(composite_paste_back(src8, img8, p.mask))
    return out
