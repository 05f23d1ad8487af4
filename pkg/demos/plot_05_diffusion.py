"""
Training and sampling the inpainting model
==========================================

A short end-to-end run: noise schedule, a few hundred denoiser steps on toy
latents, then ancestral sampling with the object pasted back at 8 bits.
"""

import tempfile

import numpy as np

from camoinpaint.config import RunConfig
from camoinpaint.diffusion import build_schedule, encode_pairs, forward_noise, sample_inpaint
from camoinpaint.pipeline import build_autoencoder, foreground_audit, train_ldm
from camoinpaint.toy import make_pairs
import torch

sched = build_schedule(200, 1e-4, 2e-2)
print("alpha_bar at t = 1, 100, 200:", sched.alpha_bar[[1, 100, 200]].round(4))
z0 = torch.randn(10000)
print("noised variance at t=200:", round(forward_noise(z0, 200, torch.randn(10000), sched).var().item(), 3))

cfg = RunConfig(ldm_steps=300, ldm_batch_size=16, sample_steps=25, log_every=100)
ae = build_autoencoder(cfg).eval()
pairs = make_pairs(64, seed=2)
lat = encode_pairs(ae, pairs, cfg)
model, ckpt, records = train_ldm(cfg, cfg.ablation, ae, lat, tempfile.mkdtemp())
for r in records:
    print(f"step {r.step}: L_diff {r.L_diff:.4f}  L_bgrec {r.L_bgrec:.4f}")

imgs = sample_inpaint(model, ae, pairs[:8], sched, cfg, seed=0, batch=lat.select(slice(0, 8)))
print("object preserved in all samples:", all(foreground_audit(p, im) for p, im in zip(pairs, imgs)))
print("sample range", float(np.min(imgs)), float(np.max(imgs)))
