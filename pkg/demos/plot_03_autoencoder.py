"""
A small VQ-VAE
==============

The encoder maps 64x64 images to a 3-channel 16x16 latent. Decoding snaps
each latent vector to its nearest codebook entry first. A short run on toy
data already gives a usable reconstruction.
"""

import tempfile

import torch

from camoinpaint.config import RunConfig
from camoinpaint.pipeline import reconstruction_mse, train_vqvae
from camoinpaint.toy import make_pairs

cfg = RunConfig(vq_steps=150, codebook_size=64, log_every=50)
pairs = make_pairs(200, seed=1)
out = tempfile.mkdtemp()
model, path = train_vqvae(cfg, pairs, out)
print("checkpoint", path)
print("reconstruction MSE", round(reconstruction_mse(model, pairs[:64]), 5))

# Which codes get used?
from camoinpaint.autoencoder import image_to_tensor
import numpy as np

with torch.no_grad():
    z = model.encode(image_to_tensor(np.stack([q.image for q in pairs[:64]])))
    used = model.quantize(z).indices.unique()
print(f"{len(used)} of {cfg.codebook_size} codes in use")
