"""
Toy camouflage pairs
====================

Each pair is a 64x64 texture with an object cut from a perturbed copy of the
same texture, plus a mask that is 0 on the object and 1 on the background.
"""

import tempfile
from pathlib import Path

import numpy as np

from camoinpaint.data import DatasetManifest, downsample_mask
from camoinpaint.toy import make_pairs, make_toy_dataset

pairs = make_pairs(4, seed=0)
p = pairs[0]
print(p.id, p.image.shape, p.image.dtype, "object fraction", (p.mask == 0).mean().round(3))

# The diffusion model works on a 16x16 latent grid, so masks are reduced by
# block majority (ties count as background).
small = downsample_mask(p.mask, 4)
print("latent mask", small.shape, "object cells", int((small == 0).sum()))

# A dataset on disk is a directory of PNGs and a manifest listing splits.
root = Path(tempfile.mkdtemp()) / "toy"
make_toy_dataset(root, n=40, test_fraction=0.25, seed=0)
m = DatasetManifest.read(root)
print("train", len(m.split("train")), "test", len(m.split("test")))

# Side-by-side strip: image, mask and the object alone.
from PIL import Image

strip = np.concatenate([p.image, np.repeat(p.mask[..., None], 3, 2).astype(np.float32),
                        p.image * (p.mask == 0)[..., None]], 1)
Image.fromarray((strip * 255).round().astype(np.uint8)).save(root / "pair_strip.png")
print("wrote", root / "pair_strip.png")
