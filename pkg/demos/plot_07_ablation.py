"""
Module ablation, in miniature
=============================

The full harness trains the four rows (base, +retrieval, +reconstruction
loss, +superpixel pooling) with shared seeds and scores each against held-out
images. This version uses tiny step counts so it finishes in a few minutes;
the acceptance suite runs the real budget. At 100 steps the rows are
indistinguishable; the gaps only open up once the denoiser has trained.
"""

import tempfile
from pathlib import Path

from camoinpaint.config import RunConfig
from camoinpaint.data import DatasetManifest
from camoinpaint.pipeline import ablate
from camoinpaint.toy import make_toy_dataset

root = Path(tempfile.mkdtemp())
make_toy_dataset(root / "data", n=200, test_fraction=0.25, seed=0)
cfg = RunConfig(vq_steps=100, ldm_steps=100, ldm_batch_size=16, sample_steps=10)
report = ablate(cfg, DatasetManifest.read(root / "data"), root / "ablation", seeds=(0,), progress=print)
print((root / "ablation" / "ablation.txt").read_text())
