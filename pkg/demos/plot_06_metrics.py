"""
FID and KID
===========

Both metrics compare feature distributions. With Gaussians the answer is
known in closed form, which makes a good sanity check. Real images go
through a small frozen convnet shipped with the package; its numbers are not
comparable to published Inception-based scores.
"""

import numpy as np

from camoinpaint.evaluation import DeskExtractor, GaussianStats, evaluate_images, fid, gaussian_stats, kid
from camoinpaint.toy import make_pairs

mu = np.full(16, 0.5)
print("exact FID:", fid(GaussianStats(np.zeros(16), np.eye(16)), GaussianStats(mu, np.eye(16))))

rng = np.random.default_rng(0)
a, b = rng.normal(size=(20000, 16)), rng.normal(size=(20000, 16)) + mu
print("sampled FID:", round(fid(gaussian_stats(a), gaussian_stats(b)), 4))
print("KID, same distribution:", round(kid(a[:500], a[500:1000]), 5))
print("KID, shifted:", round(kid(a[:500], b[:500]), 5))

imgs = [p.image for p in make_pairs(200, seed=9)]
rep = evaluate_images(imgs[:100], imgs[100:], DeskExtractor(), block_size=50)
print(rep.summary())
