"""
Superpixels on the object
=========================

SLIC runs only over object cells of a latent feature map. It alternates
assignment and center updates, so the summed joint distance never goes up,
then repairs any label that ended up in several pieces.
"""

import numpy as np

from camoinpaint.superpixel import fill_index, label_image, slic_foreground
from camoinpaint.toy import make_pairs
from camoinpaint.data import downsample_mask

p = make_pairs(1, seed=3)[0]
mask = downsample_mask(p.mask, 4)
# stand-in features: the image averaged down to the latent grid
feats = p.image.reshape(16, 4, 16, 4, 3).mean((1, 3))

spx = slic_foreground(feats, mask, s=8, seed=0)
print("labels used:", spx.n_labels)
print("objective per iteration:", np.round(spx.objective_history, 4))
print(spx.labels)

# Background cells borrow the label of the nearest superpixel centroid; this
# is how one vector per superpixel gets spread over the whole grid.
print(fill_index(spx))

label_image(spx).resize((128, 128), 0).save("/tmp/superpixels.png")
print("wrote /tmp/superpixels.png")
