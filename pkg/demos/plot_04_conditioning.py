"""
Background retrieval and condition enhancement
===============================================

The object's latent features are pooled (once, or per superpixel), used as
attention queries over the frozen codebook, spread back over the grid, and
fused with the original condition. Only background cells change.
"""

import torch

from camoinpaint.autoencoder import VQVAE, export_global_embedding
from camoinpaint.conditioning import ConditionEnhancer
from camoinpaint.config import RunConfig
from camoinpaint.diffusion import encode_pairs
from camoinpaint.toy import make_pairs

torch.manual_seed(0)
cfg = RunConfig(codebook_size=32)
ae = VQVAE(4, 3, 32, hidden=8).eval()
batch = encode_pairs(ae, make_pairs(2, seed=5), cfg)

enh = ConditionEnhancer(export_global_embedding(ae.codebook), channels=3, heads=4, localized=True)
out = enh(batch.cf, batch.cm, batch.labels, batch.index, batch.n_labels)
print("attention", tuple(out.attention.shape), "(batch, heads, superpixels, codes)")
print("rows sum to one:", torch.allclose(out.attention.sum(-1), torch.ones(())))

fg = batch.cm.bool().logical_not().expand_as(batch.cf)
print("object cells untouched:", torch.equal(out.features[fg], batch.cf[fg]))
print("background changed:", not torch.equal(out.features[~fg], batch.cf[~fg]))

# The single-query variant pools the whole object into one vector.
glob = ConditionEnhancer(export_global_embedding(ae.codebook), localized=False)
print("global attention", tuple(glob(batch.cf, batch.cm).attention.shape))
