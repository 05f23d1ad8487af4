"""Camouflaged image generation: latent diffusion inpainting with codebook background retrieval."""

from .config import ABLATION_ROWS, Ablation, RunConfig, load_config, parse_config
from .data import CamoPair, DatasetManifest, composite_paste_back, downsample_mask, load_pair
from .errors import CheckpointError, ConfigError, DataError, CamoError

__version__ = "0.1.0"
