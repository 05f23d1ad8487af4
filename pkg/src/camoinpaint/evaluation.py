"""FID and KID with a pluggable, deterministic feature extractor."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError, DataError

ASSETS = Path(__file__).parent / "assets"
DESK_WEIGHTS = ASSETS / "desk_extractor_v1.npz"


class FeatureExtractor:
    """Maps a list of (H, W, 3) float images to an (n, d) feature matrix.

    ``published_comparable`` is True only for the InceptionV3 pool features used
    in published FID/KID tables; no such backend ships here.
    """

    id = "abstract"
    input_size = 64
    dim = 0
    published_comparable = False

    def features(self, batch: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def __call__(self, images, batch_size=256) -> np.ndarray:
        if len(images) == 0:
            raise DataError("no images to extract features from")
        out = []
        for i in range(0, len(images), batch_size):
            x = torch.from_numpy(np.stack([np.asarray(im, dtype=np.float32) for im in images[i : i + batch_size]]))
            x = x.permute(0, 3, 1, 2)
            if x.shape[-2:] != (self.input_size, self.input_size):
                x = F.interpolate(x, size=(self.input_size, self.input_size), mode="bilinear",
                                  align_corners=False)
            with torch.no_grad():
                out.append(self.features(x).double().numpy())
        return np.concatenate(out)


def make_desk_weights(seed: int = 1234) -> dict[str, np.ndarray]:
    """He-initialised random conv weights for the desk extractor."""
    rng = np.random.default_rng(seed)
    shapes = [(16, 3, 5, 5), (32, 16, 3, 3), (64, 32, 3, 3)]
    w = {}
    for i, s in enumerate(shapes):
        fan_in = s[1] * s[2] * s[3]
        w[f"w{i}"] = (rng.standard_normal(s) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        w[f"b{i}"] = (rng.standard_normal(s[0]) * 0.1).astype(np.float32)
    return w


class DeskExtractor(FeatureExtractor):
    """Frozen three-layer random ReLU convnet; 64-d mean-pooled features at 64x64 input."""

    input_size = 64
    dim = 64

    def __init__(self, path=DESK_WEIGHTS):
        self.path = Path(path)
        with np.load(path) as f:
            self.weights = {k: torch.from_numpy(f[k]) for k in sorted(f.files)}
        digest = hashlib.sha256(b"".join(self.weights[k].numpy().tobytes() for k in sorted(self.weights)))
        self.id = f"desk-convnet-v1-{digest.hexdigest()[:8]}"

    def features(self, x):
        w = self.weights
        h = F.relu(F.conv2d(x * 2 - 1, w["w0"], w["b0"], stride=2, padding=2))
        h = F.relu(F.conv2d(h, w["w1"], w["b1"], stride=2, padding=1))
        h = F.relu(F.conv2d(h, w["w2"], w["b2"], stride=2, padding=1))
        return h.mean(dim=(2, 3))


def extract_features(images, extractor: FeatureExtractor) -> np.ndarray:
    return extractor(images)


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray


def gaussian_stats(features) -> GaussianStats:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError("need an (n, d) matrix with n >= 2")
    if not np.isfinite(x).all():
        raise ValueError("non-finite features")
    mu = x.mean(0)
    xc = x - mu
    cov = xc.T @ xc / (len(x) - 1)
    return GaussianStats(mu, (cov + cov.T) / 2)


def matrix_sqrt_spd(a, sym_tol=1e-8, neg_tol=1e-6) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Tolerances are relative to ``max(1, |a|_max)``. Eigenvalues in
    ``[-neg_tol, 0)`` are clamped to zero; more negative ones raise.
    """
    a = np.asarray(a, dtype=np.float64)
    scale = max(1.0, float(np.abs(a).max()) if a.size else 1.0)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    if np.abs(a - a.T).max() > sym_tol * scale:
        raise ValueError("matrix is not symmetric")
    vals, vecs = np.linalg.eigh((a + a.T) / 2)
    if vals.min() < -neg_tol * scale:
        raise ValueError(f"matrix is indefinite (min eigenvalue {vals.min():.3g})")
    root = (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T
    return (root + root.T) / 2


def fid(a: GaussianStats, b: GaussianStats) -> float:
    """Frechet distance between Gaussians.

    The trace of (S_a S_b)^(1/2) is taken as the trace of
    (S_a^(1/2) S_b S_a^(1/2))^(1/2), which has the same eigenvalues and is
    symmetric PSD.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError("dimension mismatch")
    ra = matrix_sqrt_spd(a.cov)
    inner = ra @ b.cov @ ra
    cross = np.trace(matrix_sqrt_spd((inner + inner.T) / 2))
    d = float(((a.mean - b.mean) ** 2).sum() + np.trace(a.cov) + np.trace(b.cov) - 2 * cross)
    if d < -1e-6 * max(1.0, np.trace(a.cov) + np.trace(b.cov)):
        raise ArithmeticError(f"negative FID {d}")
    return max(d, 0.0)


def polynomial_kernel(x, y):
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def mmd2_unbiased(x, y) -> float:
    m, n = len(x), len(y)
    kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2 * kxy.mean())


def kid(features_a, features_b, block_size=50) -> float:
    """Mean unbiased MMD^2 over disjoint consecutive blocks of ``block_size`` rows."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if block_size < 2:
        raise ValueError("block_size must be >= 2")
    if len(a) < block_size or len(b) < block_size:
        raise ValueError(f"need at least {block_size} samples per set")
    n_blocks = min(len(a), len(b)) // block_size
    vals = [mmd2_unbiased(a[i * block_size : (i + 1) * block_size], b[i * block_size : (i + 1) * block_size])
            for i in range(n_blocks)]
    return float(np.mean(vals))


@dataclass(frozen=True)
class MetricsReport:
    fid: float
    kid: float
    n_generated: int
    n_reference: int
    extractor_id: str
    config_hash: str
    published_comparable: bool = False

    def to_json(self) -> str:
        d = asdict(self)
        if not self.published_comparable:
            d["note"] = "desk-scale feature extractor; not comparable to published InceptionV3 FID/KID"
        return json.dumps(d, sort_keys=True, indent=2) + "\n"

    def summary(self) -> str:
        tag = "" if self.published_comparable else " [desk extractor, not comparable to published scores]"
        return (f"FID {self.fid:.4f}  KID {self.kid:.5f}  "
                f"(n_gen={self.n_generated}, n_ref={self.n_reference}, {self.extractor_id}){tag}")


def make_report(fid_value, kid_value, n_gen, n_ref, extractor: FeatureExtractor, config_hash,
                claim_published_comparable=False) -> MetricsReport:
    if claim_published_comparable and not extractor.published_comparable:
        raise ConfigError(f"extractor {extractor.id} numbers cannot be labelled published-comparable")
    return MetricsReport(float(fid_value), float(kid_value), n_gen, n_ref, extractor.id, config_hash,
                         bool(claim_published_comparable))


def load_image_dir(path) -> list[np.ndarray]:
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"not a directory: {path}")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise DataError(f"no images in {path}")
    out = []
    for p in files:
        try:
            with Image.open(p) as im:
                out.append(np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0)
        except OSError as e:
            raise DataError(f"cannot read {p}: {e}") from e
    return out


def evaluate_images(generated, reference, extractor: FeatureExtractor, config_hash="",
                    block_size=50, claim_published_comparable=False) -> MetricsReport:
    fa, fb = extractor(generated), extractor(reference)
    bs = min(block_size, len(fa), len(fb))
    return make_report(fid(gaussian_stats(fa), gaussian_stats(fb)), kid(fa, fb, bs), len(fa), len(fb),
                       extractor, config_hash, claim_published_comparable)


def evaluate(generated_dir, reference_dir, extractor: FeatureExtractor | None = None, config=None,
             out_path=None, claim_published_comparable=False) -> MetricsReport:
    """Compare two image directories and (optionally) write the JSON report."""
    extractor = extractor or DeskExtractor()
    block = config.kid_block_size if config is not None else 50
    report = evaluate_images(load_image_dir(generated_dir), load_image_dir(reference_dir), extractor,
                             config.config_hash() if config is not None else "", block, claim_published_comparable)
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(report.to_json())
    return report
