"""Run configuration and the flat ``key = value`` config file format.

Example file::

    # desk-scale defaults
    image_size = 64
    superpixels = 8
    use_lmp = true

Unknown keys and unparsable values raise :class:`ConfigError`.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError

# Keys that do not change what a checkpoint computes. Excluded from the hash.
_UNHASHED = frozenset({"seed"})


@dataclass(frozen=True)
class RunConfig:
    # data
    image_size: int = 64
    latent_factor: int = 4
    latent_channels: int = 3
    # autoencoder
    codebook_size: int = 512
    embed_dim: int = 3
    ae_hidden: int = 16
    vq_beta: float = 0.25
    ema_codebook: bool = False
    ema_decay: float = 0.99
    vq_steps: int = 1500
    vq_batch_size: int = 32
    vq_lr: float = 2e-3
    # superpixels
    superpixels: int = 8
    slic_compactness: float = 10.0
    slic_iterations: int = 10
    # retrieval / fusion
    attn_heads: int = 4
    key_dim: int = 16
    value_dim: int = 16
    use_bkrm: bool = True
    use_rcem: bool = True
    use_lmp: bool = True
    # diffusion
    diffusion_steps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    sample_steps: int = 50
    unet_channels: int = 32
    ldm_steps: int = 3000
    ldm_batch_size: int = 32
    ldm_lr: float = 1e-3
    # evaluation
    kid_block_size: int = 50
    # misc
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        f = self.latent_factor
        if f < 2 or f & (f - 1):
            raise ConfigError(f"latent_factor must be a power of two >= 2, got {f}")
        if self.image_size % f:
            raise ConfigError(f"image_size {self.image_size} not divisible by latent_factor {f}")
        for name in ("superpixels", "attn_heads", "diffusion_steps", "sample_steps", "slic_iterations"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.embed_dim != self.latent_channels:
            raise ConfigError("embed_dim must equal latent_channels (codes live in the latent space)")
        if self.codebook_size < 2:
            raise ConfigError("codebook_size must be >= 2")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        if self.sample_steps > self.diffusion_steps:
            raise ConfigError("sample_steps cannot exceed diffusion_steps")
        Ablation(self.use_bkrm, self.use_rcem, self.use_lmp)

    @property
    def latent_size(self) -> int:
        return self.image_size // self.latent_factor

    @property
    def ablation(self) -> "Ablation":
        return Ablation(self.use_bkrm, self.use_rcem, self.use_lmp)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_dict().items())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


@dataclass(frozen=True)
class Ablation:
    """Module toggles for the four-row ablation. LMP and RCEM both need BKRM."""

    bkrm: bool = False
    rcem: bool = False
    lmp: bool = False

    def __post_init__(self):
        if self.lmp and not self.bkrm:
            raise ConfigError("LMP requires BKRM")
        if self.rcem and not self.bkrm:
            raise ConfigError("RCEM requires BKRM")

    @property
    def name(self) -> str:
        parts = [n for n, on in (("BKRM", self.bkrm), ("RCEM", self.rcem), ("LMP", self.lmp)) if on]
        return "base" if not parts else "+" + "+".join(parts)

    @classmethod
    def parse(cls, text: str) -> "Ablation":
        """Parse ``"base"`` or a ``+``/``,`` separated list like ``"bkrm+rcem"``."""
        text = text.strip().lower()
        if text in ("", "base", "none"):
            return cls()
        names = {p.strip() for p in text.replace(",", "+").split("+") if p.strip()}
        unknown = names - {"bkrm", "rcem", "lmp"}
        if unknown:
            raise ConfigError(f"unknown ablation modules: {sorted(unknown)}")
        return cls(bkrm="bkrm" in names, rcem="rcem" in names, lmp="lmp" in names)


ABLATION_ROWS = (
    Ablation(),
    Ablation(bkrm=True),
    Ablation(bkrm=True, rcem=True),
    Ablation(bkrm=True, rcem=True, lmp=True),
)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(key: str, raw: str, typ):
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None


_TYPES = {f.name: {"int": int, "float": float, "bool": bool, "str": str}[f.type] for f in fields(RunConfig)}


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw, _TYPES[key])
    return (base or RunConfig()).replace(**values)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)


def component_seed(master: int, name: str) -> int:
    """Independent per-component seed, so toggling one module leaves other streams alone."""
    ss = np.random.SeedSequence([master, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def component_rng(master: int, name: str) -> np.random.Generator:
    return np.random.default_rng(component_seed(master, name))


def torch_generator(master: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(component_seed(master, name))
    return g
