"""Images, masks, dataset manifests, and final compositing.

Mask convention throughout: ``0`` marks the preserved foreground object,
``1`` the editable background. On disk masks are single-channel 8-bit with
0 = object and 255 = background.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

SPLITS = ("train", "test")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def check_mask(mask: np.ndarray) -> None:
    if mask.ndim != 2:
        raise DataError(f"mask must be 2-D, got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise DataError("mask is not strictly binary")
    if mask.all():
        raise DataError("degenerate mask: no foreground")
    if not mask.any():
        raise DataError("degenerate mask: no background")


@dataclass(frozen=True)
class CamoPair:
    """Source image (H, W, 3) float in [0, 1] and its binary mask (H, W) uint8."""

    image: np.ndarray
    mask: np.ndarray
    id: str

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float32)
        if img.ndim != 3 or img.shape[2] != 3:
            raise DataError(f"image must be (H, W, 3), got {img.shape}")
        if img.min() < 0 or img.max() > 1:
            raise DataError("image values outside [0, 1]")
        mask = np.asarray(self.mask).astype(np.uint8)
        check_mask(mask)
        if mask.shape != img.shape[:2]:
            raise DataError(f"image {img.shape[:2]} and mask {mask.shape} sizes differ")
        object.__setattr__(self, "image", _frozen(img))
        object.__setattr__(self, "mask", _frozen(mask))

    @property
    def size(self) -> tuple[int, int]:
        return self.mask.shape


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def border_majority(mask: np.ndarray) -> int:
    border = np.concatenate([mask[0], mask[-1], mask[1:-1, 0], mask[1:-1, -1]])
    return int(border.mean() >= 0.5)


def load_pair(image_path, mask_path, target_size, id=None, flip_inverted=False) -> CamoPair:
    """Load, resize and binarize an image/mask pair.

    The image is resized bilinearly, the mask with nearest-neighbour and then
    thresholded at 0.5. A mask whose border is mostly 0 looks inverted; it is
    flipped only when ``flip_inverted`` is set.
    """
    if isinstance(target_size, int):
        target_size = (target_size, target_size)
    th, tw = target_size
    try:
        with Image.open(image_path) as im:
            im = im.convert("RGB")
            if im.size != (tw, th):
                im = im.resize((tw, th), Image.BILINEAR)
            image = np.asarray(im, dtype=np.float32) / 255.0
        with Image.open(mask_path) as mk:
            if mk.mode not in ("L", "1", "P", "I", "I;16"):
                raise DataError(f"mask {mask_path} is not single-channel (mode {mk.mode})")
            mk = mk.convert("L")
            if mk.size != (tw, th):
                mk = mk.resize((tw, th), Image.NEAREST)
            mask = (np.asarray(mk, dtype=np.float32) / 255.0 >= 0.5).astype(np.uint8)
    except (OSError, SyntaxError) as e:
        raise DataError(f"cannot decode pair {image_path}, {mask_path}: {e}") from e
    if flip_inverted and border_majority(mask) == 0:
        mask = 1 - mask
    return CamoPair(image, mask, id if id is not None else Path(image_path).stem)


def save_pair(pair: CamoPair, image_path, mask_path) -> None:
    Path(image_path).parent.mkdir(parents=True, exist_ok=True)
    Path(mask_path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(pair.image)).save(image_path)
    Image.fromarray(pair.mask * 255).save(mask_path)


def downsample_mask(mask: np.ndarray, f: int) -> np.ndarray:
    """Block-majority downsample by ``f``; a tied block counts as background (1)."""
    mask = np.asarray(mask)
    h, w = mask.shape
    if h % f or w % f:
        raise DataError(f"mask {mask.shape} not divisible by {f}")
    blocks = mask.reshape(h // f, f, w // f, f).astype(np.int64)
    ones = blocks.sum(axis=(1, 3))
    return (2 * ones >= f * f).astype(np.uint8)


def composite_paste_back(source: np.ndarray, generated: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Take ``source`` where mask is 0 and ``generated`` where it is 1."""
    source, generated, mask = np.asarray(source), np.asarray(generated), np.asarray(mask)
    if source.shape != generated.shape or source.shape[:2] != mask.shape:
        raise DataError(
            f"shape mismatch: source {source.shape}, generated {generated.shape}, mask {mask.shape}"
        )
    return np.where(mask[..., None].astype(bool), generated, source)


# -- manifests --------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    image_path: Path
    mask_path: Path
    id: str
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    """Dataset at ``<root>/images/<id>.png`` and ``<root>/masks/<id>.png``.

    The manifest file holds one ``<id> <split>`` record per line.
    """

    root: Path
    entries: tuple

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError("manifest ids are not unique")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def __len__(self):
        return len(self.entries)

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.txt"
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        root = path.parent
        entries = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2 or parts[1] not in SPLITS:
                raise DataError(f"{path}:{lineno}: expected '<id> <train|test>'")
            id_, split = parts
            e = ManifestEntry(root / "images" / f"{id_}.png", root / "masks" / f"{id_}.png", id_, split)
            for p in (e.image_path, e.mask_path):
                if not p.exists():
                    raise DataError(f"{path}:{lineno}: missing file {p}")
            entries.append(e)
        return cls(root, tuple(entries))

    def write(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / "manifest.txt"
        path.write_text("".join(f"{e.id} {e.split}\n" for e in self.entries))
        return path

    def load(self, split: str | None, target_size) -> list[CamoPair]:
        entries = self.entries if split is None else self.split(split)
        return [load_pair(e.image_path, e.mask_path, target_size, id=e.id) for e in entries]


def write_dataset(root, pairs, splits) -> DatasetManifest:
    root = Path(root)
    entries = []
    for pair, split in zip(pairs, splits):
        e = ManifestEntry(root / "images" / f"{pair.id}.png", root / "masks" / f"{pair.id}.png", pair.id, split)
        save_pair(pair, e.image_path, e.mask_path)
        entries.append(e)
    manifest = DatasetManifest(root, tuple(entries))
    manifest.write()
    return manifest
