"""Dataset indexing, image loading, augmentation, synthetic data.

Expected layout: ``root/images/*.png|ppm`` and ``root/masks/*.png|pgm`` with
matching file stems (8-bit RGB images, 8-bit single-channel masks).  Images
are resized to the configured input size with align-corners bilinear
interpolation, scaled to [0, 1], and normalized per channel with statistics
computed on the training split.  Masks are resized nearest-neighbour and
binarized: a raw value is foreground iff it exceeds 127.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError
from .ops import interp_matrix

IMAGE_SUFFIXES = (".png", ".ppm")
MASK_SUFFIXES = (".png", ".pgm")
MASK_THRESHOLD = 127  # raw 8-bit value; strictly greater is foreground


@dataclass
class DatasetIndex:
    pairs: list[tuple[Path, Path]]
    splits: dict[str, list[int]]
    split_ratio: float
    input_size: tuple[int, int]
    channel_mean: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.float32))
    channel_std: np.ndarray = field(default_factory=lambda: np.ones(3, dtype=np.float32))

    def __len__(self) -> int:
        return len(self.pairs)

    def indices(self, split: str) -> list[int]:
        if split not in self.splits:
            raise DatasetError(f"unknown split {split!r}; have {sorted(self.splits)}")
        return self.splits[split]


def _resize_bilinear_np(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Align-corners bilinear resize of (C, H, W), plain numpy."""
    h, w = img.shape[-2], img.shape[-1]
    if (h, w) == tuple(size):
        return img
    br = interp_matrix(size[0], h, np.float64)
    bc = interp_matrix(size[1], w, np.float64)
    return np.matmul(np.matmul(br, img.astype(np.float64)), bc.T)


def _resize_nearest_np(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = img.shape[-2], img.shape[-1]
    if (h, w) == tuple(size):
        return img
    rows = np.round(np.linspace(0, h - 1, size[0])).astype(np.int64)
    cols = np.round(np.linspace(0, w - 1, size[1])).astype(np.int64)
    return img[..., rows[:, None], cols[None, :]]


def _read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as e:
        raise DatasetError(f"cannot read image {path}: {e}") from e
    return np.ascontiguousarray(arr.transpose(2, 0, 1))  # (3, H, W)


def _read_mask(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except OSError as e:
        raise DatasetError(f"cannot read mask {path}: {e}") from e
    return arr[None, :, :]  # (1, H, W), raw 8-bit


def _scan(root: Path, sub: str, suffixes) -> dict[str, Path]:
    d = root / sub
    if not d.is_dir():
        raise DatasetError(f"missing directory {d}")
    found = {}
    for p in sorted(d.iterdir()):
        if p.suffix.lower() in suffixes:
            found[p.stem] = p
    return found


def load_dataset(root, input_size: tuple[int, int] = (256, 256), split_ratio: float = 0.7,
                 seed: int = 0, val_fraction: float = 0.5) -> DatasetIndex:
    """Index a dataset root and assign a deterministic train/val/test split.

    ``split_ratio`` of the (seed-shuffled) pairs go to training; the held-out
    remainder splits val:test by ``val_fraction`` (default 1:1).  Per-channel
    normalization statistics come from the training-split images only.
    """
    root = Path(root)
    images = _scan(root, "images", IMAGE_SUFFIXES)
    masks = _scan(root, "masks", MASK_SUFFIXES)
    missing_masks = sorted(set(images) - set(masks))
    missing_images = sorted(set(masks) - set(images))
    if missing_masks or missing_images:
        raise DatasetError(
            f"unmatched stems under {root}: images without masks {missing_masks}, "
            f"masks without images {missing_images}"
        )
    if not images:
        raise DatasetError(f"no image/mask pairs under {root}")

    stems = sorted(images)
    pairs = [(images[s], masks[s]) for s in stems]
    order = np.random.default_rng(seed).permutation(len(pairs)).tolist()
    n_train = int(len(pairs) * split_ratio)
    held = order[n_train:]
    n_val = int(round(len(held) * val_fraction))
    splits = {
        "train": sorted(order[:n_train]),
        "val": sorted(held[:n_val]),
        "test": sorted(held[n_val:]),
    }

    index = DatasetIndex(pairs, splits, split_ratio, tuple(input_size))
    train_imgs = [
        _resize_bilinear_np(_read_image(pairs[i][0]), index.input_size)
        for i in splits["train"]
    ]
    if train_imgs:
        stacked = np.stack(train_imgs)
        index.channel_mean = stacked.mean(axis=(0, 2, 3)).astype(np.float32)
        std = stacked.std(axis=(0, 2, 3))
        index.channel_std = np.maximum(std, 1e-6).astype(np.float32)
    return index


def load_pair(index: DatasetIndex, i: int) -> tuple[np.ndarray, np.ndarray]:
    """Load pair ``i`` as (normalized (3,H,W) float32, binary (1,H,W) float32)."""
    img_path, mask_path = index.pairs[i]
    img = _resize_bilinear_np(_read_image(img_path), index.input_size)
    img = (img - index.channel_mean[:, None, None]) / index.channel_std[:, None, None]
    mask = _resize_nearest_np(_read_mask(mask_path), index.input_size)
    return img.astype(np.float32), (mask > MASK_THRESHOLD).astype(np.float32)


def augment(image: np.ndarray, mask: np.ndarray,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random flips (p=0.5 each) and a rotation from {0, 90, 180, 270} degrees.

    The same transform applies to image and mask, so the mask stays binary and
    its foreground count is preserved.  Requires square spatial dims.
    """
    if image.shape[-2:] != mask.shape[-2:]:
        raise DatasetError(f"image {image.shape} and mask {mask.shape} are not aligned")
    if rng.random() < 0.5:
        image = image[..., :, ::-1]
        mask = mask[..., :, ::-1]
    if rng.random() < 0.5:
        image = image[..., ::-1, :]
        mask = mask[..., ::-1, :]
    quarter_turns = int(rng.integers(4))
    if quarter_turns:
        image = np.rot90(image, quarter_turns, axes=(-2, -1))
        mask = np.rot90(mask, quarter_turns, axes=(-2, -1))
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def make_ellipse_dataset(root, count: int = 8, size: int = 64, seed: int = 0,
                         supersample: int = 4):
    """Write a small synthetic dataset of bright ellipses on dark backgrounds.

    Edges are anti-aliased by supersampled coverage so the intensity ramp
    carries a sub-pixel boundary cue; the mask cuts at half coverage.  Useful
    for smoke tests and overfitting checks; returns the root path.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    fine = size * supersample
    yy, xx = (np.mgrid[0:fine, 0:fine] + 0.5) / supersample
    for i in range(count):
        cy, cx = rng.uniform(0.42 * size, 0.58 * size, 2)
        ry, rx = rng.uniform(0.32 * size, 0.42 * size, 2)
        inside = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0).astype(np.float64)
        coverage = inside.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
        img = np.repeat((0.1 + 0.8 * coverage)[:, :, None], 3, axis=2)
        Image.fromarray((img * 255).astype(np.uint8)).save(root / "images" / f"sample{i:03d}.png")
        mask = (coverage > 0.5) * 255
        Image.fromarray(mask.astype(np.uint8)).save(root / "masks" / f"sample{i:03d}.png")
    return root
