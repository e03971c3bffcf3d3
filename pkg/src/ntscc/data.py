"""Dataset ingestion: image lists, crop policies, toy corpus synthesis."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def load_image(path: str | Path) -> torch.Tensor:
    """PNG/JPEG -> float32 CHW tensor in [0, 1]; non-RGB inputs are converted."""
    img = Image.open(path).convert("RGB")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(x: torch.Tensor, path: str | Path) -> None:
    """CHW [0, 1] tensor -> 8-bit PNG."""
    arr = (x.detach().clamp(0, 1).permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def center_crop_multiple(x: torch.Tensor, multiple: int = 64) -> torch.Tensor:
    """Center-crop a CHW tensor so both dims are multiples of `multiple`."""
    _, h, w = x.shape
    th, tw = (h // multiple) * multiple, (w // multiple) * multiple
    if th == 0 or tw == 0:
        raise ConfigError(f"image {h}x{w} smaller than the crop multiple {multiple}")
    top, left = (h - th) // 2, (w - tw) // 2
    return x[:, top:top + th, left:left + tw]


def random_crop(x: torch.Tensor, size: int, generator: torch.Generator) -> torch.Tensor:
    _, h, w = x.shape
    if h < size or w < size:
        raise ConfigError(f"image {h}x{w} smaller than crop size {size}")
    top = int(torch.randint(h - size + 1, (1,), generator=generator))
    left = int(torch.randint(w - size + 1, (1,), generator=generator))
    return x[:, top:top + size, left:left + size]


class DatasetHandle:
    """Deterministically ordered image list with an in-memory decode cache."""

    def __init__(self, root: str | Path, cache: bool = True):
        self.root = Path(root)
        if not self.root.exists():
            raise ConfigError(f"dataset path does not exist: {self.root}")
        self.paths = sorted(
            p for p in self.root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
        )
        if not self.paths:
            raise ConfigError(f"no images found under {self.root}")
        self._cache: dict[int, torch.Tensor] = {} if cache else None

    def __len__(self) -> int:
        return len(self.paths)

    def image(self, idx: int) -> torch.Tensor:
        if self._cache is not None and idx in self._cache:
            return self._cache[idx]
        img = load_image(self.paths[idx])
        if self._cache is not None:
            self._cache[idx] = img
        return img

    def eval_image(self, idx: int, multiple: int = 64) -> torch.Tensor:
        return center_crop_multiple(self.image(idx), multiple)

    def sample_batch(self, batch_size: int, crop_size: int,
                     generator: torch.Generator) -> torch.Tensor:
        idxs = torch.randint(len(self.paths), (batch_size,), generator=generator)
        crops = [random_crop(self.image(int(i)), crop_size, generator) for i in idxs]
        return torch.stack(crops, dim=0)


def synthesize_toy_corpus(out_dir: str | Path, n_images: int = 32, size: int = 64,
                          seed: int = 0, noise: float = 0.01) -> list[Path]:
    """Write spatially-correlated synthetic PNGs for desk-scale experiments.

    Images mix smooth color gradients, soft blobs, and a few rectangles so
    that neighboring latents stay strongly correlated; `noise` adds texture.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / size
    paths = []
    for i in range(n_images):
        img = np.zeros((size, size, 3))
        for c in range(3):
            gx, gy = rng.uniform(-1, 1, 2)
            img[..., c] = 0.5 + 0.35 * (gx * (xs - 0.5) + gy * (ys - 0.5))
        for _ in range(rng.integers(2, 6)):
            cx, cy = rng.uniform(0.1, 0.9, 2)
            rad = rng.uniform(0.08, 0.35)
            blob = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * rad ** 2))
            color = rng.uniform(-0.5, 0.5, 3)
            img += blob[..., None] * color[None, None, :]
        if rng.random() < 0.5:
            x0, y0 = rng.integers(0, size // 2, 2)
            x1 = x0 + int(rng.integers(size // 8, size // 2))
            y1 = y0 + int(rng.integers(size // 8, size // 2))
            img[y0:y1, x0:x1] += rng.uniform(-0.3, 0.3, 3)[None, None, :]
        img += rng.normal(0.0, noise, img.shape)
        arr = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
        path = out_dir / f"toy_{i:04d}.png"
        Image.fromarray(arr).save(path)
        paths.append(path)
    return paths
