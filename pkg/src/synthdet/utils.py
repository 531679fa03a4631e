"""Small shared helpers: PNG I/O with embedded metadata, image range
conversion, and seeding."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image
from PIL.PngImagePlugin import PngInfo


def save_png(path: Path | str, image: np.ndarray, metadata: dict[str, str] | None = None) -> None:
    """Write an 8-bit RGB array; metadata lands in tEXt chunks."""
    if image.dtype != np.uint8:
        raise ValueError(f"expected uint8 image, got {image.dtype}")
    info = PngInfo()
    for key, value in (metadata or {}).items():
        if value:
            info.add_text(key, str(value))
    Image.fromarray(image, mode="RGB").save(Path(path), pnginfo=info)


def load_png(path: Path | str) -> np.ndarray:
    with Image.open(Path(path)) as img:
        return np.asarray(img.convert("RGB"))


def read_png_metadata(path: Path | str) -> dict[str, str]:
    with Image.open(Path(path)) as img:
        return dict(img.text) if hasattr(img, "text") else {}


def to_unit_range(images: np.ndarray) -> torch.Tensor:
    """uint8 HWC (or NHWC) -> float32 CHW (NCHW) tensor in [-1, 1]."""
    arr = np.asarray(images, dtype=np.float32) / 127.5 - 1.0
    tensor = torch.from_numpy(arr)
    if tensor.ndim == 3:
        return tensor.permute(2, 0, 1).contiguous()
    return tensor.permute(0, 3, 1, 2).contiguous()


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """float CHW (NCHW) tensor in [-1, 1] -> uint8 HWC (NHWC) array."""
    arr = images.detach().clamp(-1.0, 1.0).cpu().numpy()
    arr = ((arr + 1.0) * 127.5).round().astype(np.uint8)
    if arr.ndim == 3:
        return arr.transpose(1, 2, 0)
    return arr.transpose(0, 2, 3, 1)


def seed_everything(seed: int) -> np.random.Generator:
    """Seed torch and return a numpy generator for auxiliary sampling."""
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def image_grid(images: np.ndarray, cols: int = 4, pad: int = 2) -> np.ndarray:
    """Tile (N, H, W, 3) uint8 images into one grid image."""
    n, h, w, _ = images.shape
    rows = (n + cols - 1) // cols
    grid = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad, 3), 32, dtype=np.uint8)
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        y = pad + r * (h + pad)
        x = pad + c * (w + pad)
        grid[y : y + h, x : x + w] = img
    return grid
