"""Array/tensor/PNG conversions shared by the pipelines."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap [0, 1] floats to the 8-bit grid (values k / 255)."""
    return (np.clip(np.round(np.asarray(image, dtype=np.float64) * 255), 0, 255) / 255).astype(np.float32)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """H x W x 3 in [0, 1] -> 3 x H x W in [-1, 1]."""
    return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1) * 2 - 1


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """... x 3 x H x W in [-1, 1] -> ... x H x W x 3 in [0, 1], quantised."""
    arr = ((t.detach().to(torch.float64).clamp(-1, 1) + 1) / 2).movedim(-3, -1).numpy()
    return quantize(arr)


def save_png(path, image: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), mode="RGB").save(path, optimize=False)
    return path


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB")).astype(np.float32) / 255.0


def save_clip(directory, frames: np.ndarray, gif: bool = True) -> list[Path]:
    d = Path(directory)
    paths = [save_png(d / f"frame_{i:03d}.png", f) for i, f in enumerate(frames)]
    if gif:
        ims = [Image.fromarray(to_uint8(f), mode="RGB") for f in frames]
        ims[0].save(d / "preview.gif", save_all=True, append_images=ims[1:], duration=120, loop=0)
        paths.append(d / "preview.gif")
    return paths


def grid(rows: Sequence[Sequence[np.ndarray]], pad: int = 2) -> np.ndarray:
    """Tile equally sized images into one white-padded grid."""
    h, w = rows[0][0].shape[:2]
    ncol = max(len(r) for r in rows)
    out = np.ones((len(rows) * (h + pad) + pad, ncol * (w + pad) + pad, 3), np.float32)
    for i, r in enumerate(rows):
        for j, im in enumerate(r):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            out[y:y + h, x:x + w] = im
    return out


def crop_resize(image: np.ndarray, box, size: int) -> np.ndarray:
    """Crop a normalised (x, y, w, h) box and resize to ``size`` square."""
    H, W = image.shape[:2]
    x, y, w, h = box
    left, top = int(round(x * W)), int(round(y * H))
    right, bottom = max(left + 1, int(round((x + w) * W))), max(top + 1, int(round((y + h) * H)))
    im = Image.fromarray(to_uint8(image), mode="RGB").crop((left, top, right, bottom))
    im = im.resize((size, size), Image.Resampling.BILINEAR)
    return np.asarray(im).astype(np.float32) / 255.0
