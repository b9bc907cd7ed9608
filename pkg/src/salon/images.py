"""Image containers and file I/O.

Working convention: RGB images are float64 numpy arrays of shape (H, W, 3)
with values in [0, 1]; binary masks are bool arrays of shape (H, W).  The
optimization code uses torch tensors of shape (3, H, W); ``to_tensor`` and
``from_tensor`` convert between the two worlds.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import InputError


def load_image(path) -> np.ndarray:
    """Load an RGB PNG as a float64 (H, W, 3) array in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"image file not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(img: np.ndarray, path) -> None:
    """Write a float [0, 1] image as an 8-bit RGB PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def save_mask(mask: np.ndarray, path) -> None:
    """Write a binary mask as an 8-bit grayscale PNG (0 or 255)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.where(mask.astype(bool), 255, 0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def load_mask(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"mask file not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr > 127


def to_tensor(img: np.ndarray, dtype=torch.float64) -> torch.Tensor:
    """(H, W, 3) numpy image to a (3, H, W) tensor."""
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).to(dtype)


def from_tensor(img: torch.Tensor) -> np.ndarray:
    """(3, H, W) tensor to a (H, W, 3) float64 numpy image."""
    return img.detach().cpu().numpy().transpose(1, 2, 0).astype(np.float64)


def mask_tensor(mask: np.ndarray, dtype=torch.float64) -> torch.Tensor:
    """Binary (H, W) mask to a float tensor of the same shape."""
    return torch.from_numpy(mask.astype(np.float64)).to(dtype)
