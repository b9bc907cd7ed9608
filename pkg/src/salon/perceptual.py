"""Patch-local perceptual feature extraction.

The loss code only assumes the extractor contract: ``scales`` lists the
downsample factor of each feature map, ``features`` is deterministic, and a
feature value depends exclusively on input pixels inside the receptive
field declared by ``receptive_cover``.  ``PyramidExtractor`` is the bundled
implementation (a fixed-seed three-scale stack of small convolutions);
a real learned perceptual network can plug in behind the same surface.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage


class PyramidExtractor:
    """Fixed random conv features at factors 1, 2, 4 with tanh nonlinearity.

    Scale ``s`` averages over factor-sized blocks and then applies one 3x3
    convolution, so the feature at cell q covers input pixels in the block of
    q expanded by one feature cell, i.e. factor pixels, per side.
    """

    def __init__(self, channels: int = 8, factors: tuple[int, ...] = (1, 2, 4), seed: int = 17):
        self.channels = channels
        self.factors = tuple(factors)
        g = torch.Generator().manual_seed(seed)
        self.weights = [
            torch.randn(channels, 3, 3, 3, generator=g, dtype=torch.float64) / 3.0
            for _ in self.factors
        ]

    @property
    def scales(self) -> tuple[int, ...]:
        return self.factors

    def features(self, img: torch.Tensor) -> list[torch.Tensor]:
        """(3, H, W) image to a list of (C, H/f, W/f) feature grids."""
        return [f[0] for f in self._features_batched(img[None])]

    def features_pair(self, a: torch.Tensor, b: torch.Tensor):
        """Features of two same-shape images in one batched pass."""
        feats = self._features_batched(torch.stack([a, b]))
        return [f[0] for f in feats], [f[1] for f in feats]

    def _features_batched(self, x: torch.Tensor) -> list[torch.Tensor]:
        out = []
        for f, w in zip(self.factors, self.weights):
            level = F.avg_pool2d(x, f) if f > 1 else x
            feat = F.conv2d(level, w.to(x.dtype), padding=1)
            out.append(torch.tanh(feat))
        return out

    def downsample_mask(self, mask: torch.Tensor, factor: int) -> torch.Tensor:
        """Area-average then any-coverage threshold, onto the feature grid."""
        if factor == 1:
            return (mask > 0).to(mask.dtype)
        pooled = F.avg_pool2d(mask[None, None], factor)[0, 0]
        return (pooled > 0).to(mask.dtype)

    def receptive_cover(self, scale_index: int, feature_mask: np.ndarray) -> np.ndarray:
        """Input pixels that can influence any active feature cell at a scale."""
        f = self.factors[scale_index]
        block = np.kron(np.asarray(feature_mask, dtype=bool), np.ones((f, f), dtype=bool))
        return ndimage.binary_dilation(block, structure=np.ones((2 * f + 1, 2 * f + 1), dtype=bool))


def gaussian_kernel(sigma: float, radius: int) -> torch.Tensor:
    xs = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-(xs ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def gaussian_blur(img: torch.Tensor, sigma: float, radius: int) -> torch.Tensor:
    """Separable Gaussian blur with reflect padding; preserves constants."""
    k = gaussian_kernel(sigma, radius).to(img.dtype)
    c = img.shape[0]
    kh = k.view(1, 1, 1, -1).repeat(c, 1, 1, 1)
    kv = k.view(1, 1, -1, 1).repeat(c, 1, 1, 1)
    x = img[None]
    x = F.pad(x, (radius, radius, 0, 0), mode="reflect")
    x = F.conv2d(x, kh, groups=c)
    x = F.pad(x, (0, 0, radius, radius), mode="reflect")
    x = F.conv2d(x, kv, groups=c)
    return x[0]


def deprioritization_blur_params(resolution: int) -> tuple[float, int]:
    """Kernel tuned as 9x9 with sigma 3 on a 256 canvas, scaled with size."""
    sigma = 3.0 * resolution / 256.0
    radius = max(1, round(4.0 * resolution / 256.0))
    return sigma, radius


def blur_for_deprioritization(img: torch.Tensor, sigma: float | None = None, radius: int | None = None) -> torch.Tensor:
    """Blur used to soften terms whose guide content is known to be rough."""
    res = img.shape[-1]
    default_sigma, default_radius = deprioritization_blur_params(res)
    return gaussian_blur(img, sigma or default_sigma, radius or default_radius)
