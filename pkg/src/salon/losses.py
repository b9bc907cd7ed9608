"""The optimization losses.

All loss functions accept torch tensors ((3, H, W) images, (H, W) masks) or
numpy arrays, are differentiable through their tensor inputs, return scalar
tensors, and are zero on identical inputs.  The masked perceptual loss uses
two masking steps: RGB pre-masking zeroes both images inside the
region-of-no-interest so patch-based features ignore it exactly, and the
region-of-interest mask then selects feature cells after extraction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F

from .errors import FallbackWarning, SchemaError
from .generator import GeneratorBackend
from .latent import replicate, zero_noise

GLOBAL_LOSS_RESOLUTION = 32
PTI_PERCEPTUAL_FACTOR = 2.0


def as_image(x, dtype=None) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        if x.ndim == 3 and x.shape[-1] == 3:
            x = torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))
        else:
            x = torch.from_numpy(np.ascontiguousarray(x))
    return x.to(dtype) if dtype is not None else x


def as_mask(m, dtype) -> torch.Tensor:
    if isinstance(m, np.ndarray):
        m = torch.from_numpy(m.astype(np.float64))
    return m.to(dtype)


@dataclass(frozen=True)
class LossWeights:
    """Balancing weights of the objective, one set per optimization stage."""

    lambda_p_f: float
    lambda_p_h: float
    lambda_p_bg: float
    lambda_g: float
    lambda_i: float
    lambda_eps: float
    lambda_s: float
    roi_emphasis: float  # extra factor on terms whose guide holds original pixels

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be nonnegative")

    @classmethod
    def stage1(cls) -> "LossWeights":
        return cls(2.0, 1.0, 0.66, 2.0, 4.0, 1e5, 3.0, roi_emphasis=6.0)

    @classmethod
    def stage2(cls) -> "LossWeights":
        return cls(1.0, 2.0, 1.0, 2.0, 4.0, 1e5, 2.0, roi_emphasis=4.0)


def roi_emphasis_for(weights: LossWeights, viewpoint: str, term: str) -> float:
    """The face and background terms carry original pixels in the face view,
    the hair term in the hair view; those get the emphasis factor."""
    if viewpoint == "face" and term in ("f", "bg"):
        return weights.roi_emphasis
    if viewpoint == "hair" and term == "h":
        return weights.roi_emphasis
    return 1.0


def masked_perceptual(output, guide, m_roi, m_roni, extractor, weight: float = 1.0, blur=None) -> torch.Tensor:
    """Perceptual distance restricted to a region of interest.

    Both images are zeroed inside ``m_roni`` before feature extraction, so
    any change confined to that region leaves the value bit-identical.  The
    per-cell squared feature differences are then gated by ``m_roi``
    downsampled to each feature grid, averaged spatially, and summed over
    scales.
    """
    output = as_image(output)
    guide = as_image(guide, output.dtype)
    m_roi = as_mask(m_roi, output.dtype)
    keep = 1.0 - as_mask(m_roni, output.dtype)

    masked_out = output * keep
    masked_guide = guide * keep
    if blur is not None:
        masked_out = blur(masked_out)
        masked_guide = blur(masked_guide)

    total = output.new_zeros(())
    if hasattr(extractor, "features_pair"):
        feats_out, feats_guide = extractor.features_pair(masked_out, masked_guide)
    else:
        feats_out = extractor.features(masked_out)
        feats_guide = extractor.features(masked_guide)
    for factor, fo, fg in zip(extractor.scales, feats_out, feats_guide):
        gate = extractor.downsample_mask(m_roi, factor)
        diff = ((fo - fg) ** 2).mean(dim=0)
        total = total + (diff * gate).mean()
    return weight * total


def global_mse32(output, guide, mask=None) -> torch.Tensor:
    """Mean squared error on area-downsampled images, where visible seams in
    the guide become imperceptible.  With a mask, cells are weighted by the
    mask's area coverage."""
    output = as_image(output)
    guide = as_image(guide, output.dtype)
    r = GLOBAL_LOSS_RESOLUTION
    down_out = F.adaptive_avg_pool2d(output[None], r)[0]
    down_guide = F.adaptive_avg_pool2d(guide[None], r)[0]
    sq = (down_out - down_guide) ** 2
    if mask is None:
        return sq.mean()
    weight = F.adaptive_avg_pool2d(as_mask(mask, output.dtype)[None, None], r)[0, 0]
    return (sq * weight).mean()


def initial_value_loss(wplus: torch.Tensor, w0: torch.Tensor) -> torch.Tensor:
    """Squared distance of every layer's code from its anchor."""
    if wplus.ndim != 2 or wplus.shape[1] != w0.shape[0]:
        raise SchemaError(f"layer codes {tuple(wplus.shape)} do not match anchor {tuple(w0.shape)}")
    return ((wplus - w0[None]) ** 2).sum()


def latent_similarity(w_face: torch.Tensor, w_hair: torch.Tensor) -> torch.Tensor:
    if w_face.shape != w_hair.shape:
        raise SchemaError(f"latent shapes differ: {tuple(w_face.shape)} vs {tuple(w_hair.shape)}")
    return ((w_face - w_hair) ** 2).sum()


def _shift_h(x: torch.Tensor) -> torch.Tensor:
    return torch.roll(x, shifts=1, dims=-1)


def _shift_v(x: torch.Tensor) -> torch.Tensor:
    return torch.roll(x, shifts=1, dims=-2)


def noise_regularization(noise_maps: list[torch.Tensor]) -> torch.Tensor:
    """Normalized spatial autocorrelation of each noise map, accumulated over
    a 2x2 average-pooled pyramid down to 8x8, with wrap-around shifts."""
    if not noise_maps:
        raise ValueError("need at least one noise map")
    total = noise_maps[0].new_zeros(())
    for n in noise_maps:
        if min(n.shape) < 8:
            raise ValueError(f"noise map {tuple(n.shape)} is smaller than 8x8")
        var = n.var(unbiased=False)
        if float(var.detach()) == 0.0:
            warnings.warn("zero-variance noise map contributes 0", FallbackWarning)
            continue
        x = ((n - n.mean()) / torch.sqrt(var))[None, None]
        while True:
            total = total + (x * _shift_h(x)).mean() ** 2
            total = total + (x * _shift_v(x)).mean() ** 2
            if min(x.shape[-2:]) <= 8:
                break
            x = F.avg_pool2d(x, 2)
    return total


def pti_loss(o_tune_face, o_tune_hair, guides, m_raw_face, m_raw_hair, extractor) -> torch.Tensor:
    """Weight-tuning reconstruction loss: inside the raw-copy mask a doubled
    perceptual term (pre-mask and feature gate both the raw mask), outside it
    the downsampled MSE, summed over the two viewpoints."""
    o_tune_face = as_image(o_tune_face)
    total = o_tune_face.new_zeros(())
    pairs = (
        (o_tune_face, guides.guide_face, m_raw_face),
        (as_image(o_tune_hair, o_tune_face.dtype), guides.guide_hair, m_raw_hair),
    )
    for out, guide, m_raw in pairs:
        guide = as_image(guide, out.dtype)
        m = as_mask(m_raw, out.dtype)
        total = total + masked_perceptual(
            out, guide, m_roi=m, m_roni=1.0 - m, extractor=extractor, weight=PTI_PERCEPTUAL_FACTOR
        )
        total = total + global_mse32(out, guide, mask=1.0 - m)
    return total


def sample_probe_latent(backend: GeneratorBackend, w_opt: torch.Tensor, alpha: float, seed: int) -> torch.Tensor:
    """A latent at distance exactly ``alpha`` from the pivot, in the mapped
    direction of a fresh standard-normal sample.  Resamples in the
    probability-zero event that the sample coincides with the pivot."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    g = torch.Generator().manual_seed(seed)
    w_opt = w_opt.detach()
    while True:
        z = torch.randn(w_opt.shape[0], generator=g, dtype=torch.float64).to(w_opt.dtype)
        w_z = backend.map_latent(z)
        delta = w_z - w_opt
        norm = torch.linalg.vector_norm(delta)
        if float(norm) > 0:
            break
    return w_opt + alpha * delta / norm


def pti_regularizer(
    backend_tuned: GeneratorBackend,
    backend_frozen: GeneratorBackend,
    w_opt: torch.Tensor,
    alpha: float,
    seed: int,
    extractor=None,
) -> torch.Tensor:
    """Locality regularizer for weight tuning: render a latent at distance
    ``alpha`` from the pivot with both the frozen and the tuned weights and
    penalize their perceptual plus MSE discrepancy."""
    w_r = sample_probe_latent(backend_frozen, w_opt, alpha, seed)

    wplus = replicate(w_r, backend_frozen.layer_count)
    noise = zero_noise(backend_frozen)
    frozen_img = backend_frozen.synthesize(wplus, noise).detach()
    tuned_img = backend_tuned.synthesize(wplus, [n.to(backend_tuned.dtype) for n in noise])

    mse = ((frozen_img - tuned_img) ** 2).mean()
    if extractor is None:
        return mse
    ones = torch.ones(frozen_img.shape[-2:], dtype=frozen_img.dtype)
    per = masked_perceptual(tuned_img, frozen_img, m_roi=ones, m_roni=torch.zeros_like(ones), extractor=extractor)
    return per + mse


@dataclass
class LossTerms:
    """One viewpoint's raw term values (emphasis already applied to the
    perceptual entries)."""

    per_f: torch.Tensor | float = 0.0
    per_h: torch.Tensor | float = 0.0
    per_bg: torch.Tensor | float = 0.0
    global_mse: torch.Tensor | float = 0.0
    initial: torch.Tensor | float = 0.0
    noise: torch.Tensor | float = 0.0
    similarity: torch.Tensor | float = 0.0


def objective(terms: LossTerms, weights: LossWeights):
    """The weighted sum defining one viewpoint's objective."""
    return (
        weights.lambda_p_f * terms.per_f
        + weights.lambda_p_h * terms.per_h
        + weights.lambda_p_bg * terms.per_bg
        + weights.lambda_g * terms.global_mse
        + weights.lambda_i * terms.initial
        + weights.lambda_eps * terms.noise
        + weights.lambda_s * terms.similarity
    )
