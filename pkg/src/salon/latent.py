"""Latent-code helpers: validation, replication, mean-latent estimation,
noise-map creation, and the optimizer's learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import SchemaError
from .generator import LATENT_DIM, GeneratorBackend


def validate_w(w: torch.Tensor) -> torch.Tensor:
    if w.shape != (LATENT_DIM,):
        raise SchemaError(f"latent code must have shape ({LATENT_DIM},), got {tuple(w.shape)}")
    if not torch.isfinite(w).all():
        raise SchemaError("latent code contains non-finite entries")
    return w


def validate_wplus(wplus: torch.Tensor, layer_count: int) -> torch.Tensor:
    if wplus.shape != (layer_count, LATENT_DIM):
        raise SchemaError(
            f"per-layer latent must have shape ({layer_count}, {LATENT_DIM}), got {tuple(wplus.shape)}"
        )
    if not torch.isfinite(wplus).all():
        raise SchemaError("per-layer latent contains non-finite entries")
    return wplus


def replicate(w: torch.Tensor, layer_count: int) -> torch.Tensor:
    """Broadcast one 512-code to every generator layer."""
    return validate_w(w).unsqueeze(0).repeat(layer_count, 1)


def synthesize(backend: GeneratorBackend, wplus: torch.Tensor, noise: list[torch.Tensor]) -> torch.Tensor:
    """Render an RGB image; differentiable w.r.t. wplus, noise, and weights."""
    return backend.synthesize(wplus, noise)


def estimate_mean_latent(backend: GeneratorBackend, sample_count: int, seed: int) -> torch.Tensor:
    """Arithmetic mean of ``sample_count`` mapped standard-normal codes."""
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(sample_count, LATENT_DIM, generator=g, dtype=torch.float64)
    w = backend.map_latent(z.to(backend.dtype))
    return w.mean(dim=0).detach()


def random_noise(backend: GeneratorBackend, generator: torch.Generator) -> list[torch.Tensor]:
    """Fresh standard-normal noise maps matching the backend schema."""
    return [
        torch.randn(r, r, generator=generator, dtype=torch.float64).to(backend.dtype)
        for r in backend.noise_schema
    ]


def zero_noise(backend: GeneratorBackend) -> list[torch.Tensor]:
    return [torch.zeros(r, r, dtype=backend.dtype) for r in backend.noise_schema]


def renormalize_noise_(noise: list[torch.Tensor]) -> None:
    """Project noise maps to zero mean and unit RMS, in place.

    Utility for callers that want classical unit-variance noise inputs;
    the optimization stages leave noise amplitude to the regularizer, which
    shrinks maps that try to encode image content.
    """
    with torch.no_grad():
        for n in noise:
            n -= n.mean()
            power = n.square().mean()
            if float(power) > 0:
                n *= power.rsqrt()


@dataclass(frozen=True)
class LrSchedule:
    """Linear warm-up, flat middle, cosine ramp-down over the last stretch."""

    total_iters: int
    peak: float = 0.1
    ramp_up_frac: float = 0.05
    ramp_down_frac: float = 0.25

    def __post_init__(self):
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")
        if self.ramp_up_frac < 0 or self.ramp_down_frac < 0:
            raise ValueError("ramp fractions must be nonnegative")
        if self.ramp_up_frac + self.ramp_down_frac > 1:
            raise ValueError("ramp fractions must sum to at most 1")


def lr_at(schedule: LrSchedule, iteration: int) -> float:
    """Learning rate at one iteration of the schedule.

    Ramps linearly from 0 to peak over the first ramp_up_frac of iterations,
    holds the peak, then follows peak * 0.5 * (1 + cos(pi * t)) with t going
    0 to 1 across the final ramp_down_frac window.
    """
    total = schedule.total_iters
    if not 0 <= iteration < total:
        raise ValueError(f"iteration {iteration} outside [0, {total})")
    up = int(round(schedule.ramp_up_frac * total))
    down = int(round(schedule.ramp_down_frac * total))
    if up > 0 and iteration <= up:
        return schedule.peak * iteration / up
    down_start = total - down
    if down > 0 and iteration >= down_start:
        t = (iteration - down_start) / down
        return schedule.peak * 0.5 * (1.0 + math.cos(math.pi * t))
    return schedule.peak
