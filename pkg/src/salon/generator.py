"""Generator backends.

A backend owns the synthesis weights (theta) and must be deterministic and
differentiable with respect to the per-layer latent matrix, the noise maps,
and its own weights.  ``ToyGenerator`` is a small bundled backend with the
same moving parts as a full-scale style-based generator: per-layer codes
modulate channels, per-layer noise maps inject stochastic detail, and the
weights themselves can be fine-tuned in the last optimization stage.

Adapter contract for external checkpoints
-----------------------------------------
Register a factory with :func:`register_backend`.  The factory receives the
config's backend options (including ``checkpoint``) and must return an object
exposing:

  - ``layer_count``, ``output_resolution``, ``noise_schema``, ``dtype``
  - ``synthesize(wplus, noise) -> Tensor (3, H, W)`` in [0, 1]
  - ``parameters()`` yielding the tunable weight tensors
  - ``map_latent(z)`` (optional) mapping standard-normal 512-vectors into W
  - ``clone()`` returning an independent frozen copy
"""

from __future__ import annotations

import copy
import math

import torch
from torch import nn

from .arrayio import load_arrays, save_arrays
from .errors import SchemaError, UnsupportedBackendError

LATENT_DIM = 512


def _upsample2(x: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.interpolate(
        x[None], scale_factor=2, mode="bilinear", align_corners=False
    )[0]


def _orthonormal(rows: int, cols: int, g: torch.Generator) -> torch.Tensor:
    """A rows x cols matrix with orthonormal columns (rows >= cols) or
    orthonormal rows (rows < cols)."""
    if rows >= cols:
        q, _ = torch.linalg.qr(torch.randn(rows, cols, generator=g, dtype=torch.float64))
        return q
    q, _ = torch.linalg.qr(torch.randn(cols, rows, generator=g, dtype=torch.float64))
    return q.T


class GeneratorBackend:
    """Base contract; see the module docstring for the required surface."""

    layer_count: int
    output_resolution: int
    noise_schema: list[int]
    dtype: torch.dtype

    def synthesize(self, wplus: torch.Tensor, noise: list[torch.Tensor]) -> torch.Tensor:
        raise NotImplementedError

    def map_latent(self, z: torch.Tensor) -> torch.Tensor:
        raise UnsupportedBackendError(
            f"{type(self).__name__} does not expose a latent mapping function"
        )

    def parameters(self):
        raise NotImplementedError

    def clone(self) -> "GeneratorBackend":
        return copy.deepcopy(self)

    def check_schema(self, wplus: torch.Tensor, noise: list[torch.Tensor]) -> None:
        if wplus.shape != (self.layer_count, LATENT_DIM):
            raise SchemaError(
                f"latent matrix shape {tuple(wplus.shape)} does not match "
                f"({self.layer_count}, {LATENT_DIM})"
            )
        if len(noise) != len(self.noise_schema):
            raise SchemaError(
                f"{len(noise)} noise maps given, schema has {len(self.noise_schema)}"
            )
        for i, (n, r) in enumerate(zip(noise, self.noise_schema)):
            if n.shape != (r, r):
                raise SchemaError(f"noise map {i} has shape {tuple(n.shape)}, expected ({r}, {r})")


class ToyGenerator(nn.Module, GeneratorBackend):
    """Deterministic differentiable toy backend.

    Starting from a learned constant 4x4 grid, each layer doubles the
    resolution until the output size is reached, modulates channels with an
    affine of its latent row, adds its noise map scaled by a learned
    coefficient, and squashes with tanh.  Every layer also projects its
    activations into an RGB skip accumulator (as skip-style generators do),
    so each latent row influences the output directly; the stacked style
    affine is orthonormal, which keeps latent recovery well conditioned.
    """

    def __init__(
        self,
        layer_count: int = 8,
        output_resolution: int = 64,
        channels: int = 32,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
        active_dims: int = 32,
        style_gain: float = 0.5,
    ):
        super().__init__()
        ups = math.log2(output_resolution / 4)
        if ups != int(ups) or ups < 0:
            raise SchemaError("output_resolution must be 4 * 2**k")
        if int(ups) > layer_count:
            raise SchemaError(
                f"{layer_count} layers cannot reach resolution {output_resolution} from 4"
            )
        if not 1 <= active_dims <= LATENT_DIM:
            raise SchemaError(f"active_dims must lie in [1, {LATENT_DIM}]")
        self.layer_count = layer_count
        self.output_resolution = output_resolution
        self.channels = channels
        self.seed = seed
        self.dtype = dtype
        self.active_dims = active_dims
        self.style_gain = style_gain

        res, schema = 4, []
        for _ in range(layer_count):
            if res < output_resolution:
                res *= 2
            schema.append(res)
        self.noise_schema = schema

        g = torch.Generator().manual_seed(seed)

        def rand(*shape, scale=1.0):
            return torch.randn(*shape, generator=g, dtype=torch.float64).to(dtype) * scale

        c = channels
        # The style readout is deliberately low-rank: image appearance lives
        # in the leading active_dims coordinates of W, which keeps desk-scale
        # latent recovery well posed. The stacked readout is orthonormal over
        # those coordinates.
        style_rows = layer_count * 2 * c
        stacked = torch.zeros(style_rows, LATENT_DIM, dtype=torch.float64)
        stacked[:, :active_dims] = _orthonormal(style_rows, active_dims, g)
        stacked = stacked * style_gain
        self.base = nn.Parameter(rand(c, 4, 4, scale=0.5))
        self.style_weight = nn.Parameter(stacked.reshape(layer_count, 2 * c, LATENT_DIM).to(dtype))
        self.style_bias = nn.Parameter(rand(layer_count, 2 * c, scale=0.1))
        # Gentle noise gain: noise adds stochastic texture without giving the
        # optimizer a high-bandwidth channel for encoding image content.
        self.noise_coeff = nn.Parameter(torch.full((layer_count,), 0.1, dtype=dtype))
        self.skip_weight = nn.Parameter(rand(layer_count, 3, c, scale=c ** -0.5 / layer_count))
        self.skip_bias = nn.Parameter(torch.zeros(3, dtype=dtype))
        # The mapping from z to W is fixed, never tuned.
        self.register_buffer("map_weight", rand(LATENT_DIM, LATENT_DIM, scale=LATENT_DIM ** -0.5))
        self.register_buffer("map_bias", rand(LATENT_DIM, scale=0.5))
        # Weights stay frozen until the tuning stage asks for gradients.
        self.requires_grad_(False)

    def map_latent(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != LATENT_DIM:
            raise SchemaError(f"mapping expects trailing dimension {LATENT_DIM}")
        return z.to(self.dtype) @ self.map_weight.T + self.map_bias

    def synthesize(self, wplus: torch.Tensor, noise: list[torch.Tensor]) -> torch.Tensor:
        self.check_schema(wplus, noise)
        c = self.channels
        x = self.base
        acc = self.base.new_zeros(3, 4, 4)
        for i in range(self.layer_count):
            if x.shape[-1] < self.output_resolution:
                x = _upsample2(x)
                acc = _upsample2(acc)
            style = self.style_weight[i] @ wplus[i] + self.style_bias[i]
            x = x * (1 + style[:c, None, None]) + style[c:, None, None]
            x = x + self.noise_coeff[i] * noise[i][None]
            x = torch.tanh(x)
            acc = acc + torch.einsum("oc,chw->ohw", self.skip_weight[i], x)
        return 0.5 * (torch.tanh(acc + self.skip_bias[:, None, None]) + 1)

    def clone(self) -> "ToyGenerator":
        return copy.deepcopy(self)

    def save_checkpoint(self, path) -> None:
        arrays = {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}
        arrays["_meta"] = torch.tensor(
            [
                self.layer_count,
                self.output_resolution,
                self.channels,
                self.seed,
                self.active_dims,
                self.style_gain,
            ],
            dtype=torch.float64,
        ).numpy()
        save_arrays(path, arrays)

    @classmethod
    def load_checkpoint(cls, path, dtype: torch.dtype = torch.float32) -> "ToyGenerator":
        arrays = load_arrays(path)
        meta = arrays.pop("_meta")
        gen = cls(
            layer_count=int(meta[0]),
            output_resolution=int(meta[1]),
            channels=int(meta[2]),
            seed=int(meta[3]),
            dtype=dtype,
            active_dims=int(meta[4]),
            style_gain=float(meta[5]),
        )
        state = {k: torch.from_numpy(v).to(dtype) for k, v in arrays.items()}
        gen.load_state_dict(state)
        return gen


_BACKEND_FACTORIES = {}


def register_backend(kind: str, factory) -> None:
    _BACKEND_FACTORIES[kind] = factory


def load_backend(kind: str, **options) -> GeneratorBackend:
    """Build a backend by kind. Options mirror the config's backend section."""
    if kind not in _BACKEND_FACTORIES:
        raise UnsupportedBackendError(
            f"unknown backend kind {kind!r}; registered: {sorted(_BACKEND_FACTORIES)}"
        )
    return _BACKEND_FACTORIES[kind](**options)


def _build_toy(
    checkpoint=None,
    layer_count: int = 8,
    resolution: int = 64,
    channels: int = 32,
    seed: int = 0,
    dtype: str = "float32",
    active_dims: int = 32,
    style_gain: float = 0.5,
) -> ToyGenerator:
    torch_dtype = {"float32": torch.float32, "float64": torch.float64}[dtype]
    if checkpoint:
        return ToyGenerator.load_checkpoint(checkpoint, dtype=torch_dtype)
    return ToyGenerator(
        layer_count=layer_count,
        output_resolution=resolution,
        channels=channels,
        seed=seed,
        dtype=torch_dtype,
        active_dims=active_dims,
        style_gain=style_gain,
    )


register_backend("toy", _build_toy)
