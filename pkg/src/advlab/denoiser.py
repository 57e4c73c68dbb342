"""Multi-scale spatial/wavelet transformer denoiser.

At each scale the image is embedded twice: once directly (spatial stream) and
once as the upsampled sum of its Haar detail subbands (frequency stream).  The
two streams are fused by cross-attention, refined by a second transformer
stage, and the LL subband becomes the next (half-resolution) scale's input.
Scales are then merged coarse-to-fine by cross-attention and projected back to
image space as a residual on the input.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import functional as F
from .blocks import CrossAttention, TransformerStage
from .nn import Conv2d, Module
from .tensor import ShapeError, Tensor, as_tensor
from .wavelet import dwt2


class NonFiniteError(FloatingPointError):
    """A denoiser stage produced NaN or infinite activations."""


@dataclass
class DenoiserConfig:
    embed_dim: int = 48
    heads: int = 4
    scales: int = 3
    blocks_per_stage: int = 1
    gdfn_expansion: int = 2
    image_channels: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.embed_dim < 1 or self.heads < 1 or self.embed_dim % self.heads:
            raise ValueError(f"heads={self.heads} must divide embed_dim={self.embed_dim}")
        if self.scales not in (2, 3):
            raise ValueError(f"scales must be 2 or 3, got {self.scales}")
        if self.blocks_per_stage < 1 or self.gdfn_expansion < 1:
            raise ValueError("blocks_per_stage and gdfn_expansion must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class Denoiser(Module):
    def __init__(self, config: DenoiserConfig, zero_output: bool = True):
        self.config = config
        rng = np.random.default_rng(config.seed)
        C, h, r, d = config.embed_dim, config.heads, config.gdfn_expansion, config.blocks_per_stage
        img, S = config.image_channels, config.scales
        self.embed_spatial = [Conv2d(img, C, 3, rng) for _ in range(S)]
        self.embed_dwt = [Conv2d(img, C, 3, rng) for _ in range(S)]
        self.t1_spatial = [TransformerStage(C, h, r, d, rng) for _ in range(S)]
        self.t1_dwt = [TransformerStage(C, h, r, d, rng) for _ in range(S)]
        self.ca_within = [CrossAttention(C, h, rng) for _ in range(S)]
        self.t2 = [TransformerStage(C, h, r, d, rng) for _ in range(S)]
        self.ca_across = [CrossAttention(C, h, rng) for _ in range(S - 1)]
        self.output_projection = Conv2d(C, img, 3, rng)
        if zero_output:
            self.output_projection.weight.data[...] = 0.0

    def extract_scale_features(self, x_scale: Tensor, s: int) -> tuple[Tensor, Tensor, Tensor]:
        """Spatial features, detail-subband features and the LL image for scale ``s`` (0-based)."""
        p = dwt2(x_scale)
        spatial = self.t1_spatial[s](self.embed_spatial[s](x_scale))
        detail = p.lh + p.hl + p.hh
        freq = self.t1_dwt[s](self.embed_dwt[s](F.upsample2x(detail, "nearest")))
        return spatial, freq, p.ll

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        S = self.config.scales
        if x.ndim != 4 or x.shape[1] != self.config.image_channels:
            raise ShapeError(f"expected [B, {self.config.image_channels}, H, W], got {x.shape}")
        H, W = x.shape[-2:]
        unit = 2 ** S
        if H % unit or W % unit:
            raise ShapeError(f"{S}-scale denoiser needs H and W divisible by {unit}, got {H}x{W}")

        combined = []
        current = x
        for s in range(S):
            spatial, freq, current = self.extract_scale_features(current, s)
            _guard(spatial, f"scale {s + 1} spatial stream")
            _guard(freq, f"scale {s + 1} wavelet stream")
            fused = self.t2[s](self.ca_within[s](spatial, freq))
            _guard(fused, f"scale {s + 1} fusion")
            combined.append(fused)

        g = combined[-1]
        for s in range(S - 2, -1, -1):
            g = self.ca_across[s](combined[s], F.upsample2x(g, "nearest"))
            _guard(g, f"cross-scale fusion {s + 1}")
        residual = self.output_projection(g)
        _guard(residual, "output projection")
        # straight-through: with a masked gradient, one large early step can push
        # every pixel below 0, after which training has no gradient at all
        return F.clamp(x + residual, 0.0, 1.0, straight_through=True)


def _guard(t: Tensor, stage: str) -> None:
    if not np.isfinite(t.data).all():
        raise NonFiniteError(f"non-finite activation in {stage}")


def denoise(x, model: Denoiser) -> Tensor:
    return model(x)
