"""Single-level orthonormal Haar DWT on image batches, plus subband energy analysis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .functional import GeometryError, pad_bottom_right
from .tensor import Tensor, as_tensor, make_result, ShapeError

BANDS = ("ll", "lh", "hl", "hh")


@dataclass
class WaveletPyramid:
    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor
    basis: str = "haar"
    source_shape: tuple[int, int] | None = None

    def bands(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return self.ll, self.lh, self.hl, self.hh

    def energy(self) -> float:
        return float(sum((b.data ** 2).sum() for b in self.bands()))


def _analysis(xd: np.ndarray) -> np.ndarray:
    a = xd[..., 0::2, 0::2]
    b = xd[..., 0::2, 1::2]
    c = xd[..., 1::2, 0::2]
    d = xd[..., 1::2, 1::2]
    return 0.5 * np.stack([a + b + c + d, a - b + c - d, a + b - c - d, a - b - c + d])


def _synthesis(ll, lh, hl, hh) -> np.ndarray:
    *lead, h, w = ll.shape
    out = np.empty((*lead, 2 * h, 2 * w), dtype=ll.dtype)
    out[..., 0::2, 0::2] = 0.5 * (ll + lh + hl + hh)
    out[..., 0::2, 1::2] = 0.5 * (ll - lh + hl - hh)
    out[..., 1::2, 0::2] = 0.5 * (ll + lh - hl - hh)
    out[..., 1::2, 1::2] = 0.5 * (ll - lh - hl + hh)
    return out


def dwt2(x: Tensor) -> WaveletPyramid:
    """Level-1 Haar analysis over the last two axes of ``[B, C, H, W]``.

    Each 2x2 block (a, b / c, d) maps to ll=(a+b+c+d)/2, lh=(a-b+c-d)/2,
    hl=(a+b-c-d)/2, hh=(a-b-c+d)/2. H and W must be even; see
    :func:`dwt2_padded` for arbitrary sizes.
    """
    x = as_tensor(x)
    H, W = x.shape[-2:]
    if H % 2 or W % 2:
        raise GeometryError(f"dwt2 needs even height and width, got {H}x{W}")
    # The transform is orthonormal, so its adjoint is the synthesis map.
    stacked = make_result(_analysis(x.data), (x,), lambda g: (_synthesis(*g),))
    return WaveletPyramid(*(stacked[i] for i in range(4)), source_shape=(H, W))


def dwt2_padded(x: Tensor) -> WaveletPyramid:
    """Reflect-pad odd extents to even, then :func:`dwt2`; the original size is kept."""
    x = as_tensor(x)
    H, W = x.shape[-2:]
    if H % 2 or W % 2:
        x = pad_bottom_right(x, H % 2, W % 2)
    p = dwt2(x)
    p.source_shape = (H, W)
    return p


def idwt2(p: WaveletPyramid) -> Tensor:
    """Inverse of :func:`dwt2`, cropped back to ``p.source_shape``."""
    bands = [as_tensor(b) for b in p.bands()]
    shape = bands[0].shape
    if any(b.shape != shape for b in bands):
        raise ShapeError(f"inconsistent subband shapes {[b.shape for b in bands]}")
    out = make_result(
        _synthesis(*(b.data for b in bands)), tuple(bands), lambda g: tuple(_analysis(g))
    )
    h2, w2 = 2 * shape[-2], 2 * shape[-1]
    if p.source_shape is not None and tuple(p.source_shape) != (h2, w2):
        H, W = p.source_shape
        if H > h2 or W > w2 or H < h2 - 1 or W < w2 - 1:
            raise ShapeError(f"source shape {p.source_shape} inconsistent with subbands {shape}")
        out = out[..., :H, :W]
    return out


@dataclass(frozen=True)
class SubbandProfile:
    ll_fraction: float
    lh_fraction: float
    hl_fraction: float
    hh_fraction: float
    zero_energy: bool = False

    @property
    def detail_fraction(self) -> float:
        return self.lh_fraction + self.hl_fraction + self.hh_fraction

    def as_dict(self) -> dict[str, float]:
        return {
            "ll_fraction": self.ll_fraction,
            "lh_fraction": self.lh_fraction,
            "hl_fraction": self.hl_fraction,
            "hh_fraction": self.hh_fraction,
        }


def subband_energies(delta: np.ndarray) -> np.ndarray:
    """Per-image subband energies of a perturbation batch, shape [N, 4] (ll, lh, hl, hh)."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.ndim == 3:
        delta = delta[None]
    H, W = delta.shape[-2:]
    if H % 2 or W % 2:
        delta = pad_bottom_right(Tensor(delta), H % 2, W % 2).data
    coeffs = _analysis(delta)
    return (coeffs ** 2).reshape(4, delta.shape[0], -1).sum(axis=2).T


def subband_energy_profile(clean, attacked) -> SubbandProfile:
    """Share of the perturbation energy (attacked - clean) in each Haar subband.

    Energies are pooled over the whole batch. A zero perturbation yields all
    fractions 0 with ``zero_energy`` set.
    """
    c = clean.data if isinstance(clean, Tensor) else np.asarray(clean, dtype=np.float64)
    a = attacked.data if isinstance(attacked, Tensor) else np.asarray(attacked, dtype=np.float64)
    if c.shape != a.shape:
        raise ShapeError(f"clean {c.shape} and attacked {a.shape} differ")
    energies = subband_energies(a - c).sum(axis=0)
    total = energies.sum()
    if total == 0.0:
        return SubbandProfile(0.0, 0.0, 0.0, 0.0, zero_energy=True)
    return SubbandProfile(*(float(e / total) for e in energies))


def mean_subband_fractions(clean, attacked) -> SubbandProfile:
    """Per-image fractions averaged over the images that were actually perturbed."""
    c = np.asarray(getattr(clean, "data", clean), dtype=np.float64)
    a = np.asarray(getattr(attacked, "data", attacked), dtype=np.float64)
    if c.shape != a.shape:
        raise ShapeError(f"clean {c.shape} and attacked {a.shape} differ")
    energies = subband_energies(a - c)
    totals = energies.sum(axis=1)
    keep = totals > 0
    if not keep.any():
        return SubbandProfile(0.0, 0.0, 0.0, 0.0, zero_energy=True)
    fractions = (energies[keep] / totals[keep, None]).mean(axis=0)
    return SubbandProfile(*(float(f) for f in fractions))
