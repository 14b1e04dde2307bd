"""Patch quality scoring and top-K patch selection.

The quality of a square patch is a per-channel blend of a mean term that
peaks at mid-gray and a saturating texture term driven by the channel
standard deviation. Overly saturated or flat patches score near zero;
textured patches score near one. Selection walks a non-overlapping grid
and keeps the K best-scoring cells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ImageTooSmall
from .imagecore import PATCH_SIZES, Manipulation, PatchRef, RasterImage, image_stats

DEFAULT_ALPHA = 0.7
DEFAULT_BETA = 4.0
DEFAULT_GAMMA = math.log(0.01)


@dataclass(frozen=True)
class QualityParams:
    """Coefficients of the quality score; defaults are the production values."""

    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    gamma_q: float = DEFAULT_GAMMA

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.beta <= 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.gamma_q >= 0.0:
            raise ValueError(f"gamma_q must be negative, got {self.gamma_q}")


DEFAULT_PARAMS = QualityParams()


@dataclass(frozen=True)
class ScoredPatch:
    ref: PatchRef
    score: float


def quality_from_stats(stats, params: QualityParams = DEFAULT_PARAMS) -> float:
    """Quality score from per-channel (mean, stddev) statistics.

    Per channel c with normalized mean mu_c and stddev sigma_c:
    alpha*beta*(mu_c - mu_c^2) + (1 - alpha)*(1 - exp(gamma_q * sigma_c)),
    averaged over the three channels.
    """
    total = 0.0
    for mu, sigma in zip(stats.mean, stats.stddev):
        mean_term = params.alpha * params.beta * (mu - mu * mu)
        texture_term = (1.0 - params.alpha) * (1.0 - math.exp(params.gamma_q * sigma))
        total += mean_term + texture_term
    return total / 3.0


def quality(patch_pixels: RasterImage, params: QualityParams = DEFAULT_PARAMS) -> float:
    """Quality score of a square RGB patch."""
    if patch_pixels.width != patch_pixels.height:
        raise ValueError("quality() requires a square patch")
    return quality_from_stats(image_stats(patch_pixels), params)


def grid_refs(
    image: RasterImage,
    size: int,
    source_id: str = "",
    label: int = 0,
    manipulation: Manipulation = Manipulation.UNALTERED,
) -> list[PatchRef]:
    """Non-overlapping candidate grid (stride == size), raster order.

    Margins on the right/bottom that cannot fit a full patch are dropped.
    """
    if size not in PATCH_SIZES:
        raise ValueError(f"patch size must be one of {PATCH_SIZES}, got {size}")
    if image.width < size or image.height < size:
        raise ImageTooSmall(
            f"{image.width}x{image.height} image cannot fit a {size}x{size} patch"
        )
    refs = []
    for y0 in range(0, image.height - size + 1, size):
        for x0 in range(0, image.width - size + 1, size):
            refs.append(
                PatchRef(
                    source_id=source_id,
                    x0=x0,
                    y0=y0,
                    size=size,
                    label=label,
                    manipulation=manipulation,
                )
            )
    return refs


def select_top_patches(
    image: RasterImage,
    size: int = 256,
    k: int = 20,
    params: QualityParams = DEFAULT_PARAMS,
    source_id: str = "",
    label: int = 0,
    manipulation: Manipulation = Manipulation.UNALTERED,
) -> list[ScoredPatch]:
    """Score every grid cell and return the k best, descending by score.

    Ties break in raster order (top-left first) so output is deterministic.
    Returns fewer than k patches when the grid has fewer cells.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    refs = grid_refs(image, size, source_id=source_id, label=label, manipulation=manipulation)
    pixels = image.pixels
    scored = []
    for ref in refs:
        region = pixels[ref.y0 : ref.y0 + size, ref.x0 : ref.x0 + size]
        scored.append(ScoredPatch(ref=ref, score=quality(RasterImage(region), params)))
    # stable sort on -score keeps raster order among equal scores
    scored.sort(key=lambda sp: -sp.score)
    return scored[:k]
