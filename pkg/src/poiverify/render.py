"""Synthetic signboard renderer.

Every glyph is a fixed 8x8 bitmap; a signboard is the glyph string blitted
onto a 32x128 canvas next to a per-POI logo and frame. Street-view captures
are re-renderings with horizontal shift, contrast scaling and pixel noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ParameterError
from .model import GLYPH_INDEX, GLYPHS, SIGN_HEIGHT, SIGN_WIDTH, SignboardImage, validate_name

BACKGROUND = 0.2
INK = 0.8

GLYPH_SIZE = 8
TEXT_X0 = 20
GLYPHS_PER_ROW = (SIGN_WIDTH - TEXT_X0) // GLYPH_SIZE  # 13
LOGO_X0 = 2
LOGO_SIZE = 2 * GLYPH_SIZE

_GLYPH_SEED = 0x5161_7E11


@lru_cache(maxsize=1)
def glyph_bitmaps() -> np.ndarray:
    """(64, 8, 8) boolean bitmaps, generated once from a fixed seed.

    Each glyph occupies the top-left 7x7 so adjacent glyphs keep a one-pixel
    gap. Candidates too close (Hamming < 10) to an accepted glyph are redrawn.
    """
    rng = np.random.default_rng(_GLYPH_SEED)
    accepted = []
    while len(accepted) < len(GLYPHS):
        cand = rng.random((7, 7)) < 0.45
        if cand.sum() < 14:
            continue
        if any(np.count_nonzero(cand ^ g) < 10 for g in accepted):
            continue
        accepted.append(cand)
    out = np.zeros((len(GLYPHS), GLYPH_SIZE, GLYPH_SIZE), dtype=bool)
    out[:, :7, :7] = np.stack(accepted)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=1)
def glyph_neighbours() -> np.ndarray:
    """Glyph indices sorted by bitmap Hamming distance (row i: nearest first, excluding i)."""
    bm = glyph_bitmaps().reshape(len(GLYPHS), -1)
    dist = (bm[:, None, :] != bm[None, :, :]).sum(axis=2).astype(np.float64)
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")[:, :-1]
    order.setflags(write=False)
    return order


@dataclass(frozen=True)
class SignStyle:
    """Per-POI decoration: logo glyph, frame thickness, text baseline offset."""

    logo: int = 0
    frame: int = 0
    v_offset: int = 0

    def __post_init__(self):
        if not 0 <= self.logo < len(GLYPHS):
            raise ParameterError("logo index out of range")
        if not 0 <= self.frame <= 2:
            raise ParameterError("frame thickness must be 0..2")
        if not -4 <= self.v_offset <= 4:
            raise ParameterError("v_offset must be in -4..4")

    @classmethod
    def sample(cls, rng: np.random.Generator) -> SignStyle:
        return cls(
            logo=int(rng.integers(len(GLYPHS))),
            frame=int(rng.integers(3)),
            v_offset=int(rng.integers(-4, 5)),
        )


@dataclass(frozen=True)
class NoiseParams:
    """Capture perturbations. All-zero values reproduce the canonical rendering."""

    pixel_sigma: float = 0.08
    max_shift: int = 4
    contrast_low: float = 0.7
    contrast_high: float = 1.3
    jitter_km: float = 0.25

    def __post_init__(self):
        if self.pixel_sigma < 0 or self.jitter_km < 0:
            raise ParameterError("noise magnitudes must be non-negative")
        if not 0 <= self.max_shift <= 4:
            raise ParameterError("max_shift must be in 0..4")
        if not 0 < self.contrast_low <= self.contrast_high:
            raise ParameterError("contrast range must satisfy 0 < low <= high")

    @classmethod
    def none(cls) -> NoiseParams:
        return cls(pixel_sigma=0.0, max_shift=0, contrast_low=1.0, contrast_high=1.0, jitter_km=0.0)

    @property
    def is_zero(self) -> bool:
        return (
            self.pixel_sigma == 0.0
            and self.max_shift == 0
            and self.contrast_low == 1.0
            and self.contrast_high == 1.0
        )


def canonical_canvas(name: str, style: SignStyle = SignStyle()) -> np.ndarray:
    """Float canvas of the noise-free signboard."""
    validate_name(name)
    bitmaps = glyph_bitmaps()
    canvas = np.full((SIGN_HEIGHT, SIGN_WIDTH), BACKGROUND)

    if style.frame:
        t = style.frame
        canvas[:t, :] = INK
        canvas[-t:, :] = INK
        canvas[:, :t] = INK
        canvas[:, -t:] = INK

    logo = np.kron(bitmaps[style.logo], np.ones((2, 2), dtype=bool))
    ly = (SIGN_HEIGHT - LOGO_SIZE) // 2
    canvas[ly:ly + LOGO_SIZE, LOGO_X0:LOGO_X0 + LOGO_SIZE][logo] = INK

    n_rows = -(-len(name) // GLYPHS_PER_ROW)
    y0 = (SIGN_HEIGHT - GLYPH_SIZE * n_rows) // 2
    if n_rows == 1:
        y0 += style.v_offset
    y0 = min(max(y0, 0), SIGN_HEIGHT - GLYPH_SIZE * n_rows)
    for k, ch in enumerate(name):
        row, col = divmod(k, GLYPHS_PER_ROW)
        y = y0 + row * GLYPH_SIZE
        x = TEXT_X0 + col * GLYPH_SIZE
        canvas[y:y + GLYPH_SIZE, x:x + GLYPH_SIZE][bitmaps[GLYPH_INDEX[ch]]] = INK
    return canvas


def render_canonical(name: str, style: SignStyle = SignStyle()) -> SignboardImage:
    return SignboardImage.from_pixels(canonical_canvas(name, style))


def perturb(img: SignboardImage, noise: NoiseParams, rng: np.random.Generator) -> SignboardImage:
    """Re-render ``img`` as a street-view capture: shift, contrast, pixel noise."""
    if noise.is_zero:
        return img
    px = img.pixels
    shift = int(rng.integers(-noise.max_shift, noise.max_shift + 1)) if noise.max_shift else 0
    if shift:
        shifted = np.full_like(px, BACKGROUND)
        if shift > 0:
            shifted[:, shift:] = px[:, :-shift]
        else:
            shifted[:, :shift] = px[:, -shift:]
        px = shifted
    c = float(rng.uniform(noise.contrast_low, noise.contrast_high))
    px = 0.5 + c * (px - 0.5)
    if noise.pixel_sigma > 0:
        px = px + rng.normal(0.0, noise.pixel_sigma, size=px.shape)
    return SignboardImage.from_pixels(np.clip(px, 0.0, 1.0))


def scale_contrast(img: SignboardImage, factor: float) -> SignboardImage:
    """Deterministic contrast scaling about mid-grey (no shift, no noise)."""
    return SignboardImage.from_pixels(np.clip(0.5 + factor * (img.pixels - 0.5), 0.0, 1.0))
