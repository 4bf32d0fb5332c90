"""Pixel/latent mask conversion, character strips, and prior-driven shrinking.

Pixel masks are uint8 arrays with values in {0, 255} (255 = edit region).
Latent masks keep fractional bilinear values; consumers binarize at 0.5.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .attention import LatentMask

_NARROW = 0.4
_MEDIUM = 0.8
_WIDE = 1.0
_EXTRA_WIDE = 1.3


def _default_width_table() -> Dict[str, float]:
    table: Dict[str, float] = {}
    for ch in "ABCDEFGHJKLNOPQRSTUVXYZ":
        table[ch] = _WIDE
    for ch in "abcdefghknopqrstuvxyz":
        table[ch] = _MEDIUM
    for ch in "023456789":
        table[ch] = _MEDIUM
    for ch in "Iilj1.":
        table[ch] = _NARROW
    for ch in "WMwm":
        table[ch] = _EXTRA_WIDE
    return table


@dataclasses.dataclass(frozen=True)
class CharWidthPriors:
    """Relative character widths used to shrink masks before re-rendering text.

    Wide glyphs (most capitals) count 1.0, narrow strokes 0.4, typical
    lowercase/digits 0.8 and the widest glyphs 1.3.  Unknown characters fall
    back to ``default_width``.
    """

    widths: Mapping[str, float]
    default_width: float = _MEDIUM

    def width(self, ch: str) -> float:
        return float(self.widths.get(ch, self.default_width))

    def text_width(self, text: str) -> float:
        return float(sum(self.width(ch) for ch in text))

    @classmethod
    def default(cls) -> "CharWidthPriors":
        return cls(widths=_default_width_table())

    @classmethod
    def from_file(cls, path: str) -> "CharWidthPriors":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        widths = {str(k): float(v) for k, v in raw.get("widths", {}).items()}
        if any(v <= 0 for v in widths.values()):
            raise ValueError("character widths must be positive")
        default = float(raw.get("default_width", _MEDIUM))
        if default <= 0:
            raise ValueError("default width must be positive")
        return cls(widths=widths, default_width=default)

    def to_file(self, path: str):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"widths": dict(self.widths), "default_width": self.default_width},
                      fh, indent=2, sort_keys=True)


def _check_pixel_mask(pixel_mask: np.ndarray):
    if pixel_mask.ndim != 2:
        raise ValueError(f"pixel mask must be 2D, got shape {pixel_mask.shape}")
    if pixel_mask.dtype != np.uint8:
        raise ValueError(f"pixel mask must be uint8, got {pixel_mask.dtype}")
    vals = np.unique(pixel_mask)
    if not np.isin(vals, (0, 255)).all():
        raise ValueError("pixel mask values must be exactly 0 or 255")


def to_latent_mask(pixel_mask: np.ndarray, latent_hw: Tuple[int, int],
                   threshold: float = 0.5) -> LatentMask:
    """Bilinear resample of a {0,255} pixel mask onto the latent grid.

    Interpolation is plain bilinear with centered sampling, so a 2x2
    checkerboard collapsed to one cell yields exactly 0.5.
    """
    _check_pixel_mask(pixel_mask)
    h, w = latent_hw
    if h <= 0 or w <= 0:
        raise ValueError(f"latent dims must be positive, got {latent_hw}")
    t = torch.from_numpy(pixel_mask.astype(np.float32) / 255.0)
    resized = F.interpolate(t[None, None], size=(h, w), mode="bilinear",
                            align_corners=False)[0, 0]
    return LatentMask(values=resized.clamp(0.0, 1.0), threshold=threshold)


def resample_mask(mask: LatentMask, spatial: Tuple[int, int]) -> LatentMask:
    """Resize a latent mask to another attention resolution (bilinear)."""
    if mask.spatial == tuple(spatial):
        return mask
    resized = F.interpolate(mask.values[None, None], size=tuple(spatial),
                            mode="bilinear", align_corners=False)[0, 0]
    return LatentMask(values=resized.clamp(0.0, 1.0), threshold=mask.threshold)


def _bbox(binary: torch.Tensor) -> Tuple[int, int, int, int]:
    """(y0, y1, x0, x1) inclusive bounding box of nonzero cells."""
    ys, xs = torch.nonzero(binary, as_tuple=True)
    return int(ys.min()), int(ys.max()), int(xs.min()), int(xs.max())


def split_character_masks(latent_mask: LatentMask, text: str) -> List[LatentMask]:
    """Divide the mask's bounding box into one vertical strip per character.

    Strips share the box width as evenly as possible (leftmost strips take the
    remainder cells) and each strip is intersected with the binarized mask, so
    the strips are disjoint and their union reproduces the mask exactly.
    """
    if not text:
        raise ValueError("cannot split a mask for empty text")
    binary = latent_mask.binary
    if not bool(binary.any()):
        raise ValueError("cannot split an empty mask")
    _, _, x0, x1 = _bbox(binary)
    box_w = x1 - x0 + 1
    n = len(text)
    base, rem = divmod(box_w, n)
    out: List[LatentMask] = []
    start = x0
    for k in range(n):
        width = base + (1 if k < rem else 0)
        strip = torch.zeros_like(binary)
        if width > 0:
            strip[:, start:start + width] = binary[:, start:start + width]
        out.append(LatentMask(values=strip, threshold=latent_mask.threshold))
        start += width
    return out


def shrink_mask(pixel_mask: np.ndarray, source_text: str, target_text: str,
                priors: Optional[CharWidthPriors] = None,
                latent_hw: Optional[Tuple[int, int]] = None,
                ) -> Tuple[np.ndarray, Optional[LatentMask]]:
    """Narrow a text mask when the replacement string is visually shorter.

    The width ratio is the prior width of the target text over the source
    text, clamped to 1 so masks never grow.  The box keeps its height and left
    edge; cells beyond the scaled width are dropped, so the result is always a
    subset of the input mask.  Returns the shrunk pixel mask and, when
    ``latent_hw`` is given, its latent resampling.
    """
    _check_pixel_mask(pixel_mask)
    if not source_text:
        raise ValueError("source text must be non-empty")
    if not target_text:
        raise ValueError("target text must be non-empty")
    if not pixel_mask.any():
        raise ValueError("cannot shrink an empty mask")
    priors = priors or CharWidthPriors.default()
    src_w = priors.text_width(source_text)
    if src_w <= 0:
        raise ValueError("source text has zero prior width")
    ratio = min(1.0, priors.text_width(target_text) / src_w)

    ys, xs = np.nonzero(pixel_mask)
    x0, x1 = int(xs.min()), int(xs.max())
    box_w = x1 - x0 + 1
    new_w = max(1, int(round(box_w * ratio)))
    shrunk = np.zeros_like(pixel_mask)
    shrunk[:, x0:x0 + new_w] = pixel_mask[:, x0:x0 + new_w]

    latent = to_latent_mask(shrunk, latent_hw) if latent_hw is not None else None
    return shrunk, latent


@dataclasses.dataclass
class MaskSet:
    """Every mask view one editing job needs, derived from a single pixel mask.

    ``char_masks`` partition the shrunk mask (the region text is actually
    rendered into); when no shrink applies, shrunk and full masks coincide.
    """

    pixel_mask: np.ndarray
    latent_mask: LatentMask
    shrunk_pixel: np.ndarray
    shrunk_latent: LatentMask
    char_masks: List[LatentMask]

    def __post_init__(self):
        full = self.latent_mask.binary
        shrunk = self.shrunk_latent.binary
        if bool((shrunk > full).any()):
            raise ValueError("shrunk latent mask must be a subset of the full mask")
        if self.char_masks:
            union = torch.zeros_like(shrunk)
            for cm in self.char_masks:
                b = cm.binary
                if bool(((union + b) > 1).any()):
                    raise ValueError("character masks must be pairwise disjoint")
                union = union + b
            if not torch.equal(union, shrunk):
                raise ValueError("character masks must partition the shrunk mask")


def build_mask_set(pixel_mask: np.ndarray, latent_hw: Tuple[int, int],
                   target_text: str, source_text: Optional[str] = None,
                   priors: Optional[CharWidthPriors] = None) -> MaskSet:
    """Assemble the mask family for one job.

    Shrinking only happens when the source text is known; insertion jobs pass
    ``source_text=None`` and keep the user's mask as drawn.
    """
    if not target_text:
        raise ValueError("target text must be non-empty")
    latent = to_latent_mask(pixel_mask, latent_hw)
    if latent.is_empty():
        raise ValueError("mask is empty at latent resolution")
    if source_text:
        shrunk_px, shrunk_lat = shrink_mask(pixel_mask, source_text, target_text,
                                            priors=priors, latent_hw=latent_hw)
        if shrunk_lat.is_empty():
            # Degenerate shrink (mask thinner than one latent cell): fall back
            # to the unshrunk mask rather than losing the edit region.
            shrunk_px, shrunk_lat = pixel_mask.copy(), latent
    else:
        shrunk_px, shrunk_lat = pixel_mask.copy(), latent
    chars = split_character_masks(shrunk_lat, target_text)
    return MaskSet(pixel_mask=pixel_mask, latent_mask=latent,
                   shrunk_pixel=shrunk_px, shrunk_latent=shrunk_lat,
                   char_masks=chars)
