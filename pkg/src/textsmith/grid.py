"""Side-by-side canvas for style transfer: [ target | reference ] in one latent.

Running the denoiser over the concatenated canvas lets self-attention rows in
the target half attend directly into the reference half.  The mask is zero over
the reference slot so that half is never repainted, and cropping the target
slot back out is an exact slice with no resampling.
"""

from __future__ import annotations

import dataclasses
from typing import Tuple, Union

import numpy as np
import torch

from .attention import LatentMask


@dataclasses.dataclass(frozen=True)
class Slot:
    """Axis-aligned rectangle, origin top-left, sizes in grid cells."""

    x0: int
    y0: int
    width: int
    height: int

    def scaled(self, factor: int) -> "Slot":
        if factor <= 0:
            raise ValueError(f"scale factor must be positive, got {factor}")
        return Slot(self.x0 * factor, self.y0 * factor,
                    self.width * factor, self.height * factor)


@dataclasses.dataclass
class GridCanvas:
    masked_latent: torch.Tensor   # (c, h, 2w): [masked target | reference]
    latent: torch.Tensor          # (c, h, 2w): initial noise expanded to grid size
    latent_mask: LatentMask       # (h, 2w): [shrunk mask | 0]
    target_slot: Slot
    reference_slot: Slot


def assemble_grid(removed_latent: torch.Tensor, reference_latent: torch.Tensor,
                  shrunk_mask: LatentMask, noise_latent: torch.Tensor) -> GridCanvas:
    """Build the 1x2 canvas from per-image latents.

    The target half carries the removed-image latent with the (binarized)
    shrunk-mask region zeroed; the reference half carries the reference latent
    untouched.  The provided Gaussian latent is tiled across both halves to
    form the grid-sized initial noise.
    """
    if removed_latent.dim() != 3:
        raise ValueError("latents must be (c, h, w) tensors")
    if removed_latent.shape != reference_latent.shape:
        raise ValueError(f"latent shapes differ: {tuple(removed_latent.shape)} "
                         f"vs {tuple(reference_latent.shape)}")
    if noise_latent.shape != removed_latent.shape:
        raise ValueError("noise latent must match the image latent shape")
    c, h, w = removed_latent.shape
    if shrunk_mask.spatial != (h, w):
        raise ValueError(f"mask spatial {shrunk_mask.spatial} does not match latent ({h}, {w})")

    keep = 1.0 - shrunk_mask.binary
    masked_half = removed_latent * keep.unsqueeze(0)
    masked_latent = torch.cat([masked_half, reference_latent], dim=-1)
    grid_noise = torch.cat([noise_latent, noise_latent], dim=-1)
    grid_mask = LatentMask(
        values=torch.cat([shrunk_mask.values,
                          torch.zeros_like(shrunk_mask.values)], dim=-1),
        threshold=shrunk_mask.threshold)
    return GridCanvas(
        masked_latent=masked_latent,
        latent=grid_noise,
        latent_mask=grid_mask,
        target_slot=Slot(0, 0, w, h),
        reference_slot=Slot(w, 0, w, h),
    )


def embed_in_grid(values: torch.Tensor, slot: Slot, grid_hw: Tuple[int, int]) -> torch.Tensor:
    """Place a (h, w) field into a zeroed grid-sized canvas at ``slot``."""
    gh, gw = grid_hw
    if values.shape != (slot.height, slot.width):
        raise ValueError(f"field shape {tuple(values.shape)} does not fit slot "
                         f"{slot.width}x{slot.height}")
    canvas = torch.zeros(gh, gw, dtype=values.dtype)
    canvas[slot.y0:slot.y0 + slot.height, slot.x0:slot.x0 + slot.width] = values
    return canvas


def crop_grid_result(grid_image: Union[np.ndarray, torch.Tensor], slot: Slot):
    """Exact sub-image copy of ``slot`` (no resampling).

    Accepts (H, W) or (H, W, C) arrays and (C, H, W) tensors.
    """
    if isinstance(grid_image, torch.Tensor):
        if grid_image.dim() == 3:
            h, w = grid_image.shape[1], grid_image.shape[2]
        elif grid_image.dim() == 2:
            h, w = grid_image.shape
        else:
            raise ValueError("expected 2D or 3D grid tensor")
        _check_slot_bounds(slot, h, w)
        if grid_image.dim() == 3:
            return grid_image[:, slot.y0:slot.y0 + slot.height,
                              slot.x0:slot.x0 + slot.width].clone()
        return grid_image[slot.y0:slot.y0 + slot.height,
                          slot.x0:slot.x0 + slot.width].clone()

    arr = np.asarray(grid_image)
    if arr.ndim not in (2, 3):
        raise ValueError("expected 2D or 3D grid image")
    h, w = arr.shape[0], arr.shape[1]
    _check_slot_bounds(slot, h, w)
    return arr[slot.y0:slot.y0 + slot.height, slot.x0:slot.x0 + slot.width].copy()


def _check_slot_bounds(slot: Slot, h: int, w: int):
    if slot.x0 < 0 or slot.y0 < 0 or slot.width <= 0 or slot.height <= 0 \
            or slot.x0 + slot.width > w or slot.y0 + slot.height > h:
        raise ValueError(f"slot {slot} outside grid {h}x{w}")
