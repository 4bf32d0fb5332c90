"""Guidance losses evaluated on attention maps during latent optimization.

Both losses stay inside torch autograd so their gradients reach the latent
through the denoiser forward that produced the maps.
"""

from __future__ import annotations

import dataclasses
from typing import Optional, Sequence, Tuple

import torch

from .attention import CROSS, SELF, AttentionMap, LatentMask, TokenLayout

# Probabilities are clamped away from {0, 1} before any log so a saturated
# attention entry cannot produce an infinite loss.
P_EPS = 1e-7


@dataclasses.dataclass(frozen=True)
class GuidanceWeights:
    content: float = 5.0
    style: float = 10.0
    focal_gamma: float = 2.0

    def __post_init__(self):
        if self.content < 0 or self.style < 0:
            raise ValueError("loss weights must be non-negative")
        if self.focal_gamma < 0:
            raise ValueError("focal gamma must be non-negative")


@dataclasses.dataclass
class StyleTarget:
    """Reference-mask distribution the masked self-attention rows are pulled
    toward: the mask normalized to unit mass, read as a probability over key
    positions."""

    distribution: torch.Tensor   # flat over key positions, sums to 1
    spatial: Tuple[int, int]

    def __post_init__(self):
        if self.distribution.dim() != 1:
            raise ValueError("style target distribution must be flat")
        total = float(self.distribution.sum())
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"style target must sum to 1, got {total}")
        if float(self.distribution.min()) < 0:
            raise ValueError("style target must be non-negative")


def style_target(reference_mask: LatentMask) -> StyleTarget:
    """Normalize a reference mask into a distribution over key positions."""
    flat = reference_mask.values.reshape(-1)
    total = flat.sum()
    if float(total) <= 0:
        raise ValueError("reference mask has zero mass")
    return StyleTarget(distribution=flat / total, spatial=reference_mask.spatial)


def focal_term(p: torch.Tensor, label: torch.Tensor, gamma: float) -> torch.Tensor:
    """Per-element focal cross-entropy (1 - p*l)^gamma * BCE(p, l).

    With gamma = 0 this is plain binary cross-entropy.  Note the modulating
    factor only discounts confident positives; for l = 0 it is exactly 1.
    """
    p = p.clamp(P_EPS, 1.0 - P_EPS)
    bce = -(label * torch.log(p) + (1.0 - label) * torch.log(1.0 - p))
    return (1.0 - p * label) ** gamma * bce


def content_loss(maps: Sequence[AttentionMap], layout: TokenLayout,
                 char_masks: Sequence[LatentMask], gamma: float = 2.0) -> torch.Tensor:
    """Focal loss binding each character token's attention to its strip.

    Per layer the loss sums over every character and every spatial position
    (strip cells are positives, everything else negatives); the layer sums are
    then averaged.
    """
    if not maps:
        raise ValueError("content loss needs at least one attention map")
    if len(char_masks) != len(layout.char_indices):
        raise ValueError(f"{len(char_masks)} character masks for "
                         f"{len(layout.char_indices)} character tokens")
    per_layer = []
    for amap in maps:
        if amap.kind != CROSS:
            raise ValueError("content loss runs on cross-attention maps")
        if amap.n_keys != layout.n_tokens:
            raise ValueError("map key count does not match the token layout")
        total = None
        for token_idx, cm in zip(layout.char_indices, char_masks):
            if cm.spatial != amap.spatial:
                raise ValueError(f"character mask spatial {cm.spatial} does not "
                                 f"match map spatial {amap.spatial}")
            p = amap.probs[:, token_idx]
            label = cm.binary.reshape(-1).to(p.dtype)
            term = focal_term(p, label, gamma).sum()
            total = term if total is None else total + term
        per_layer.append(total)
    return torch.stack(per_layer).mean()


def style_loss(maps: Sequence[AttentionMap], target_mask: LatentMask,
               target: StyleTarget) -> torch.Tensor:
    """KL(reference distribution || row) averaged over masked rows and layers.

    Rows are selected by the binarized target mask; each row of a
    self-attention map is itself a distribution over key positions, which for
    the grid canvas includes the reference half.
    """
    if not maps:
        raise ValueError("style loss needs at least one attention map")
    per_layer = []
    gt = target.distribution
    support = gt > 0
    gt_pos = gt[support]
    log_gt = torch.log(gt_pos)
    for amap in maps:
        if amap.kind != SELF:
            raise ValueError("style loss runs on self-attention maps")
        if target_mask.spatial != amap.spatial:
            raise ValueError(f"target mask spatial {target_mask.spatial} does not "
                             f"match map spatial {amap.spatial}")
        if gt.shape[0] != amap.n_keys:
            raise ValueError(f"style target over {gt.shape[0]} keys, map has {amap.n_keys}")
        rows = target_mask.flat_bool()
        if not bool(rows.any()):
            raise ValueError("style loss target mask selects no rows")
        s = amap.probs[rows][:, support].clamp(min=P_EPS)
        kl = (gt_pos * (log_gt - torch.log(s))).sum(dim=-1)
        per_layer.append(kl.mean())
    return torch.stack(per_layer).mean()


def total_guidance(content: Optional[torch.Tensor], style: Optional[torch.Tensor],
                   weights: GuidanceWeights) -> torch.Tensor:
    """Weighted sum of whichever loss terms are active."""
    if content is None and style is None:
        raise ValueError("at least one loss term is required")
    parts = []
    if content is not None:
        parts.append(weights.content * content)
    if style is not None:
        parts.append(weights.style * style)
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total
