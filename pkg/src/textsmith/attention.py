"""Attention-map containers and the row-level edits applied inside the denoiser.

All maps are post-softmax probabilities with one row per spatial query position.
The edit operations never mutate their input; they return a new map so the same
map can feed several consumers (losses, snapshots) inside one denoiser step.
"""

from __future__ import annotations

import dataclasses
import math
from typing import List, Optional, Sequence, Tuple

import torch

ROW_SUM_TOL = 1e-6

SELF = "self"
CROSS = "cross"


@dataclasses.dataclass(frozen=True)
class TokenLayout:
    """Index bookkeeping for the prompt token sequence.

    The sequence is [seq_start, seq_end][text_start, c_1 .. c_N, text_end,
    pad ...].  Column edits and the per-character losses address tokens through
    this table instead of hard-coded offsets.
    """

    n_tokens: int
    char_indices: Tuple[int, ...]
    idx_seq_start: int = 0
    idx_seq_end: int = 1
    idx_text_start: int = 2

    def __post_init__(self):
        if self.n_tokens < 4 + len(self.char_indices):
            raise ValueError(
                f"token table of {self.n_tokens} too small for "
                f"{len(self.char_indices)} characters"
            )
        expected = tuple(range(self.idx_text_start + 1,
                               self.idx_text_start + 1 + len(self.char_indices)))
        if self.char_indices != expected:
            raise ValueError(f"character tokens must be contiguous, got {self.char_indices}")

    @property
    def idx_text_end(self) -> int:
        return self.idx_text_start + 1 + len(self.char_indices)

    @classmethod
    def for_text(cls, text: str, n_tokens: int) -> "TokenLayout":
        chars = tuple(range(3, 3 + len(text)))
        return cls(n_tokens=n_tokens, char_indices=chars)


@dataclasses.dataclass
class LatentMask:
    """Fractional mask over the latent grid, values in [0, 1].

    Bilinear resampling from pixel space leaves fractional edges, so every
    consumer that needs a hard region goes through ``binary`` which thresholds
    at ``threshold`` (>= keeps a cell).
    """

    values: torch.Tensor
    threshold: float = 0.5

    def __post_init__(self):
        if self.values.dim() != 2:
            raise ValueError(f"latent mask must be 2D, got shape {tuple(self.values.shape)}")
        if not (0.0 < self.threshold < 1.0):
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        lo, hi = float(self.values.min()), float(self.values.max())
        if lo < -1e-6 or hi > 1.0 + 1e-6:
            raise ValueError(f"latent mask values outside [0, 1]: min={lo}, max={hi}")

    @property
    def spatial(self) -> Tuple[int, int]:
        return (int(self.values.shape[0]), int(self.values.shape[1]))

    @property
    def binary(self) -> torch.Tensor:
        return (self.values >= self.threshold).to(self.values.dtype)

    def flat_bool(self) -> torch.Tensor:
        """Row selector over flattened (row-major) spatial positions."""
        return (self.values >= self.threshold).reshape(-1)

    def is_empty(self) -> bool:
        return not bool(self.flat_bool().any())


@dataclasses.dataclass
class AttentionMap:
    """One attention layer's probabilities, shape (h*w, n).

    ``kind`` is "self" (keys are the same spatial positions, n == h*w) or
    "cross" (keys are prompt tokens).  Rows sum to 1 within ROW_SUM_TOL unless
    validation is disabled, which tests use for finite-difference probes.
    """

    probs: torch.Tensor
    kind: str
    spatial: Tuple[int, int]
    validate: bool = True

    def __post_init__(self):
        if self.kind not in (SELF, CROSS):
            raise ValueError(f"unknown attention kind {self.kind!r}")
        if self.probs.dim() != 2:
            raise ValueError(f"attention map must be 2D, got shape {tuple(self.probs.shape)}")
        h, w = self.spatial
        if h * w != self.probs.shape[0]:
            raise ValueError(f"spatial {self.spatial} inconsistent with {self.probs.shape[0]} rows")
        if self.kind == SELF and self.probs.shape[1] != self.probs.shape[0]:
            raise ValueError("self-attention map must be square")
        if self.validate:
            _check_rows_stochastic(self.probs)

    @property
    def n_keys(self) -> int:
        return int(self.probs.shape[1])

    def replaced(self, probs: torch.Tensor, validate: bool = True) -> "AttentionMap":
        return AttentionMap(probs=probs, kind=self.kind, spatial=self.spatial, validate=validate)


def _check_rows_stochastic(probs: torch.Tensor):
    probs = probs.detach()
    if float(probs.min()) < -ROW_SUM_TOL:
        raise ValueError("attention probabilities must be non-negative")
    sums = probs.sum(dim=-1)
    worst = float((sums - 1.0).abs().max())
    if worst > ROW_SUM_TOL * max(1, probs.shape[1]) * 4:
        raise ValueError(f"attention rows must sum to 1, worst deviation {worst:.3e}")


def attention_probabilities(query: torch.Tensor, key: torch.Tensor,
                            kind: str, spatial: Tuple[int, int]) -> AttentionMap:
    """Scaled dot-product attention probabilities softmax(Q K^T / sqrt(d))."""
    if query.dim() != 2 or key.dim() != 2:
        raise ValueError("query and key must be 2D (positions x dim, keys x dim)")
    if query.shape[-1] != key.shape[-1]:
        raise ValueError(f"query dim {query.shape[-1]} != key dim {key.shape[-1]}")
    scores = query @ key.transpose(0, 1) / math.sqrt(query.shape[-1])
    probs = torch.softmax(scores, dim=-1)
    return AttentionMap(probs=probs, kind=kind, spatial=spatial)


def _require_mask_alignment(amap: AttentionMap, mask: LatentMask):
    if mask.spatial != amap.spatial:
        raise ValueError(f"mask spatial {mask.spatial} does not match map spatial {amap.spatial}")


def invert_self_attention(amap: AttentionMap, mask: LatentMask,
                          renormalize: bool = True) -> AttentionMap:
    """Flip attention inside the masked rows so high-response keys become low.

    For each masked row the values are reflected around (max+min)/2 and then,
    with ``renormalize`` (the default), pushed back through a softmax so the
    row stays a distribution.  Rows outside the mask are returned bit-identical.
    """
    if amap.kind != SELF:
        raise ValueError("inversion is defined for self-attention maps only")
    _require_mask_alignment(amap, mask)
    rows = mask.flat_bool()
    out = amap.probs.clone()
    if bool(rows.any()):
        sub = amap.probs[rows]
        hi = sub.max(dim=-1, keepdim=True).values
        lo = sub.min(dim=-1, keepdim=True).values
        flipped = hi + lo - sub
        if renormalize:
            flipped = torch.softmax(flipped, dim=-1)
        out[rows] = flipped
    return amap.replaced(out, validate=renormalize)


def reassign_cross_attention(amap: AttentionMap, mask: LatentMask,
                             layout: TokenLayout) -> AttentionMap:
    """Route masked rows entirely to the sequence-end token and the rest to
    the sequence-start token.  Every output row is exactly one-hot; character
    and padding columns are zeroed.
    """
    if amap.kind != CROSS:
        raise ValueError("reassignment is defined for cross-attention maps only")
    if amap.n_keys != layout.n_tokens:
        raise ValueError(f"map has {amap.n_keys} key columns, layout expects {layout.n_tokens}")
    _require_mask_alignment(amap, mask)
    rows = mask.flat_bool()
    out = torch.zeros_like(amap.probs)
    out[rows, layout.idx_seq_end] = 1.0
    out[~rows, layout.idx_seq_start] = 1.0
    return amap.replaced(out)


def enforce_identity_self_attention(amap: AttentionMap,
                                    char_masks: Sequence[LatentMask]) -> AttentionMap:
    """Collapse self-attention inside each character region onto the diagonal.

    Within a region, each row keeps its total in-region mass but concentrates
    it on its own position, so the region sub-block has identity structure.
    Rows outside every region are untouched; modified rows are renormalized to
    sum to exactly 1.  Regions must be pairwise disjoint.
    """
    if amap.kind != SELF:
        raise ValueError("identity enforcement is defined for self-attention maps only")
    taken = None
    regions = []
    for cm in char_masks:
        _require_mask_alignment(amap, cm)
        sel = cm.flat_bool()
        if taken is None:
            taken = sel.clone()
        else:
            if bool((taken & sel).any()):
                raise ValueError("character regions must be pairwise disjoint")
            taken |= sel
        idx = torch.nonzero(sel, as_tuple=False).reshape(-1)
        if idx.numel():
            regions.append(idx)

    out = amap.probs.clone()
    for idx in regions:
        block = out[idx][:, idx]
        in_region = block.sum(dim=-1)
        grid_r, grid_c = torch.meshgrid(idx, idx, indexing="ij")
        out[grid_r, grid_c] = 0.0
        out[idx, idx] = in_region
        out[idx] = out[idx] / out[idx].sum(dim=-1, keepdim=True)
    return amap.replaced(out)


def extract_token_field(amap: AttentionMap, layout: TokenLayout,
                        token_index: int) -> torch.Tensor:
    """One token's attention column reshaped to the (h, w) spatial grid."""
    if amap.kind != CROSS:
        raise ValueError("token fields exist only for cross-attention maps")
    if amap.n_keys != layout.n_tokens:
        raise ValueError(f"map has {amap.n_keys} key columns, layout expects {layout.n_tokens}")
    if not (0 <= token_index < layout.n_tokens):
        raise ValueError(f"token index {token_index} outside [0, {layout.n_tokens})")
    h, w = amap.spatial
    return amap.probs[:, token_index].reshape(h, w)
