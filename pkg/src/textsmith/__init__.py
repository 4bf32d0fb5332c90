"""Training-free text manipulation inside images, driven by attention edits
and loss-guided latent optimization on a diffusion inpainting backbone."""

from .attention import (
    AttentionMap,
    LatentMask,
    TokenLayout,
    enforce_identity_self_attention,
    invert_self_attention,
    reassign_cross_attention,
)
from .backbone import BackboneProfile, BackboneSession, make_stub_backbone
from .losses import GuidanceWeights
from .masks import CharWidthPriors, MaskSet, build_mask_set, shrink_mask
from .pipeline import (
    ApplicationResult,
    AttentionRecorder,
    SamplingSchedule,
    TASKS,
    run_application,
    run_controllable_inpainting,
    run_text_removal,
)

__version__ = "0.1.0"

__all__ = [
    "ApplicationResult",
    "AttentionMap",
    "AttentionRecorder",
    "BackboneProfile",
    "BackboneSession",
    "CharWidthPriors",
    "GuidanceWeights",
    "LatentMask",
    "MaskSet",
    "SamplingSchedule",
    "TASKS",
    "TokenLayout",
    "build_mask_set",
    "enforce_identity_self_attention",
    "invert_self_attention",
    "make_stub_backbone",
    "reassign_cross_attention",
    "run_application",
    "run_controllable_inpainting",
    "run_text_removal",
    "shrink_mask",
    "__version__",
]
