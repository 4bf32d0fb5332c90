"""Sampling loops: text removal, style-preserving inpainting over the side-by-
side canvas, and the per-task wiring between them.

The two loops never touch backbone internals; they schedule attention edits
through the session hook registry and optimize the latent against losses
collected from the same hooks.
"""

from __future__ import annotations

import dataclasses
import math
import time
import warnings
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .attention import (
    AttentionMap,
    LatentMask,
    TokenLayout,
    enforce_identity_self_attention,
    invert_self_attention,
    reassign_cross_attention,
)
from .backbone import (
    ROLE_CONTENT,
    ROLE_IDENTITY,
    ROLE_INVERSION,
    ROLE_REASSIGNMENT,
    ROLE_STYLE,
    BackboneSession,
    HookSite,
)
from .grid import GridCanvas, assemble_grid, crop_grid_result, embed_in_grid
from .losses import GuidanceWeights, content_loss, style_loss, style_target, total_guidance
from .masks import MaskSet, CharWidthPriors, build_mask_set, resample_mask, to_latent_mask

TASKS = ("removal", "editing", "insertion", "rescaling", "repositioning",
         "style_insertion", "style_editing")

# tasks that erase the original text before anything is rendered
_REMOVAL_FIRST = ("removal", "editing", "rescaling", "repositioning", "style_editing")
# tasks that take their style reference from an explicit second image
_EXPLICIT_REFERENCE = ("style_insertion", "style_editing")


def task_phases(task: str) -> Tuple[str, ...]:
    """Sampling phases a task runs, in order."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if task == "removal":
        return ("removal",)
    if task in _REMOVAL_FIRST:
        return ("removal", "inpainting")
    return ("inpainting",)


@dataclasses.dataclass(frozen=True)
class SamplingSchedule:
    """Step budget and where each mechanism is active within it."""

    total_steps: int = 20
    inversion_fraction: float = 0.5
    reassignment_fraction: float = 1.0
    optimization_stages: Tuple[float, ...] = (0.0, 0.2, 0.4)
    optimization_iters: int = 20
    learning_rate: float = 1e-2
    adam_betas: Tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        for frac in (self.inversion_fraction, self.reassignment_fraction):
            if not 0.0 <= frac <= 1.0:
                raise ValueError(f"schedule fraction {frac} outside [0, 1]")
        for frac in self.optimization_stages:
            if not 0.0 <= frac < 1.0:
                raise ValueError(f"optimization stage {frac} outside [0, 1)")
        if self.optimization_iters < 0:
            raise ValueError("optimization_iters must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")

    def inversion_step_count(self) -> int:
        return math.ceil(self.inversion_fraction * self.total_steps)

    def reassignment_step_count(self) -> int:
        return math.ceil(self.reassignment_fraction * self.total_steps)

    def optimization_step_indices(self) -> List[int]:
        return sorted({math.floor(f * self.total_steps) for f in self.optimization_stages})


def sampler_timesteps(table_len: int, total_steps: int) -> List[int]:
    """Descending timestep indices, evenly spaced over the schedule table."""
    if total_steps > table_len:
        raise ValueError(f"{total_steps} steps over a {table_len}-entry table")
    ts = np.linspace(table_len - 1, 0, total_steps)
    return [int(round(t)) for t in ts]


def init_latent(z0: torch.Tensor, timestep: int, noise: torch.Tensor,
                alpha_bar: np.ndarray) -> torch.Tensor:
    """Diffuse a clean latent to ``timestep``: sqrt(a)*z0 + sqrt(1-a)*eps."""
    if z0.shape != noise.shape:
        raise ValueError(f"latent {tuple(z0.shape)} and noise {tuple(noise.shape)} differ")
    if not (0 <= timestep < len(alpha_bar)):
        raise ValueError(f"timestep {timestep} outside the schedule table")
    a = float(alpha_bar[timestep])
    if not (0.0 < a <= 1.0):
        raise ValueError(f"alpha_bar[{timestep}] = {a} outside (0, 1]")
    return math.sqrt(a) * z0 + math.sqrt(1.0 - a) * noise


class AttentionRecorder:
    """Collects per-step cross-attention token fields for later inspection."""

    def __init__(self):
        self.snapshots: Dict[str, Dict[int, np.ndarray]] = {}
        self.layouts: Dict[str, TokenLayout] = {}

    def observe(self, phase: str, step: int, amap: AttentionMap, layout: TokenLayout):
        h, w = amap.spatial
        fields = amap.probs.detach().to(torch.float32).transpose(0, 1).reshape(-1, h, w)
        self.snapshots.setdefault(phase, {})[step] = fields.numpy().copy()
        self.layouts.setdefault(phase, layout)


@dataclasses.dataclass
class RemovalResult:
    image: np.ndarray
    metadata: Dict


@dataclasses.dataclass
class InpaintResult:
    image: np.ndarray
    grid_image: np.ndarray
    metadata: Dict


@dataclasses.dataclass
class ApplicationResult:
    image: np.ndarray
    artifacts: Dict[str, np.ndarray]
    metadata: Dict


def _check_image(image: np.ndarray, session: BackboneSession, name: str):
    if not isinstance(image, np.ndarray) or image.ndim != 3 or image.shape[2] != 3 \
            or image.dtype != np.uint8:
        raise ValueError(f"{name} must be a uint8 (H, W, 3) array")
    if image.shape[:2] != session.pixel_dims:
        raise ValueError(f"{name} dims {image.shape[:2]} not accepted by the session "
                         f"(expects {session.pixel_dims})")


def _check_mask(pixel_mask: np.ndarray, session: BackboneSession, name: str,
                require_nonempty: bool = True):
    if not isinstance(pixel_mask, np.ndarray) or pixel_mask.ndim != 2 \
            or pixel_mask.dtype != np.uint8:
        raise ValueError(f"{name} must be a uint8 (H, W) array")
    if pixel_mask.shape != session.pixel_dims:
        raise ValueError(f"{name} dims {pixel_mask.shape} not accepted by the session")
    if not np.isin(np.unique(pixel_mask), (0, 255)).all():
        raise ValueError(f"{name} values must be exactly 0 or 255")
    if require_nonempty and not pixel_mask.any():
        raise ValueError(f"{name} selects no pixels")


def _compose(fns: Sequence[Callable]) -> Callable:
    def run(amap):
        for fn in fns:
            amap = fn(amap)
        return amap
    return run


def _register(session: BackboneSession, hooks: Dict[HookSite, List[Callable]]):
    session.clear_hooks()
    for site, fns in hooks.items():
        session.register_hook(site, _compose(fns))


def run_text_removal(image: np.ndarray, pixel_mask: np.ndarray,
                     session: BackboneSession,
                     schedule: Optional[SamplingSchedule] = None,
                     seed: int = 0,
                     recorder: Optional[AttentionRecorder] = None) -> RemovalResult:
    """Erase the masked text by inpainting with a blank prompt while flipping
    masked self-attention rows (early steps) and routing masked cross-attention
    rows to the sequence-end token (all steps)."""
    schedule = schedule or SamplingSchedule()
    _check_image(image, session, "image")
    _check_mask(pixel_mask, session, "mask")
    profile = session.profile
    c, h, w = profile.latent_dims

    mask = to_latent_mask(pixel_mask, (h, w))
    embedding, layout = session.encode_text("")
    z0 = session.encode_image(image)
    masked_image = (image * (pixel_mask == 0)[..., None]).astype(np.uint8)
    z_masked = session.encode_image(masked_image)

    gen = torch.Generator().manual_seed(seed)
    noise = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    timesteps = sampler_timesteps(len(profile.alpha_bar), schedule.total_steps)
    z = init_latent(z0, timesteps[0], noise, profile.alpha_bar)

    n_inv = schedule.inversion_step_count()
    n_car = schedule.reassignment_step_count()
    counts = {"self_inversion": 0, "cross_reassignment": 0}
    inv_steps: List[int] = []
    car_steps: List[int] = []

    def inversion_hook(amap: AttentionMap) -> AttentionMap:
        counts["self_inversion"] += 1
        return invert_self_attention(amap, resample_mask(mask, amap.spatial))

    def reassign_hook(amap: AttentionMap) -> AttentionMap:
        counts["cross_reassignment"] += 1
        return reassign_cross_attention(amap, resample_mask(mask, amap.spatial), layout)

    for i, t in enumerate(timesteps):
        hooks: Dict[HookSite, List[Callable]] = {}
        if i < n_inv:
            inv_steps.append(i)
            for site in profile.roles[ROLE_INVERSION]:
                hooks.setdefault(site, []).append(inversion_hook)
        if i < n_car:
            car_steps.append(i)
            for site in profile.roles[ROLE_REASSIGNMENT]:
                hooks.setdefault(site, []).append(reassign_hook)
        if recorder is not None and profile.roles[ROLE_CONTENT]:
            site = profile.roles[ROLE_CONTENT][0]
            step_index = i

            def snapshot(amap, _i=step_index):
                recorder.observe("removal", _i, amap, layout)
                return amap

            hooks.setdefault(site, []).append(snapshot)
        _register(session, hooks)
        z = session.denoise_step(z, z_masked, mask, embedding, t)
    session.clear_hooks()

    out = session.decode_latent(z)
    metadata = {
        "steps": schedule.total_steps,
        "timesteps": timesteps,
        "inversion_steps": inv_steps,
        "reassignment_steps": car_steps,
        "inversion_calls": counts["self_inversion"],
        "reassignment_calls": counts["cross_reassignment"],
        "seed": seed,
    }
    return RemovalResult(image=out, metadata=metadata)


def _stage_optimize(z: torch.Tensor, timestep: int, session: BackboneSession,
                    grid: GridCanvas, embedding: torch.Tensor, layout: TokenLayout,
                    char_masks: Sequence[LatentMask], rows_mask: LatentMask,
                    style_mask: LatentMask, weights: GuidanceWeights,
                    schedule: SamplingSchedule,
                    counts: Dict[str, int]) -> Tuple[torch.Tensor, List[Dict], bool]:
    """Adam-optimize the grid latent against the attention losses at one step.

    Runs partial forwards (denoiser evaluations whose output is discarded)
    with loss collectors and the character-identity edit registered.  A
    non-finite loss or gradient aborts the stage and hands back the last
    latent that still evaluated finite.
    """
    profile = session.profile
    z_opt = z.detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([z_opt], lr=schedule.learning_rate, betas=schedule.adam_betas)
    trace: List[Dict] = []
    last_finite = z.detach().clone()
    use_content = bool(profile.roles[ROLE_CONTENT]) and len(layout.char_indices) > 0
    use_style = bool(profile.roles[ROLE_STYLE])

    gt_cache: Dict[Tuple[int, int], object] = {}

    def gt_for(spatial):
        if spatial not in gt_cache:
            gt_cache[spatial] = style_target(resample_mask(style_mask, spatial))
        return gt_cache[spatial]

    def identity_hook(amap: AttentionMap) -> AttentionMap:
        counts["identity_enforcement"] += 1
        local = [resample_mask(cm, amap.spatial) for cm in char_masks]
        return enforce_identity_self_attention(amap, local)

    def collector(store: List[AttentionMap]) -> Callable:
        def fn(amap: AttentionMap) -> AttentionMap:
            store.append(amap)
            return amap
        return fn

    for it in range(schedule.optimization_iters):
        content_maps: List[AttentionMap] = []
        style_maps: List[AttentionMap] = []
        hooks: Dict[HookSite, List[Callable]] = {}
        if use_content:
            for site in profile.roles[ROLE_CONTENT]:
                hooks.setdefault(site, []).append(collector(content_maps))
        if use_style:
            for site in profile.roles[ROLE_STYLE]:
                hooks.setdefault(site, []).append(collector(style_maps))
        for site in profile.roles[ROLE_IDENTITY]:
            hooks.setdefault(site, []).append(identity_hook)
        _register(session, hooks)
        session.denoise_step(z_opt, grid.masked_latent, grid.latent_mask,
                             embedding, timestep)

        lc = None
        if content_maps:
            layer_losses = []
            for amap in content_maps:
                local = [resample_mask(cm, amap.spatial) for cm in char_masks]
                layer_losses.append(content_loss([amap], layout, local,
                                                 gamma=weights.focal_gamma))
            lc = torch.stack(layer_losses).mean()
        ls = None
        if style_maps:
            layer_losses = []
            for amap in style_maps:
                rows_local = resample_mask(rows_mask, amap.spatial)
                layer_losses.append(style_loss([amap], rows_local, gt_for(amap.spatial)))
            ls = torch.stack(layer_losses).mean()
        loss = total_guidance(lc, ls, weights)

        if not bool(torch.isfinite(loss)):
            warnings.warn("non-finite guidance loss; aborting optimization stage")
            session.clear_hooks()
            return last_finite, trace, False
        last_finite = z_opt.detach().clone()
        opt.zero_grad()
        loss.backward()
        if not bool(torch.isfinite(z_opt.grad).all()):
            warnings.warn("non-finite guidance gradient; aborting optimization stage")
            session.clear_hooks()
            return last_finite, trace, False
        opt.step()
        trace.append({
            "iteration": it,
            "total": float(loss.detach()),
            "content": float(lc.detach()) if lc is not None else None,
            "style": float(ls.detach()) if ls is not None else None,
        })
    session.clear_hooks()
    return z_opt.detach(), trace, True


def run_controllable_inpainting(removed_image: np.ndarray, reference_image: np.ndarray,
                                mask_set: MaskSet, reference_pixel_mask: np.ndarray,
                                target_text: str, session: BackboneSession,
                                weights: Optional[GuidanceWeights] = None,
                                schedule: Optional[SamplingSchedule] = None,
                                seed: int = 0,
                                recorder: Optional[AttentionRecorder] = None) -> InpaintResult:
    """Render ``target_text`` into the masked region, matching the style of the
    reference mask region by sampling over a [target | reference] canvas."""
    schedule = schedule or SamplingSchedule()
    weights = weights or GuidanceWeights()
    _check_image(removed_image, session, "removed image")
    _check_image(reference_image, session, "reference image")
    _check_mask(reference_pixel_mask, session, "reference mask")
    if not target_text:
        raise ValueError("target text must be non-empty")
    if len(target_text) != len(mask_set.char_masks):
        raise ValueError(f"mask set carries {len(mask_set.char_masks)} character "
                         f"strips for {len(target_text)} characters")
    profile = session.profile
    c, h, w = profile.latent_dims

    z_removed = session.encode_image(removed_image)
    z_reference = session.encode_image(reference_image)
    gen = torch.Generator().manual_seed(seed)
    noise = torch.randn((c, h, w), generator=gen, dtype=z_removed.dtype)
    grid = assemble_grid(z_removed, z_reference, mask_set.shrunk_latent, noise)
    grid_hw = (h, 2 * w)

    # every mask the losses see lives in grid coordinates
    rows_mask = LatentMask(values=embed_in_grid(
        mask_set.shrunk_latent.values, grid.target_slot, grid_hw))
    char_grid = [LatentMask(values=embed_in_grid(cm.values, grid.target_slot, grid_hw))
                 for cm in mask_set.char_masks]
    ref_latent = to_latent_mask(reference_pixel_mask, (h, w))
    if ref_latent.is_empty():
        raise ValueError("reference mask is empty at latent resolution")
    style_mask = LatentMask(values=embed_in_grid(
        ref_latent.values, grid.reference_slot, grid_hw))

    embedding, layout = session.encode_text(target_text)
    z0_grid = torch.cat([z_removed, z_reference], dim=-1)
    timesteps = sampler_timesteps(len(profile.alpha_bar), schedule.total_steps)
    # grid.latent is the single-slot Gaussian draw expanded to grid width
    z = init_latent(z0_grid, timesteps[0], grid.latent, profile.alpha_bar)

    opt_steps = schedule.optimization_step_indices() if schedule.optimization_iters > 0 else []
    counts = {"identity_enforcement": 0}
    stages: List[Dict] = []
    warnings_log: List[str] = []

    for i, t in enumerate(timesteps):
        if i in opt_steps:
            z, trace, ok = _stage_optimize(z, t, session, grid, embedding, layout,
                                           char_grid, rows_mask, style_mask,
                                           weights, schedule, counts)
            stages.append({"step": i, "timestep": t, "iterations": len(trace),
                           "aborted": not ok, "trace": trace})
            if not ok:
                warnings_log.append(f"optimization stage at step {i} aborted on "
                                    f"non-finite loss")
        hooks: Dict[HookSite, List[Callable]] = {}
        if recorder is not None and profile.roles[ROLE_CONTENT]:
            site = profile.roles[ROLE_CONTENT][0]
            step_index = i

            def snapshot(amap, _i=step_index):
                recorder.observe("inpainting", _i, amap, layout)
                return amap

            hooks.setdefault(site, []).append(snapshot)
        _register(session, hooks)
        z = session.denoise_step(z, grid.masked_latent, grid.latent_mask, embedding, t)
    session.clear_hooks()

    grid_image = session.decode_latent(z)
    final = crop_grid_result(grid_image, grid.target_slot.scaled(profile.pixel_scale))
    metadata = {
        "steps": schedule.total_steps,
        "timesteps": timesteps,
        "optimization_steps": opt_steps,
        "optimization_stages": stages,
        "identity_calls": counts["identity_enforcement"],
        "warnings": warnings_log,
        "seed": seed,
    }
    return InpaintResult(image=final, grid_image=grid_image, metadata=metadata)


def run_application(task: str, image: np.ndarray, pixel_mask: np.ndarray,
                    session: BackboneSession, *,
                    target_text: Optional[str] = None,
                    source_text: Optional[str] = None,
                    removal_pixel_mask: Optional[np.ndarray] = None,
                    reference_image: Optional[np.ndarray] = None,
                    reference_pixel_mask: Optional[np.ndarray] = None,
                    weights: Optional[GuidanceWeights] = None,
                    schedule: Optional[SamplingSchedule] = None,
                    seed: int = 0,
                    priors: Optional[CharWidthPriors] = None,
                    recorder: Optional[AttentionRecorder] = None) -> ApplicationResult:
    """Wire the removal and inpainting passes for one user-facing task.

    removal           erase only
    editing           erase, then re-render new text in place (style self-reference)
    rescaling         erase, then re-render into the user's resized box
    repositioning     erase at the old box, render at the new one
    insertion         render new text, style taken from the input around the mask
    style_insertion   render new text styled after an explicit reference crop
    style_editing     erase, then render styled after an explicit reference crop
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r} (expected one of {TASKS})")
    if task != "removal" and not target_text:
        raise ValueError(f"task {task!r} requires target text")
    if task in _EXPLICIT_REFERENCE and (reference_image is None or
                                        reference_pixel_mask is None):
        raise ValueError(f"task {task!r} requires a reference image and mask")
    schedule = schedule or SamplingSchedule()
    weights = weights or GuidanceWeights()
    profile = session.profile
    _, h, w = profile.latent_dims

    artifacts: Dict[str, np.ndarray] = {}
    timings: Dict[str, float] = {}
    metadata: Dict = {"task": task, "seed": seed}

    base_image = image
    if task in _REMOVAL_FIRST:
        erase_mask = removal_pixel_mask if removal_pixel_mask is not None else pixel_mask
        t0 = time.perf_counter()
        removal = run_text_removal(image, erase_mask, session, schedule=schedule,
                                   seed=seed, recorder=recorder)
        timings["removal_s"] = time.perf_counter() - t0
        metadata["removal"] = removal.metadata
        artifacts["removal"] = removal.image
        base_image = removal.image

    if task == "removal":
        final = base_image
    else:
        shrink_source = source_text if source_text else None
        mask_set = build_mask_set(pixel_mask, (h, w), target_text,
                                  source_text=shrink_source, priors=priors)
        if task in _EXPLICIT_REFERENCE:
            ref_image, ref_mask = reference_image, reference_pixel_mask
        else:
            ref_image = image
            ref_mask = removal_pixel_mask if removal_pixel_mask is not None else pixel_mask
        t0 = time.perf_counter()
        inpaint = run_controllable_inpainting(
            base_image, ref_image, mask_set, ref_mask, target_text, session,
            weights=weights, schedule=schedule, seed=seed + 1, recorder=recorder)
        timings["inpainting_s"] = time.perf_counter() - t0
        metadata["inpainting"] = inpaint.metadata
        metadata["shrunk_mask_cells"] = int(mask_set.shrunk_latent.binary.sum())
        artifacts["grid"] = inpaint.grid_image
        artifacts["shrunk_mask"] = mask_set.shrunk_pixel
        final = inpaint.image

    timings["total_s"] = sum(timings.values())
    metadata["timings"] = timings
    artifacts["final"] = final
    return ApplicationResult(image=final, artifacts=artifacts, metadata=metadata)
