"""Denoiser adapter layer: hook-site addressing, noise schedule, image codec,
and a deterministic stub backbone small enough for CPU test runs.

The pipeline only talks to ``BackboneSession``; a real diffusion inpainter
plugs in by implementing the same five calls.  The stub keeps every contract
the pipeline relies on (token layout, hook sites, seeded determinism,
differentiable attention maps) while replacing the UNet with fixed seeded
linear maps.
"""

from __future__ import annotations

import abc
import dataclasses
import json
import math
import zlib
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from .attention import CROSS, SELF, AttentionMap, LatentMask, TokenLayout, attention_probabilities

HookFn = Callable[[AttentionMap], AttentionMap]

ROLE_INVERSION = "self_inversion"
ROLE_REASSIGNMENT = "cross_reassignment"
ROLE_CONTENT = "content_loss"
ROLE_STYLE = "style_loss"
ROLE_IDENTITY = "identity_enforcement"
ALL_ROLES = (ROLE_INVERSION, ROLE_REASSIGNMENT, ROLE_CONTENT, ROLE_STYLE, ROLE_IDENTITY)


@dataclasses.dataclass(frozen=True)
class HookSite:
    """Address of one attention layer inside the denoiser."""

    stage: str      # "encoder" | "decoder"
    block: int
    layer: int
    kind: str       # "self" | "cross"

    def __post_init__(self):
        if self.stage not in ("encoder", "decoder"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.kind not in (SELF, CROSS):
            raise ValueError(f"unknown attention kind {self.kind!r}")
        if self.block < 0 or self.layer < 0:
            raise ValueError("block and layer indices must be non-negative")

    def key(self) -> str:
        return f"{self.stage}.block{self.block}.layer{self.layer}.{self.kind}"

    @classmethod
    def from_key(cls, key: str) -> "HookSite":
        try:
            stage, block, layer, kind = key.split(".")
            return cls(stage=stage, block=int(block.removeprefix("block")),
                       layer=int(layer.removeprefix("layer")), kind=kind)
        except Exception as exc:
            raise ValueError(f"malformed hook site key {key!r}") from exc


def _linear_alpha_bar(steps: int = 1000, beta_start: float = 1e-4,
                      beta_end: float = 0.02) -> np.ndarray:
    betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    return np.cumprod(1.0 - betas)


@dataclasses.dataclass
class BackboneProfile:
    """Per-backbone configuration: where each edit hooks in, the diffusion
    schedule table, and latent geometry.  Profiles are plain JSON so swapping
    backbones does not touch code."""

    name: str
    latent_dims: Tuple[int, int, int]          # (channels, height, width)
    pixel_scale: int                           # image pixels per latent cell
    n_tokens: int
    alpha_bar: np.ndarray                      # cumulative alpha, indexed by timestep
    roles: Dict[str, Tuple[HookSite, ...]]

    def __post_init__(self):
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        if self.alpha_bar.ndim != 1 or len(self.alpha_bar) < 2:
            raise ValueError("alpha_bar must be a 1D table with at least 2 entries")
        if (self.alpha_bar <= 0).any() or (self.alpha_bar > 1).any():
            raise ValueError("alpha_bar values must lie in (0, 1]")
        if (np.diff(self.alpha_bar) > 0).any():
            raise ValueError("alpha_bar must be non-increasing in the timestep")
        if self.pixel_scale <= 0:
            raise ValueError("pixel scale must be positive")
        if self.n_tokens < 4:
            raise ValueError("token table needs at least the 4 marker tokens")
        for role in self.roles:
            if role not in ALL_ROLES:
                raise ValueError(f"unknown hook role {role!r}")
        for role in ALL_ROLES:
            self.roles.setdefault(role, ())
        for site in self.roles[ROLE_INVERSION] + self.roles[ROLE_STYLE] \
                + self.roles[ROLE_IDENTITY]:
            if site.kind != SELF:
                raise ValueError(f"{site.key()} must be a self-attention site")
        for site in self.roles[ROLE_REASSIGNMENT] + self.roles[ROLE_CONTENT]:
            if site.kind != CROSS:
                raise ValueError(f"{site.key()} must be a cross-attention site")

    def all_sites(self) -> List[HookSite]:
        seen: List[HookSite] = []
        for role in ALL_ROLES:
            for site in self.roles[role]:
                if site not in seen:
                    seen.append(site)
        return seen

    @property
    def pixel_dims(self) -> Tuple[int, int]:
        _, h, w = self.latent_dims
        return (h * self.pixel_scale, w * self.pixel_scale)

    @classmethod
    def default(cls, latent_dims: Tuple[int, int, int] = (4, 16, 16),
                pixel_scale: int = 8, n_tokens: int = 16) -> "BackboneProfile":
        dec = lambda b, l, k: HookSite("decoder", b, l, k)
        return cls(
            name="stub-decoder-v1",
            latent_dims=tuple(latent_dims),
            pixel_scale=pixel_scale,
            n_tokens=n_tokens,
            alpha_bar=_linear_alpha_bar(),
            roles={
                ROLE_INVERSION: (dec(2, 1, SELF),),
                ROLE_REASSIGNMENT: (dec(1, 2, CROSS), dec(2, 0, CROSS)),
                ROLE_CONTENT: (dec(1, 2, CROSS), dec(2, 0, CROSS)),
                ROLE_STYLE: (dec(1, 0, SELF), dec(1, 1, SELF)),
                ROLE_IDENTITY: (dec(1, 2, SELF),),
            },
        )

    def to_file(self, path: str):
        payload = {
            "name": self.name,
            "latent_dims": list(self.latent_dims),
            "pixel_scale": self.pixel_scale,
            "n_tokens": self.n_tokens,
            "alpha_bar": [float(a) for a in self.alpha_bar],
            "roles": {role: [s.key() for s in sites]
                      for role, sites in self.roles.items()},
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)

    @classmethod
    def from_file(cls, path: str) -> "BackboneProfile":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(
            name=raw["name"],
            latent_dims=tuple(raw["latent_dims"]),
            pixel_scale=int(raw["pixel_scale"]),
            n_tokens=int(raw["n_tokens"]),
            alpha_bar=np.asarray(raw["alpha_bar"], dtype=np.float64),
            roles={role: tuple(HookSite.from_key(k) for k in keys)
                   for role, keys in raw["roles"].items()},
        )


class BackboneSession(abc.ABC):
    """One job's handle on the denoiser.  Sessions are not shared across jobs;
    hook registration mutates per-session state only."""

    profile: BackboneProfile

    def __init__(self):
        self._hooks: Dict[HookSite, HookFn] = {}

    @property
    def latent_dims(self) -> Tuple[int, int, int]:
        return self.profile.latent_dims

    @property
    def pixel_dims(self) -> Tuple[int, int]:
        return self.profile.pixel_dims

    @abc.abstractmethod
    def encode_image(self, image: np.ndarray) -> torch.Tensor:
        """uint8 (H, W, 3) image -> latent (c, h, w)."""

    @abc.abstractmethod
    def decode_latent(self, latent: torch.Tensor) -> np.ndarray:
        """latent (c, h, w') -> uint8 image (h*scale, w'*scale, 3)."""

    @abc.abstractmethod
    def encode_text(self, text: str) -> Tuple[torch.Tensor, TokenLayout]:
        """Prompt string -> (token embeddings (n_tokens, d), layout)."""

    @abc.abstractmethod
    def denoise_step(self, latent: torch.Tensor, masked_latent: torch.Tensor,
                     mask: LatentMask, embedding: torch.Tensor, timestep: int) -> torch.Tensor:
        """One denoiser evaluation.  Registered hooks run synchronously inside,
        once per site, and their edited maps feed the step's output."""

    def register_hook(self, site: HookSite, fn: HookFn):
        self._hooks[site] = fn

    def clear_hooks(self):
        self._hooks = {}

    @property
    def hooks(self) -> Dict[HookSite, HookFn]:
        return dict(self._hooks)


class IdentityCodec:
    """Latent == normalized image.  Keeps grid-crop tests resampling-free."""

    channels = 3
    scale = 1

    def encode(self, image: np.ndarray, latent_hw: Tuple[int, int]) -> torch.Tensor:
        h, w = latent_hw
        if image.shape[:2] != (h, w):
            raise ValueError(f"identity codec expects {h}x{w} images, got {image.shape[:2]}")
        arr = image.astype(np.float32) / 255.0
        return torch.from_numpy(arr.transpose(2, 0, 1).copy())

    def decode(self, latent: torch.Tensor) -> np.ndarray:
        arr = latent.detach().numpy().transpose(1, 2, 0)
        return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


class ProjectionCodec:
    """Seeded linear pixel<->latent codec with bilinear spatial resampling.

    Not an autoencoder; just a deterministic stand-in with the right shapes
    and a pseudo-inverse decode so round trips stay recognizable.
    """

    def __init__(self, channels: int = 4, scale: int = 8, seed: int = 0):
        self.channels = channels
        self.scale = scale
        gen = torch.Generator().manual_seed(seed ^ 0x5EED)
        mix = torch.randn(channels, 3, generator=gen) / math.sqrt(3.0)
        self._mix = mix
        self._unmix = torch.linalg.pinv(mix)

    def encode(self, image: np.ndarray, latent_hw: Tuple[int, int]) -> torch.Tensor:
        h, w = latent_hw
        pil = Image.fromarray(image).resize((w, h), Image.BILINEAR)
        arr = np.asarray(pil, dtype=np.float32) / 255.0 * 2.0 - 1.0
        px = torch.from_numpy(arr.transpose(2, 0, 1).copy())
        return torch.einsum("kc,chw->khw", self._mix, px)

    def decode(self, latent: torch.Tensor) -> np.ndarray:
        px = torch.einsum("ck,khw->chw", self._unmix, latent.detach().float())
        arr = (px.numpy().transpose(1, 2, 0) + 1.0) / 2.0
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
        h, w = arr.shape[:2]
        pil = Image.fromarray(arr).resize((w * self.scale, h * self.scale), Image.BILINEAR)
        return np.asarray(pil)


class StubBackbone(BackboneSession):
    """Deterministic random-linear-map denoiser with real hook plumbing.

    Every weight derives from (seed, tag) so runs are bit-identical for a
    fixed seed.  Each profile site gets its own q/k/v projections; hook edits
    change the site's contribution to the step output, so attention edits have
    observable downstream effect just like in a real backbone.
    """

    EMB_DIM = 8
    HEAD_DIM = 8

    def __init__(self, profile: Optional[BackboneProfile] = None, seed: int = 0,
                 codec=None):
        super().__init__()
        self.profile = profile or BackboneProfile.default()
        self.seed = seed
        c = self.profile.latent_dims[0]
        self.codec = codec or ProjectionCodec(channels=c, seed=seed)
        if self.codec.channels != c:
            raise ValueError(f"codec produces {self.codec.channels} channels, "
                             f"profile expects {c}")
        if self.codec.scale != self.profile.pixel_scale:
            raise ValueError("codec scale does not match the profile pixel scale")
        self.hook_log: List[str] = []
        self._weights = {}
        for site in self.profile.all_sites():
            tag = site.key()
            wq = self._rand((c, self.HEAD_DIM), f"{tag}/wq")
            if site.kind == CROSS:
                wk = self._rand((self.EMB_DIM, self.HEAD_DIM), f"{tag}/wk")
                wv = self._rand((self.EMB_DIM, c), f"{tag}/wv")
            else:
                wk = self._rand((c, self.HEAD_DIM), f"{tag}/wk")
                wv = self._rand((c, c), f"{tag}/wv")
            self._weights[site] = (wq, wk, wv)
        self._token_cache: Dict[str, torch.Tensor] = {}

    def _rand(self, shape, tag: str) -> torch.Tensor:
        mixed = zlib.crc32(f"{self.seed}/{tag}".encode()) & 0x7FFFFFFF
        gen = torch.Generator().manual_seed(mixed)
        return torch.randn(*shape, generator=gen) / math.sqrt(shape[0])

    # --- codec passthrough -------------------------------------------------

    def encode_image(self, image: np.ndarray) -> torch.Tensor:
        if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
            raise ValueError("expected a uint8 (H, W, 3) image")
        _, h, w = self.profile.latent_dims
        return self.codec.encode(image, (h, w))

    def decode_latent(self, latent: torch.Tensor) -> np.ndarray:
        if latent.dim() != 3 or latent.shape[0] != self.profile.latent_dims[0]:
            raise ValueError("latent shape does not match the profile")
        return self.codec.decode(latent)

    # --- text --------------------------------------------------------------

    def _token_vec(self, tag: str) -> torch.Tensor:
        if tag not in self._token_cache:
            self._token_cache[tag] = self._rand((self.EMB_DIM,), f"tok/{tag}")
        return self._token_cache[tag]

    def encode_text(self, text: str) -> Tuple[torch.Tensor, TokenLayout]:
        layout = TokenLayout.for_text(text, self.profile.n_tokens)
        rows = [self._token_vec("seq_start"), self._token_vec("seq_end"),
                self._token_vec("text_start")]
        for ch in text:
            rows.append(self._token_vec(f"char/{ord(ch)}"))
        rows.append(self._token_vec("text_end"))
        pad = self._token_vec("pad")
        while len(rows) < self.profile.n_tokens:
            rows.append(pad)
        return torch.stack(rows), layout

    # --- denoising ---------------------------------------------------------

    def denoise_step(self, latent: torch.Tensor, masked_latent: torch.Tensor,
                     mask: LatentMask, embedding: torch.Tensor, timestep: int) -> torch.Tensor:
        c, h, w_native = self.profile.latent_dims
        if latent.dim() != 3 or latent.shape[0] != c or latent.shape[1] != h:
            raise ValueError(f"latent shape {tuple(latent.shape)} does not match profile")
        if latent.shape != masked_latent.shape:
            raise ValueError("latent and masked latent shapes differ")
        width = int(latent.shape[2])
        if mask.spatial != (h, width):
            raise ValueError(f"mask spatial {mask.spatial} does not match latent")
        if embedding.shape[0] != self.profile.n_tokens:
            raise ValueError("embedding rows must match the profile token count")
        if not (0 <= timestep < len(self.profile.alpha_bar)):
            raise ValueError(f"timestep {timestep} outside the schedule table")

        spatial = (h, width)
        feats = latent.reshape(c, -1).transpose(0, 1)        # (hw, c)
        acc = None
        for site in self.profile.all_sites():
            wq, wk, wv = self._weights[site]
            q = feats @ wq
            if site.kind == CROSS:
                k = embedding @ wk
                v = embedding @ wv
            else:
                k = feats @ wk
                v = feats @ wv
            amap = attention_probabilities(q, k, kind=site.kind, spatial=spatial)
            fn = self._hooks.get(site)
            if fn is not None:
                amap = fn(amap)
                self.hook_log.append(site.key())
            contrib = amap.probs @ v                          # (hw, c)
            acc = contrib if acc is None else acc + contrib

        # The update is an arbitrary but fixed contraction: mostly the current
        # latent, a pull toward the masked-image latent outside the mask, plus
        # the (possibly hook-edited) attention readouts.
        a_t = float(self.profile.alpha_bar[timestep])
        keep = (1.0 - mask.binary).unsqueeze(0)
        base = 0.82 * latent + 0.1 * (masked_latent * keep) + 0.03 * mask.values.unsqueeze(0)
        t_fac = 0.96 + 0.04 * math.sqrt(a_t)
        attn = acc.transpose(0, 1).reshape(c, h, width)
        return t_fac * base + (0.12 / max(1, len(self._weights))) * attn

    def reset_log(self):
        self.hook_log = []


def make_stub_backbone(seed: int = 0, latent_dims: Tuple[int, int, int] = (4, 16, 16),
                       pixel_scale: int = 8, identity_codec: bool = False,
                       profile: Optional[BackboneProfile] = None) -> StubBackbone:
    """Desk-scale session factory used by tests, the CLI, and the service."""
    if profile is None:
        if identity_codec:
            latent_dims = (3, latent_dims[1], latent_dims[2])
            pixel_scale = 1
        profile = BackboneProfile.default(latent_dims=latent_dims, pixel_scale=pixel_scale)
    codec = IdentityCodec() if identity_codec else ProjectionCodec(
        channels=profile.latent_dims[0], scale=profile.pixel_scale, seed=seed)
    return StubBackbone(profile=profile, seed=seed, codec=codec)
