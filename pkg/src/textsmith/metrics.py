"""Style-fidelity and rendering-accuracy metrics.

All image metrics operate on pixels normalized to [0, 1]; uint8 inputs are
converted automatically.  MS-SSIM follows the canonical five-scale
formulation (11x11 gaussian window, sigma 1.5); images too small for all
five scales fall back to however many scales fit, with the scale weights
renormalized to sum to one.
"""

import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg as _linalg
from scipy import ndimage as _ndimage

# Canonical five-scale weights (coarse scales last).
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_WIN_SIZE = 11
_WIN_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03
PSNR_CAP = 100.0


def _as_float(img: np.ndarray) -> np.ndarray:
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64)


def _check_pair(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared error over [0,1]-normalized pixels."""
    _check_pair(a, b)
    d = _as_float(a) - _as_float(b)
    return float(np.mean(d * d))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for identical inputs."""
    err = mse(a, b)
    if err <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, float(10.0 * math.log10(1.0 / err)))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


_WINDOW_1D = _gaussian_window(_WIN_SIZE, _WIN_SIGMA)


def _filter_valid(img: np.ndarray) -> np.ndarray:
    # separable gaussian, cropped to the fully-overlapping (valid) region
    out = _ndimage.correlate1d(img, _WINDOW_1D, axis=0, mode="constant")
    out = _ndimage.correlate1d(out, _WINDOW_1D, axis=1, mode="constant")
    pad = _WIN_SIZE // 2
    return out[pad:-pad, pad:-pad]


def _ssim_terms(a: np.ndarray, b: np.ndarray) -> Tuple[float, float]:
    """Mean SSIM and mean contrast-structure term for one channel pair."""
    c1 = _K1 * _K1
    c2 = _K2 * _K2
    mu_a = _filter_valid(a)
    mu_b = _filter_valid(b)
    var_a = _filter_valid(a * a) - mu_a * mu_a
    var_b = _filter_valid(b * b) - mu_b * mu_b
    cov = _filter_valid(a * b) - mu_a * mu_b
    lum = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    cs = (2.0 * cov + c2) / (var_a + var_b + c2)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    h2, w2 = h - h % 2, w - w % 2
    x = img[:h2, :w2]
    return 0.25 * (x[0::2, 0::2] + x[0::2, 1::2] + x[1::2, 0::2] + x[1::2, 1::2])


def ms_ssim(a: np.ndarray, b: np.ndarray,
            weights: Sequence[float] = MS_SSIM_WEIGHTS) -> float:
    """Multi-scale structural similarity on [0,1] images (gray or multichannel)."""
    _check_pair(a, b)
    fa, fb = _as_float(a), _as_float(b)
    if fa.ndim == 2:
        fa, fb = fa[..., None], fb[..., None]
    if fa.ndim != 3:
        raise ValueError("expected HxW or HxWxC images")

    # how many scales actually fit: each needs a full 11x11 window
    n_scales = 0
    side = min(fa.shape[0], fa.shape[1])
    while n_scales < len(weights) and side >= _WIN_SIZE:
        n_scales += 1
        side //= 2
    if n_scales == 0:
        raise ValueError(f"image smaller than the {_WIN_SIZE}px ssim window")
    w = np.asarray(weights[:n_scales], dtype=np.float64)
    if n_scales < len(weights):
        w = w / w.sum()

    per_channel = []
    for ch in range(fa.shape[2]):
        xa, xb = fa[:, :, ch], fb[:, :, ch]
        score = 1.0
        for level in range(n_scales):
            ssim_mean, cs_mean = _ssim_terms(xa, xb)
            term = ssim_mean if level == n_scales - 1 else cs_mean
            score *= max(term, 0.0) ** w[level]
            if level < n_scales - 1:
                xa, xb = _downsample(xa), _downsample(xb)
        per_channel.append(score)
    return float(np.mean(per_channel))


def levenshtein(a: str, b: str) -> int:
    """Unit-cost edit distance."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1,
                           prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def normalized_edit_similarity(a: str, b: str) -> float:
    """1 - levenshtein / max(len); two empty strings count as a perfect match."""
    denom = max(len(a), len(b))
    if denom == 0:
        return 1.0
    return 1.0 - levenshtein(a, b) / denom


def rendering_accuracy(predicted: Sequence[str],
                       target: Sequence[str]) -> Tuple[float, float]:
    """Word accuracy (%, case-sensitive exact match) and mean edit similarity."""
    if len(predicted) != len(target):
        raise ValueError("prediction/target lists differ in length")
    if not predicted:
        raise ValueError("empty text lists")
    hits = sum(p == t for p, t in zip(predicted, target))
    neds = [normalized_edit_similarity(p, t) for p, t in zip(predicted, target)]
    return 100.0 * hits / len(predicted), math.fsum(neds) / len(neds)


def frechet_distance(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Frechet distance between gaussians fit to two feature populations.

    Expects (n_samples, dim) arrays from some external feature extractor.
    """
    fa = np.asarray(features_a, dtype=np.float64)
    fb = np.asarray(features_b, dtype=np.float64)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise ValueError("feature arrays must be (n, dim) with matching dim")
    if fa.shape[0] < 2 or fb.shape[0] < 2:
        raise ValueError("need at least two samples per population")
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    cov_a = np.cov(fa, rowvar=False)
    cov_b = np.cov(fb, rowvar=False)
    cov_a = np.atleast_2d(cov_a)
    cov_b = np.atleast_2d(cov_b)
    covmean, _ = _linalg.sqrtm(cov_a @ cov_b, disp=False)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    diff = mu_a - mu_b
    val = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(covmean)
    return float(max(val, 0.0))
