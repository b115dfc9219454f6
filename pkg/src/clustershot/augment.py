"""Stochastic augmentation policy for pre-training views.

SimCLR-family pipeline: random resized crop, horizontal flip, color jitter,
random grayscale. Single-channel inputs get the luminance-only subset
(crop + brightness/contrast); hue, saturation and grayscale conversion are
structural no-ops there. Every transform preserves image shape and the
[0, 1] value range.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class AugmentationPolicy:
    crop_scale: tuple[float, float] = (0.5, 1.0)
    crop_ratio: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    hflip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_prob: float = 0.2

    @classmethod
    def for_profile(cls, profile) -> "AugmentationPolicy":
        """Default policy for a dataset profile; flips off for character data."""
        policy = cls()
        if not profile.flip_safe:
            policy = replace(policy, hflip_prob=0.0)
        return policy

    def apply(self, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One independently sampled view of ``image`` (H, W, C in [0, 1])."""
        out = _random_resized_crop(image, self.crop_scale, self.crop_ratio, rng)
        if self.hflip_prob > 0 and rng.random() < self.hflip_prob:
            out = out[:, ::-1, :]
        out = _color_jitter(out, self.brightness, self.contrast, self.saturation, self.hue, rng)
        if image.shape[2] == 3 and self.grayscale_prob > 0 and rng.random() < self.grayscale_prob:
            out = np.repeat(_luminance(out), 3, axis=2)
        return np.clip(out, 0.0, 1.0).astype(np.float32)


def _resize(image: np.ndarray, h: int, w: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    t = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    return t[0].permute(1, 2, 0).numpy()


def _random_resized_crop(
    image: np.ndarray,
    scale: tuple[float, float],
    ratio: tuple[float, float],
    rng: np.random.Generator,
) -> np.ndarray:
    h, w = image.shape[:2]
    area = h * w
    for _ in range(10):
        target_area = area * rng.uniform(scale[0], scale[1])
        log_ratio = rng.uniform(np.log(ratio[0]), np.log(ratio[1]))
        aspect = np.exp(log_ratio)
        cw = int(round(np.sqrt(target_area * aspect)))
        ch = int(round(np.sqrt(target_area / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            crop = image[top : top + ch, left : left + cw, :]
            return _resize(crop, h, w)
    return image.astype(np.float32, copy=True)  # fallback: full frame


def _luminance(image: np.ndarray) -> np.ndarray:
    if image.shape[2] == 1:
        return image
    weights = np.array([0.299, 0.587, 0.114], dtype=np.float32)
    return (image @ weights)[:, :, None]


def _color_jitter(
    image: np.ndarray,
    brightness: float,
    contrast: float,
    saturation: float,
    hue: float,
    rng: np.random.Generator,
) -> np.ndarray:
    out = image.astype(np.float32, copy=True)
    if brightness > 0:
        out = out * rng.uniform(max(0.0, 1 - brightness), 1 + brightness)
    if contrast > 0:
        factor = rng.uniform(max(0.0, 1 - contrast), 1 + contrast)
        mean = float(_luminance(out).mean())
        out = (out - mean) * factor + mean
    if out.shape[2] == 3:
        if saturation > 0:
            factor = rng.uniform(max(0.0, 1 - saturation), 1 + saturation)
            gray = _luminance(out)
            out = gray + (out - gray) * factor
        if hue > 0:
            out = _shift_hue(np.clip(out, 0.0, 1.0), rng.uniform(-hue, hue))
    return out


def _shift_hue(rgb: np.ndarray, shift: float) -> np.ndarray:
    """Rotate hue by ``shift`` (fraction of a full turn) via HSV round-trip."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=2)
    minc = rgb.min(axis=2)
    v = maxc
    span = maxc - minc
    s = np.where(maxc > 0, span / np.maximum(maxc, 1e-12), 0.0)
    safe = np.maximum(span, 1e-12)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(span > 0, (h / 6.0) % 1.0, 0.0)

    h = (h + shift) % 1.0

    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int32) % 6
    r2 = np.choose(i, [v, q, p, p, t, v])
    g2 = np.choose(i, [t, v, v, q, p, p])
    b2 = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r2, g2, b2], axis=2)
