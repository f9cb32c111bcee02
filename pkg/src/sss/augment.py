"""Weak/strong image augmentation and complementary channel dropout.

Images are 2D ``H x W`` arrays or stacks ``F x H x W`` (frames share one
geometric transform). All randomness comes from an explicit
``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage


@dataclass(frozen=True)
class WeakConfig:
    scale_range: tuple[float, float] = (0.5, 2.0)
    flip_prob: float = 0.5
    crop_size: int | None = None  # None keeps the input size


@dataclass(frozen=True)
class StrongConfig:
    jitter_prob: float = 0.8
    brightness: float = 0.25
    contrast: float = 0.25
    gamma: float = 0.25
    gray_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    cutmix_prob: float = 0.5
    cutmix_area: tuple[float, float] = (0.02, 0.4)
    cutmix_aspect: tuple[float, float] = (0.3, 1 / 0.3)


@dataclass(frozen=True)
class GeometricTransform:
    """Resize by ``scale``, pad/crop to ``out_size`` at ``offset``, optional horizontal flip."""

    in_size: tuple[int, int]
    scale: float
    resized: tuple[int, int]
    offset: tuple[int, int]  # top-left of the crop in the padded resized frame
    out_size: tuple[int, int]
    flip: bool

    def apply(self, arr: np.ndarray, order: int = 1) -> np.ndarray:
        """Replay on an image (``order=1``) or on labels (``order=0``, nearest)."""
        arr = np.asarray(arr)
        lead = arr.shape[:-2]
        h, w = arr.shape[-2:]
        if (h, w) != self.in_size:
            raise ValueError(f"transform built for {self.in_size}, got {(h, w)}")
        rh, rw = self.resized
        if (rh, rw) != (h, w):
            zoom = (1.0,) * len(lead) + (rh / h, rw / w)
            out = ndimage.zoom(arr, zoom, order=order, mode="nearest", grid_mode=False)
            out = out[..., :rh, :rw]
        else:
            out = arr.copy()
        oh, ow = self.out_size
        ph, pw = max(0, oh - rh), max(0, ow - rw)
        if ph or pw:
            pad = [(0, 0)] * len(lead) + [(0, ph), (0, pw)]
            out = np.pad(out, pad, mode="constant", constant_values=0)
        y, x = self.offset
        out = out[..., y:y + oh, x:x + ow]
        if self.flip:
            out = out[..., ::-1]
        return np.ascontiguousarray(out).astype(arr.dtype, copy=False)


def sample_geometry(shape: tuple[int, int], rng: np.random.Generator,
                    cfg: WeakConfig = WeakConfig()) -> GeometricTransform:
    h, w = shape
    lo, hi = cfg.scale_range
    scale = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    rh, rw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    oh = ow = cfg.crop_size if cfg.crop_size else None
    if oh is None:
        oh, ow = h, w
    y = int(rng.integers(0, max(rh, oh) - oh + 1))
    x = int(rng.integers(0, max(rw, ow) - ow + 1))
    flip = bool(rng.random() < cfg.flip_prob)
    return GeometricTransform((h, w), scale, (rh, rw), (y, x), (oh, ow), flip)


def weak_augment(image: np.ndarray, rng: np.random.Generator,
                 cfg: WeakConfig = WeakConfig()) -> tuple[np.ndarray, GeometricTransform]:
    """Random resize in ``scale_range``, random crop (padding first if needed), random flip.

    The returned transform replays the same geometry on labels or pseudo-labels.
    """
    geom = sample_geometry(np.shape(image)[-2:], rng, cfg)
    return geom.apply(image, order=1), geom


# --------------------------------------------------------------------------
# photometric ops


def hflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(image)[..., ::-1])


def color_jitter(image: np.ndarray, brightness: float, contrast: float, gamma: float) -> np.ndarray:
    """Brightness shift, contrast scaling about the mean, gamma; clipped to [0, 1]."""
    out = np.clip(image, 0.0, 1.0) ** gamma
    mean = out.mean(axis=(-2, -1), keepdims=True)
    out = (out - mean) * contrast + mean + brightness
    return np.clip(out, 0.0, 1.0)


def grayscale(image: np.ndarray) -> np.ndarray:
    """Luma conversion for channel-last RGB; scalar images are already gray."""
    image = np.asarray(image)
    if image.ndim >= 3 and image.shape[-1] == 3:
        luma = image @ np.array([0.299, 0.587, 0.114], dtype=image.dtype)
        return np.repeat(luma[..., None], 3, axis=-1)
    return image.copy()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    # reflect (half-sample symmetric) padding keeps the blur mean-preserving
    image = np.asarray(image)
    sig = (0.0,) * (image.ndim - 2) + (sigma, sigma)
    return ndimage.gaussian_filter(image, sig, mode="reflect")


def cutmix_box(shape: tuple[int, int], rng: np.random.Generator,
               area: tuple[float, float], aspect: tuple[float, float]) -> np.ndarray:
    """Binary mask: True keeps the source pixel, False takes the donor pixel."""
    h, w = shape
    frac = rng.uniform(*area)
    ratio = np.exp(rng.uniform(np.log(aspect[0]), np.log(aspect[1])))
    bh = int(round(np.sqrt(frac * h * w * ratio)))
    bw = int(round(np.sqrt(frac * h * w / ratio)))
    bh, bw = min(bh, h), min(bw, w)
    y = int(rng.integers(0, h - bh + 1))
    x = int(rng.integers(0, w - bw + 1))
    return box_mask(shape, y, x, bh, bw)


def box_mask(shape: tuple[int, int], y: int, x: int, bh: int, bw: int) -> np.ndarray:
    mask = np.ones(shape, dtype=bool)
    mask[y:y + bh, x:x + bw] = False
    return mask


def strong_augment(image: np.ndarray, rng: np.random.Generator, peer_image: np.ndarray,
                   cfg: StrongConfig = StrongConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Photometric jitter, grayscale, blur, then CutMix with ``peer_image``.

    Returns the augmented image and a boolean provenance mask (True where the
    pixel comes from ``image``). Photometric ops touch only the source.
    """
    image = np.asarray(image)
    peer_image = np.asarray(peer_image)
    if image.shape != peer_image.shape:
        raise ValueError(f"CutMix donor shape {peer_image.shape} != image shape {image.shape}")
    out = image.astype(np.float64)
    if rng.random() < cfg.jitter_prob:
        b = rng.uniform(-cfg.brightness, cfg.brightness)
        c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
        g = np.exp(rng.uniform(np.log(1 - cfg.gamma), np.log(1 + cfg.gamma)))
        out = color_jitter(out, b, c, g)
    if rng.random() < cfg.gray_prob:
        out = grayscale(out)
    if rng.random() < cfg.blur_prob:
        out = gaussian_blur(out, rng.uniform(*cfg.blur_sigma))
    shape = image.shape[-2:]
    if rng.random() < cfg.cutmix_prob:
        mix = cutmix_box(shape, rng, cfg.cutmix_area, cfg.cutmix_aspect)
    else:
        mix = np.ones(shape, dtype=bool)
    out = np.where(mix, out, peer_image).astype(image.dtype)
    return out, mix


@dataclass
class AugmentedPair:
    x_w: np.ndarray
    x_s1: np.ndarray
    x_s2: np.ndarray
    mix_masks: tuple[np.ndarray, np.ndarray] | None = None


def augment_pair(x_w: np.ndarray, rng: np.random.Generator, peer_w: np.ndarray,
                 cfg: StrongConfig = StrongConfig()) -> AugmentedPair:
    """Two independent strong views of the same weak view."""
    s1, m1 = strong_augment(x_w, rng, peer_w, cfg)
    s2, m2 = strong_augment(x_w, rng, peer_w, cfg)
    return AugmentedPair(x_w, s1, s2, (m1, m2))


# --------------------------------------------------------------------------
# feature-level augmentation


def complementary_masks(batch: int, channels: int, p: float,
                        rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample channel multipliers for the two views, shape ``(batch, channels)``.

    A channel is dropped in view 1 when ``u < p`` and in view 2 when ``u >= 1 - p``
    for one shared uniform draw ``u``, so the dropped sets never intersect.
    Survivors are rescaled by ``C / (C - dropped)``.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p > 0.5:
        raise ValueError(f"complementary dropout needs p <= 0.5 for disjoint drop sets, got {p}")
    u = rng.random((batch, channels))
    keep1 = ~(u < p)
    keep2 = ~(u >= 1.0 - p) if p > 0 else np.ones_like(keep1)
    return _rescale(keep1), _rescale(keep2)


def _rescale(keep: np.ndarray) -> np.ndarray:
    c = keep.shape[1]
    kept = keep.sum(axis=1, keepdims=True)
    scale = np.where(kept > 0, c / np.maximum(kept, 1), 0.0)
    return keep * scale


def complementary_dropout(features_view1, features_view2, p: float, rng: np.random.Generator):
    """Apply complementary channel dropout to two feature pyramids (lists of ``B x C x H x W``).

    Returns the two dropped pyramids and the per-level multiplier pairs.
    """
    if len(features_view1) != len(features_view2):
        raise ValueError("pyramids have different level counts")
    out1, out2, masks = [], [], []
    for f1, f2 in zip(features_view1, features_view2):
        if f1.shape != f2.shape:
            raise ValueError(f"level shapes differ: {tuple(f1.shape)} vs {tuple(f2.shape)}")
        if p == 0:
            out1.append(f1)
            out2.append(f2)
            masks.append(None)
            continue
        m1, m2 = complementary_masks(f1.shape[0], f1.shape[1], p, rng)
        t1 = torch.as_tensor(m1, dtype=f1.dtype, device=f1.device)[:, :, None, None]
        t2 = torch.as_tensor(m2, dtype=f2.dtype, device=f2.device)[:, :, None, None]
        out1.append(f1 * t1)
        out2.append(f2 * t2)
        masks.append((m1, m2))
    return out1, out2, masks
