"""Seeded stochastic image transforms and the augmentation pipelines.

Images are float arrays of shape (H, W, C) with C in {1, 3}, values in
[0, 1]; every transform clamps back into that range. All randomness comes
from an explicit SeededRng, and each transform consumes its draws in a
fixed documented order, so a pipeline applied with the same seed is
bit-identical across runs and refactors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import SeededRng


def check_image(img: np.ndarray) -> np.ndarray:
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, C) image with C in {{1, 3}}, got shape {img.shape}")
    return img


def _clamp01(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# single transforms
#
# rng consumption, in order, per call:
#   flip/invert: 1 uniform (gate)
#   resized_crop: area fraction, log-aspect, top, left
#   gaussian_blur: sigma
#   color_distortion: op order permutation, then one factor per jitter op
#   random_affine: angle


def random_horizontal_flip(img: np.ndarray, p: float, rng: SeededRng) -> np.ndarray:
    check_image(img)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"flip probability {p} outside [0, 1]")
    if rng.uniform() < p:
        return np.ascontiguousarray(img[:, ::-1, :])
    return img.copy()


def random_color_invert(img: np.ndarray, p: float, rng: SeededRng) -> np.ndarray:
    check_image(img)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"invert probability {p} outside [0, 1]")
    if rng.uniform() < p:
        return 1.0 - img
    return img.copy()


def _bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample (H, W, C) at float coordinates, clamping to the border."""
    h, w = img.shape[:2]
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    wy = (ys - y0)[..., None]
    wx = (xs - x0)[..., None]
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    top = img[y0c, x0c] * (1 - wx) + img[y0c, x1c] * wx
    bot = img[y1c, x0c] * (1 - wx) + img[y1c, x1c] * wx
    return top * (1 - wy) + bot * wy


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    check_image(img)
    h, w = img.shape[:2]
    # pixel-center mapping: constant images stay constant for any scale
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    out = _bilinear_sample(img.astype(np.float64), grid_y, grid_x)
    return _clamp01(out).astype(img.dtype)


def random_resized_crop(
    img: np.ndarray,
    scale_min: float,
    scale_max: float,
    out_h: int,
    out_w: int,
    rng: SeededRng,
    aspect_min: float = 3.0 / 4.0,
    aspect_max: float = 4.0 / 3.0,
) -> np.ndarray:
    check_image(img)
    if not (0.0 < scale_min <= scale_max <= 1.0):
        raise ValueError(f"invalid crop scale interval [{scale_min}, {scale_max}]")
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be >= 1")
    h, w = img.shape[:2]
    area = rng.uniform(scale_min, scale_max) * h * w
    log_ratio = rng.uniform(math.log(aspect_min), math.log(aspect_max))
    ratio = math.exp(log_ratio)
    ch = int(round(math.sqrt(area / ratio)))
    cw = int(round(math.sqrt(area * ratio)))
    ch = max(1, min(ch, h))
    cw = max(1, min(cw, w))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = img[top:top + ch, left:left + cw, :]
    return resize_bilinear(crop, out_h, out_w)


def gaussian_blur(img: np.ndarray, sigma_min: float, sigma_max: float, rng: SeededRng) -> np.ndarray:
    check_image(img)
    if not (0.0 < sigma_min <= sigma_max):
        raise ValueError(f"invalid sigma interval [{sigma_min}, {sigma_max}]")
    sigma = rng.uniform(sigma_min, sigma_max)
    radius = int(math.ceil(3.0 * sigma))
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (d / sigma) ** 2)
    kernel /= kernel.sum()
    # separable pass, clamp-to-border via edge padding
    work = img.astype(np.float64)
    padded = np.pad(work, ((radius, radius), (0, 0), (0, 0)), mode="edge")
    work = sum(kernel[i] * padded[i:i + img.shape[0]] for i in range(kernel.size))
    padded = np.pad(work, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    work = sum(kernel[i] * padded[:, i:i + img.shape[1]] for i in range(kernel.size))
    return _clamp01(work).astype(img.dtype)


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    maxc = np.max(img, axis=-1)
    minc = np.min(img, axis=-1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.maximum(maxc, 1e-12), 0.0)
    # hue in [0, 1)
    safe = np.maximum(delta, 1e-12)
    hr = ((g - b) / safe) % 6.0
    hg = (b - r) / safe + 2.0
    hb = (r - g) / safe + 4.0
    h = np.where(maxc == r, hr, np.where(maxc == g, hg, hb)) / 6.0
    h = np.where(delta == 0, 0.0, h)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(img: np.ndarray) -> np.ndarray:
    h, s, v = img[..., 0], img[..., 1], img[..., 2]
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def color_distortion(img: np.ndarray, strength: float, rng: SeededRng) -> np.ndarray:
    """Brightness/contrast/saturation/hue jitter in a random order.

    Factors ~ U[max(0, 1-0.8s), 1+0.8s]; hue shift ~ U[-0.2s, 0.2s] turns.
    """
    check_image(img)
    if strength < 0:
        raise ValueError("strength must be non-negative")
    if img.shape[2] != 3:
        raise ValueError("color_distortion requires an RGB image")
    order = rng.permutation(4)
    lo = max(0.0, 1.0 - 0.8 * strength)
    hi = 1.0 + 0.8 * strength
    out = img.astype(np.float64)
    for op in order:
        if op == 0:  # brightness
            out = out * rng.uniform(lo, hi)
        elif op == 1:  # contrast: blend with the mean gray level
            f = rng.uniform(lo, hi)
            mean = out.mean()
            out = mean + (out - mean) * f
        elif op == 2:  # saturation: blend with per-pixel gray
            f = rng.uniform(lo, hi)
            gray = out.mean(axis=-1, keepdims=True)
            out = gray + (out - gray) * f
        else:  # hue rotation
            delta = rng.uniform(-0.2 * strength, 0.2 * strength)
            hsv = rgb_to_hsv(_clamp01(out))
            hsv[..., 0] = (hsv[..., 0] + delta) % 1.0
            out = hsv_to_rgb(hsv)
        out = _clamp01(out)
    return out.astype(img.dtype)


def random_affine(img: np.ndarray, max_degrees: float, rng: SeededRng) -> np.ndarray:
    """Rotation by U[-max_degrees, +max_degrees] about the image center,
    bilinear sampling, out-of-bounds filled with the corner-pixel mean."""
    check_image(img)
    if not 0.0 <= max_degrees <= 180.0:
        raise ValueError(f"max_degrees {max_degrees} outside [0, 180]")
    angle = math.radians(rng.uniform(-max_degrees, max_degrees))
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    # inverse map: rotate output coords by -angle
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    src_y = cy + (yy - cy) * cos_a - (xx - cx) * sin_a
    src_x = cx + (yy - cy) * sin_a + (xx - cx) * cos_a
    work = img.astype(np.float64)
    sampled = _bilinear_sample(work, src_y, src_x)
    fill = work[[0, 0, -1, -1], [0, -1, 0, -1], :].mean(axis=0)
    outside = (src_y < 0) | (src_y > h - 1) | (src_x < 0) | (src_x > w - 1)
    sampled[outside] = fill
    return _clamp01(sampled).astype(img.dtype)


# ---------------------------------------------------------------------------
# pipelines


@dataclass(frozen=True)
class TransformStep:
    kind: str                      # hflip | invert | resized_crop | blur | color | affine
    p: float = 1.0
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class AugmentationPipeline:
    """Ordered seeded transform list; the query-generation function."""

    steps: tuple[TransformStep, ...]

    def __post_init__(self):
        for s in self.steps:
            if not 0.0 <= s.p <= 1.0:
                raise ValueError(f"step '{s.kind}' probability {s.p} outside [0, 1]")


_GRAYSCALE_OK = {"hflip", "invert", "resized_crop", "blur", "affine"}


def apply_pipeline(img: np.ndarray, pipeline: AugmentationPipeline, rng: SeededRng) -> np.ndarray:
    """Apply steps in declared order; each step consumes rng draws in the
    order documented on its transform (gate draw first for gated kinds)."""
    check_image(img)
    out = img.copy()
    for step in pipeline.steps:
        if img.shape[2] == 1 and step.kind not in _GRAYSCALE_OK:
            raise ValueError(f"step '{step.kind}' requires an RGB image")
        if step.kind == "hflip":
            out = random_horizontal_flip(out, step.p, rng)
            continue
        if step.kind == "invert":
            out = random_color_invert(out, step.p, rng)
            continue
        # other kinds gate on p first (one draw), then apply
        if step.p < 1.0 and rng.uniform() >= step.p:
            continue
        if step.kind == "resized_crop":
            pr = step.params
            out = random_resized_crop(
                out, pr["scale_min"], pr["scale_max"],
                pr.get("out_h", out.shape[0]), pr.get("out_w", out.shape[1]), rng,
                pr.get("aspect_min", 3.0 / 4.0), pr.get("aspect_max", 4.0 / 3.0))
        elif step.kind == "blur":
            pr = step.params
            out = gaussian_blur(out, pr["sigma_min"], pr["sigma_max"], rng)
        elif step.kind == "color":
            out = color_distortion(out, step.params["strength"], rng)
        elif step.kind == "affine":
            out = random_affine(out, step.params["max_degrees"], rng)
        else:
            raise ValueError(f"unknown transform kind '{step.kind}'")
    return out


def preset_pipeline(kind: str) -> AugmentationPipeline:
    """The three shipped recipes: ours_rgb, simclr_rgb, omniglot_affine."""
    crop = TransformStep("resized_crop", 1.0, {"scale_min": 0.5, "scale_max": 1.0})
    blur = TransformStep("blur", 1.0, {"sigma_min": 0.1, "sigma_max": 2.0})
    color = TransformStep("color", 1.0, {"strength": 1.0})
    if kind == "ours_rgb":
        return AugmentationPipeline((
            TransformStep("hflip", 0.5),
            TransformStep("invert", 0.5),
            crop, blur, color,
        ))
    if kind == "simclr_rgb":
        return AugmentationPipeline((crop, blur, color))
    if kind == "omniglot_affine":
        return AugmentationPipeline((
            TransformStep("affine", 1.0, {"max_degrees": 30.0}),
        ))
    raise ValueError(f"unknown preset '{kind}'")


IDENTITY_PIPELINE = AugmentationPipeline(())


def pixel_histogram(img: np.ndarray, bins: int) -> np.ndarray:
    """Per-channel counts over ``bins`` equal-width bins covering [0, 1]."""
    check_image(img)
    if bins < 1:
        raise ValueError("bins must be >= 1")
    c = img.shape[2]
    out = np.empty((c, bins), dtype=np.int64)
    for ch in range(c):
        out[ch], _ = np.histogram(img[:, :, ch], bins=bins, range=(0.0, 1.0))
    return out
