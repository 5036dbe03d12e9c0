"""Online training augmentation for both modalities, fully seeded.

Images (float32, channels-first, values in [0,1]) go through resize and
center crop, then random rotation, motion blur, and color jitter, then a
bank of environmental effects (brightness shift, polygonal shadow, rain
streaks, fog blend, radial flare, directional speed blur) each applied
independently with probability ``p_env``. IMU windows get Gaussian
jitter, per-channel scaling, and a piecewise-linear magnitude warp.

Evaluation uses ``preprocess_image`` (resize + crop) only. Augmentation
never touches labels or segment ids; it only sees raw arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Fixed internals of the environmental effects (draw ranges). Strengths
# are desk-scale: harsh enough to teach corruption-aware gating, mild
# enough that a from-scratch CNN still learns the textures from a few
# hundred samples.
ENV_BRIGHTNESS_DELTA = 0.15
ENV_SHADOW_STRENGTH = (0.2, 0.45)
ENV_RAIN_COUNT = (8, 20)
ENV_RAIN_LENGTH = (6, 14)
ENV_RAIN_BRIGHTNESS = 0.85
ENV_RAIN_ALPHA = 0.35
ENV_FOG_ALPHA = (0.1, 0.45)
ENV_FOG_GRAY = 0.75
ENV_FLARE_STRENGTH = (0.15, 0.35)
ENV_FLARE_RADIUS = (0.2, 0.5)
ENV_SPEED_BLUR_LEN = (3, 7)


@dataclass(frozen=True)
class AugmentConfig:
    image_size: int = 64
    rotation_deg: float = 8.0
    motion_blur_len: int = 3
    brightness_range: tuple = (0.85, 1.15)
    contrast_range: tuple = (0.85, 1.15)
    saturation_range: tuple = (0.85, 1.15)
    p_env: float = 0.7
    imu_jitter_sigma: float = 0.05
    imu_scale_range: tuple = (0.7, 1.3)
    imu_warp_knots: int = 4
    # a wide warp sigma occasionally crushes a whole window, so training
    # sees unreliable-IMU samples and the gate learns to be sample-dependent
    imu_warp_sigma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_env <= 1.0:
            raise ValueError(f"p_env must be in [0,1], got {self.p_env}")
        for name in ("brightness_range", "contrast_range", "saturation_range", "imu_scale_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is not well-ordered: {lo} > {hi}")
        if self.imu_scale_range[0] <= 0.0:
            raise ValueError("imu_scale_range must be positive")
        for name in ("rotation_deg", "imu_jitter_sigma", "imu_warp_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.imu_warp_knots < 2:
            raise ValueError("imu_warp_knots must be >= 2")
        if self.image_size < 1:
            raise ValueError("image_size must be >= 1")


def identity_config(image_size: int = 64) -> AugmentConfig:
    """Degenerate config: every op reduces to resize/crop or identity."""
    return AugmentConfig(image_size=image_size, rotation_deg=0.0, motion_blur_len=0,
                         brightness_range=(1.0, 1.0), contrast_range=(1.0, 1.0),
                         saturation_range=(1.0, 1.0), p_env=0.0, imu_jitter_sigma=0.0,
                         imu_scale_range=(1.0, 1.0), imu_warp_knots=4, imu_warp_sigma=0.0)


# -- geometry ----------------------------------------------------------------


def _bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample (3,H,W) at float coordinates with edge clamping."""
    _, h, w = img.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(np.float32)
    wx = (xs - x0).astype(np.float32)
    top = img[:, y0, x0] * (1 - wx) + img[:, y0, x1] * wx
    bot = img[:, y1, x0] * (1 - wx) + img[:, y1, x1] * wx
    return top * (1 - wy) + bot * wy


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    _, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    sy = h / out_h
    sx = w / out_w
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * sy - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * sx - 0.5
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    return _bilinear_sample(img, grid_y, grid_x)


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    _, h, w = img.shape
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop target {size}")
    y0 = (h - size) // 2
    x0 = (w - size) // 2
    return img[:, y0:y0 + size, x0:x0 + size]


def preprocess_image(img: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    """Evaluation-path geometry: resize the short side, then center crop."""
    img = np.asarray(img, dtype=np.float32)
    _, h, w = img.shape
    scale = cfg.image_size / min(h, w)
    img = resize_bilinear(img, max(cfg.image_size, round(h * scale)),
                          max(cfg.image_size, round(w * scale)))
    return np.ascontiguousarray(center_crop(img, cfg.image_size), dtype=np.float32)


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image center, bilinear with edge-clamp fill."""
    _, h, w = img.shape
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    yr = yy - cy
    xr = xx - cx
    src_y = cy + yr * np.cos(theta) - xr * np.sin(theta)
    src_x = cx + yr * np.sin(theta) + xr * np.cos(theta)
    return _bilinear_sample(img, src_y, src_x)


def _line_kernel(length: int, angle_rad: float) -> np.ndarray:
    k = np.zeros((length, length), dtype=np.float32)
    c = (length - 1) / 2.0
    ts = np.linspace(-c, c, 2 * length)
    ys = np.clip(np.round(c + ts * np.sin(angle_rad)).astype(int), 0, length - 1)
    xs = np.clip(np.round(c + ts * np.cos(angle_rad)).astype(int), 0, length - 1)
    k[ys, xs] = 1.0
    return k / k.sum()


def _convolve2d_edge(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(img, ((0, 0), (ph, ph), (pw, pw)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    return np.einsum("chwij,ij->chw", win, kernel).astype(np.float32)


def motion_blur(img: np.ndarray, length: int, angle_rad: float) -> np.ndarray:
    if length < 2:
        return img
    length |= 1  # odd kernels keep the image size
    return _convolve2d_edge(img, _line_kernel(length, angle_rad))


def color_jitter(img: np.ndarray, brightness: float, contrast: float,
                 saturation: float) -> np.ndarray:
    out = img * brightness
    mean = out.mean()
    out = (out - mean) * contrast + mean
    luma = (0.299 * out[0] + 0.587 * out[1] + 0.114 * out[2])[None]
    return luma + (out - luma) * saturation


# -- environmental effects -----------------------------------------------------


def effect_brightness(img: np.ndarray, delta: float) -> np.ndarray:
    """Additive global shift; the mean moves by exactly delta before clamping."""
    return img + delta


def effect_shadow(img: np.ndarray, polygon: np.ndarray, strength: float) -> np.ndarray:
    """Darken the interior of a convex polygon (vertices as (y,x) rows)."""
    _, h, w = img.shape
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    inside = np.ones((h, w), dtype=bool)
    m = len(polygon)
    for i in range(m):
        y0, x0 = polygon[i]
        y1, x1 = polygon[(i + 1) % m]
        cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
        inside &= cross >= 0
    out = img.copy()
    out[:, inside] *= 1.0 - strength
    return out


def effect_rain(img: np.ndarray, streaks: np.ndarray,
                brightness: float = ENV_RAIN_BRIGHTNESS,
                alpha: float = ENV_RAIN_ALPHA) -> np.ndarray:
    """Blend bright line segments; streak rows are (y0, x0, length, angle_rad)."""
    _, h, w = img.shape
    out = img.copy()
    for y0, x0, length, angle in streaks:
        steps = np.arange(int(length))
        ys = np.clip(np.round(y0 + steps * np.sin(angle)).astype(int), 0, h - 1)
        xs = np.clip(np.round(x0 + steps * np.cos(angle)).astype(int), 0, w - 1)
        out[:, ys, xs] = (1 - alpha) * out[:, ys, xs] + alpha * brightness
    return out


def draw_rain_streaks(rng: np.random.Generator, h: int, w: int,
                      count_range=ENV_RAIN_COUNT, length_range=ENV_RAIN_LENGTH) -> np.ndarray:
    count = int(rng.integers(count_range[0], count_range[1] + 1))
    streaks = np.zeros((count, 4))
    streaks[:, 0] = rng.uniform(0, h, count)
    streaks[:, 1] = rng.uniform(0, w, count)
    streaks[:, 2] = rng.uniform(length_range[0], length_range[1], count)
    streaks[:, 3] = rng.uniform(np.deg2rad(60), np.deg2rad(80), count)
    return streaks


def effect_fog(img: np.ndarray, alpha: float, gray: float = ENV_FOG_GRAY) -> np.ndarray:
    return img * (1.0 - alpha) + gray * alpha


def effect_flare(img: np.ndarray, cy: float, cx: float, radius: float,
                 strength: float) -> np.ndarray:
    """Additive radial bright blob centered at (cy, cx)."""
    _, h, w = img.shape
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dist2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / max(radius, 1e-6) ** 2
    halo = strength * np.exp(-dist2).astype(np.float32)
    return img + halo[None]


def effect_speed_blur(img: np.ndarray, length: int) -> np.ndarray:
    """Horizontal directional blur mimicking forward motion."""
    return motion_blur(img, length, 0.0)


def augment_image(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Full training-time image pipeline; deterministic given (img, cfg, rng state)."""
    img = preprocess_image(img, cfg)
    size = cfg.image_size

    if cfg.rotation_deg > 0:
        img = rotate(img, float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)))
    if cfg.motion_blur_len >= 2:
        img = motion_blur(img, cfg.motion_blur_len, float(rng.uniform(0, np.pi)))
    img = color_jitter(img,
                       float(rng.uniform(*cfg.brightness_range)),
                       float(rng.uniform(*cfg.contrast_range)),
                       float(rng.uniform(*cfg.saturation_range)))

    if rng.random() < cfg.p_env:
        img = effect_brightness(img, float(rng.uniform(-ENV_BRIGHTNESS_DELTA, ENV_BRIGHTNESS_DELTA)))
    if rng.random() < cfg.p_env:
        center = rng.uniform(0, size, size=2)
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=4))
        radii = rng.uniform(size * 0.2, size * 0.7, size=4)
        polygon = np.stack([center[0] + radii * np.sin(angles),
                            center[1] + radii * np.cos(angles)], axis=1)
        img = effect_shadow(img, polygon, float(rng.uniform(*ENV_SHADOW_STRENGTH)))
    if rng.random() < cfg.p_env:
        img = effect_rain(img, draw_rain_streaks(rng, size, size))
    if rng.random() < cfg.p_env:
        img = effect_fog(img, float(rng.uniform(*ENV_FOG_ALPHA)))
    if rng.random() < cfg.p_env:
        cy, cx = rng.uniform(0, size, size=2)
        radius = float(rng.uniform(*ENV_FLARE_RADIUS)) * size
        img = effect_flare(img, cy, cx, radius, float(rng.uniform(*ENV_FLARE_STRENGTH)))
    if rng.random() < cfg.p_env:
        length = int(rng.integers(ENV_SPEED_BLUR_LEN[0], ENV_SPEED_BLUR_LEN[1] + 1))
        img = effect_speed_blur(img, length)

    return np.clip(img, 0.0, 1.0).astype(np.float32)


# -- IMU transforms --------------------------------------------------------------


def jitter(signal: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. Gaussian noise N(0, sigma^2) per element."""
    if sigma < 0:
        raise ValueError("jitter sigma must be >= 0")
    return (signal + rng.normal(0.0, sigma, size=signal.shape)).astype(np.float32)


def scale(signal: np.ndarray, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    """Multiply each channel by one factor drawn uniformly from [lo, hi]."""
    if lo <= 0 or hi <= 0:
        raise ValueError("scale range must be positive")
    factors = rng.uniform(lo, hi, size=(signal.shape[0], 1))
    return (signal * factors).astype(np.float32)


def warp_envelope(length: int, knots: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Piecewise-linear envelope through knot values drawn from N(1, sigma^2)."""
    if knots < 2:
        raise ValueError("magnitude warp needs >= 2 knots")
    positions = np.linspace(0.0, length - 1.0, knots)
    values = rng.normal(1.0, sigma, size=knots)
    return np.interp(np.arange(length, dtype=np.float64), positions, values)


def magnitude_warp(signal: np.ndarray, knots: int, sigma: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Multiply the window by a smooth time envelope, shared across channels."""
    env = warp_envelope(signal.shape[1], knots, sigma, rng)
    return (signal * env[None, :]).astype(np.float32)


def augment_imu(signal: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Training-time IMU pipeline: jitter, per-channel scale, magnitude warp."""
    out = jitter(np.asarray(signal, dtype=np.float32), cfg.imu_jitter_sigma, rng)
    out = scale(out, *cfg.imu_scale_range, rng)
    return magnitude_warp(out, cfg.imu_warp_knots, cfg.imu_warp_sigma, rng)


def sample_rng(*keys: int) -> np.random.Generator:
    """Generator keyed on (seed, epoch, sample ordinal, ...) so per-sample
    augmentation parallelizes deterministically."""
    return np.random.default_rng(tuple(int(k) for k in keys))
