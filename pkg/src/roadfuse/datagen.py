"""Synthetic paired dataset: procedural road textures + class-consistent
vibration signatures.

Class recipes:
  - Asphalt: low-variance gray texture with a lane stripe; IMU is
    N(0, 0.05^2) background noise.
  - BelgianBlocks: periodic brick grid with mortar lines; IMU adds
    periodic unit impulses whose period comes from a per-sample speed
    draw.
  - OffRoad: brown low-frequency noise with scattered stones; IMU is
    N(0, 0.4^2) plus random spikes.

Conditions degrade the vision signal only (night scales brightness,
rain overlays streaks); the IMU stream is lighting-invariant, which is
what gives fusion headroom over vision alone.

Samples are grouped into contiguous single-class, single-condition
segments. Class counts follow the priors by largest-remainder quota
over segments (sampling noise stays within any multinomial bound and
every class is represented at desk scale); per-sample rngs are derived
from (seed, sample index) so generation is byte-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import augment, dataio
from .dataio import DataError, Manifest, Sample, SampleRecord

CLASSES = ("Asphalt", "BelgianBlocks", "OffRoad")
CONDITIONS = ("day", "night", "rain", "night_rain")

# ROAD-style imbalance: Asphalt dominates, BelgianBlocks is the minority.
DEFAULT_PRIORS = (0.7967, 0.0855, 0.1178)


@dataclass(frozen=True)
class ClassSpec:
    label: str
    prior: float
    noise_sigma: float
    impulse_amp: float = 0.0
    impulse_period: tuple = (0, 0)
    spike_rate: float = 0.0
    spike_amp: tuple = (0.0, 0.0)


@dataclass(frozen=True)
class DatagenConfig:
    image_size: int = 64
    imu_channels: int = 6
    imu_window: int = 200
    sample_rate: float = 100.0
    # image recipes
    asphalt_gray: float = 0.45
    asphalt_noise: float = 0.02
    block_size: int = 12
    mortar_width: int = 2
    mortar_level: float = 0.15
    offroad_rgb: tuple = (0.45, 0.33, 0.20)
    stone_count: int = 25
    night_brightness: float = 0.25
    # vibration recipes
    asphalt_sigma: float = 0.05
    belgian_sigma: float = 0.05
    belgian_impulse_amp: float = 1.0
    belgian_period: tuple = (15, 30)
    offroad_sigma: float = 0.4
    offroad_spike_rate: float = 0.02
    offroad_spike_amp: tuple = (0.5, 1.5)
    condition_weights: tuple = (0.4, 0.25, 0.2, 0.15)

    def __post_init__(self):
        if abs(sum(self.condition_weights) - 1.0) > 1e-9:
            raise ValueError("condition_weights must sum to 1")
        if self.imu_window < 1 or self.imu_channels < 1 or self.image_size < 4:
            raise ValueError("degenerate DatagenConfig dimensions")

    def class_specs(self) -> dict:
        return {
            "Asphalt": ClassSpec("Asphalt", DEFAULT_PRIORS[0], self.asphalt_sigma),
            "BelgianBlocks": ClassSpec("BelgianBlocks", DEFAULT_PRIORS[1], self.belgian_sigma,
                                       impulse_amp=self.belgian_impulse_amp,
                                       impulse_period=self.belgian_period),
            "OffRoad": ClassSpec("OffRoad", DEFAULT_PRIORS[2], self.offroad_sigma,
                                 spike_rate=self.offroad_spike_rate,
                                 spike_amp=self.offroad_spike_amp),
        }


# -- image textures ---------------------------------------------------------------


def _asphalt_image(rng: np.random.Generator, cfg: DatagenConfig) -> np.ndarray:
    s = cfg.image_size
    base = cfg.asphalt_gray + rng.uniform(-0.05, 0.05)
    img = np.full((3, s, s), base, dtype=np.float32)
    img += rng.normal(0.0, cfg.asphalt_noise, size=(3, s, s)).astype(np.float32)
    # lane stripe: bright vertical band at a random offset
    x0 = int(rng.integers(s // 8, s - s // 8))
    width = max(2, s // 24)
    img[:, :, x0:x0 + width] = 0.85
    img[2, :, x0:x0 + width] = 0.55  # yellowish
    return img


def _belgian_image(rng: np.random.Generator, cfg: DatagenConfig) -> np.ndarray:
    s = cfg.image_size
    block = cfg.block_size
    img = np.empty((3, s, s), dtype=np.float32)
    phase_y = int(rng.integers(0, block))
    phase_x = int(rng.integers(0, block))
    rows = (np.arange(s) + phase_y) // block
    cols = (np.arange(s) + phase_x) // block
    # per-block brightness jitter makes the grid look laid by hand
    shades = 0.6 + 0.15 * rng.standard_normal((rows.max() + 1, cols.max() + 1))
    img[:] = shades[rows[:, None], cols[None, :]].astype(np.float32)
    mortar_y = ((np.arange(s) + phase_y) % block) < cfg.mortar_width
    mortar_x = ((np.arange(s) + phase_x) % block) < cfg.mortar_width
    img[:, mortar_y, :] = cfg.mortar_level
    img[:, :, mortar_x] = cfg.mortar_level
    img += rng.normal(0.0, 0.02, size=(3, s, s)).astype(np.float32)
    return img


def _offroad_image(rng: np.random.Generator, cfg: DatagenConfig) -> np.ndarray:
    s = cfg.image_size
    coarse = rng.normal(0.0, 0.15, size=(3, s // 8, s // 8)).astype(np.float32)
    lowfreq = np.repeat(np.repeat(coarse, 8, axis=1), 8, axis=2)
    img = np.asarray(cfg.offroad_rgb, dtype=np.float32)[:, None, None] + lowfreq
    img += rng.normal(0.0, 0.04, size=(3, s, s)).astype(np.float32)
    for _ in range(cfg.stone_count):
        y = int(rng.integers(1, s - 1))
        x = int(rng.integers(1, s - 1))
        shade = 0.7 if rng.random() < 0.5 else 0.15
        img[:, y - 1:y + 1, x - 1:x + 1] = shade
    return img


_IMAGE_BUILDERS = {
    "Asphalt": _asphalt_image,
    "BelgianBlocks": _belgian_image,
    "OffRoad": _offroad_image,
}


def _apply_condition(img: np.ndarray, condition: str, rng: np.random.Generator,
                     cfg: DatagenConfig) -> np.ndarray:
    if condition not in CONDITIONS:
        raise DataError(f"unknown condition {condition!r}")
    if "night" in condition:
        img = img * cfg.night_brightness
    if "rain" in condition:
        streaks = augment.draw_rain_streaks(rng, cfg.image_size, cfg.image_size)
        img = augment.effect_rain(img, streaks)
    return img


# -- vibration signatures ------------------------------------------------------------


def _imu_signature(label: str, rng: np.random.Generator, cfg: DatagenConfig) -> np.ndarray:
    c, t = cfg.imu_channels, cfg.imu_window
    spec = cfg.class_specs()[label]
    sig = rng.normal(0.0, spec.noise_sigma, size=(c, t)).astype(np.float32)
    if spec.impulse_amp > 0.0:
        period = int(rng.integers(spec.impulse_period[0], spec.impulse_period[1] + 1))
        phase = int(rng.integers(0, period))
        ticks = np.arange(phase, t, period)
        # shocks hit the accelerometer axes harder than the gyro axes
        gains = np.where(np.arange(c) % 6 < 3, 1.0, 0.5)
        sig[:, ticks] += spec.impulse_amp * gains[:, None]
    if spec.spike_rate > 0.0:
        mask = rng.random((c, t)) < spec.spike_rate
        amps = rng.uniform(spec.spike_amp[0], spec.spike_amp[1], size=(c, t))
        signs = rng.choice([-1.0, 1.0], size=(c, t))
        sig += (mask * amps * signs).astype(np.float32)
    return sig


def gen_sample(label: str, condition: str, rng: np.random.Generator,
               cfg: DatagenConfig) -> tuple:
    """One (image, imu) pair for the class/condition, from one rng stream."""
    if label not in CLASSES:
        raise DataError(f"unknown class {label!r}")
    img = _IMAGE_BUILDERS[label](rng, cfg)
    img = _apply_condition(img, condition, rng, cfg)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    imu = _imu_signature(label, rng, cfg)
    return img, imu


# -- dataset assembly ------------------------------------------------------------------


def _quota_counts(n: int, priors) -> list:
    """Largest-remainder apportionment of n items to the priors."""
    raw = np.asarray(priors, dtype=np.float64) * n
    counts = np.floor(raw).astype(int)
    remainder = n - counts.sum()
    order = np.argsort(-(raw - counts))
    for i in range(remainder):
        counts[order[i % len(counts)]] += 1
    return counts.tolist()


def gen_dataset(out_dir, n: int = 600, priors=DEFAULT_PRIORS, seed: int = 42,
                segment_length: int = 10, cfg: DatagenConfig | None = None) -> Manifest:
    """Generate n samples in contiguous class/condition-pure segments and
    write them through dataio. Deterministic given (n, priors, seed, cfg)."""
    cfg = cfg or DatagenConfig()
    priors = tuple(float(p) for p in priors)
    if len(priors) != len(CLASSES) or any(p < 0 for p in priors) or abs(sum(priors) - 1.0) > 1e-6:
        raise DataError(f"priors must be {len(CLASSES)} non-negative values summing to 1")
    if segment_length < 1:
        raise DataError("segment_length must be >= 1")
    if 0 < n < len([p for p in priors if p > 0]):
        raise DataError(f"n={n} too small for {sum(p > 0 for p in priors)} classes")

    n_segments = -(-n // segment_length) if n else 0
    labels_per_segment = []
    for label, count in zip(CLASSES, _quota_counts(n_segments, priors)):
        labels_per_segment.extend([label] * count)
    seg_rng = np.random.default_rng((seed, 0))
    seg_rng.shuffle(labels_per_segment)
    conditions = seg_rng.choice(len(CONDITIONS), size=n_segments, p=cfg.condition_weights)

    records = []
    samples = []
    for i in range(n):
        seg = i // segment_length
        label = labels_per_segment[seg]
        condition = CONDITIONS[conditions[seg]]
        rng = np.random.default_rng((seed, 1, i))
        img, imu = gen_sample(label, condition, rng, cfg)
        sid = f"s{i:06d}"
        records.append(SampleRecord(
            sample_id=sid, segment_id=f"seg{seg:04d}", label=label, condition=condition,
            image_path=f"images/{sid}.ppm", imu_path=f"imu/{sid}.csv"))
        samples.append(Sample(sample_id=sid, segment_id=f"seg{seg:04d}", label=label,
                              condition=condition, image=img, imu=imu))
    manifest = Manifest(classes=list(CLASSES), records=records)
    dataio.write_dataset(out_dir, manifest, samples)
    return manifest
