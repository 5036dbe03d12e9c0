"""Shared test helpers: tiny configs and a two-class toy dataset that is
linearly separable by image mean (and by IMU variance)."""

import numpy as np

from roadfuse import dataio
from roadfuse.augment import identity_config
from roadfuse.dataio import Manifest, Sample, SampleRecord
from roadfuse.encoders import EncoderConfig
from roadfuse.fusion import FusionConfig
from roadfuse.trainer import TrainConfig

TOY_CLASSES = ["dark", "bright"]


def toy_encoder_config():
    # normalize_input off: the toy classes are separable by image mean,
    # which per-sample standardization would erase
    return EncoderConfig(image_size=8, vision_widths=(4, 8), d_vis=16, d_sensor=6,
                         imu_window=20, imu_conv_width=8, imu_conv_kernel=3,
                         imu_conv_stride=1, blstm_hidden=4, normalize_input=False)


def toy_fusion_config():
    return FusionConfig(n_tokens=2, d_latent=8, n_heads=2, n_classes=2)


def toy_train_config(mode="vision_only", seed=0, **kw):
    defaults = dict(batch_size=8, max_epochs=5, patience=3, seed=seed, mode=mode,
                    encoder=toy_encoder_config(), fusion=toy_fusion_config(),
                    augment=identity_config(8))
    defaults.update(kw)
    return TrainConfig(**defaults)


def build_toy_dataset(root, n_per_class=15, segment_length=3, seed=0):
    """Write a toy dataset with explicit per-class train/val/test splits."""
    rng = np.random.default_rng(seed)
    records, samples = [], []
    i = 0
    for ci, cls in enumerate(TOY_CLASSES):
        n_segments = n_per_class // segment_length
        for k in range(n_per_class):
            seg_ordinal = k // segment_length
            split = ("train" if seg_ordinal < n_segments - 2 else
                     "val" if seg_ordinal == n_segments - 2 else "test")
            sid = f"s{i:04d}"
            seg = f"{cls}-seg{seg_ordinal}"
            mean = 0.2 if cls == "dark" else 0.8
            sigma = 0.05 if cls == "dark" else 0.3
            image = np.clip(mean + rng.normal(0, 0.05, size=(3, 8, 8)), 0, 1).astype(np.float32)
            imu = rng.normal(0, sigma, size=(6, 20)).astype(np.float32)
            records.append(SampleRecord(sample_id=sid, segment_id=seg, label=cls,
                                        condition="day", image_path=f"images/{sid}.ppm",
                                        imu_path=f"imu/{sid}.csv", split=split))
            samples.append(Sample(sample_id=sid, segment_id=seg, label=cls,
                                  condition="day", image=image, imu=imu))
            i += 1
    manifest = Manifest(classes=TOY_CLASSES, records=records)
    dataio.write_dataset(root, manifest, samples)
    return dataio.read_dataset(root)
