"""On-disk dataset format, segment-aware splits, and checkpoints.

Interchange contract:
  - images: binary PPM (P6, 8-bit) under ``images/``
  - IMU windows: CSV with header ``t,ch0..chN`` under ``imu/``
  - index: ``manifest.json``
  - checkpoints: magic ``RSFC``, u32 version, u64 header length, UTF-8
    JSON header (config echo + tensor directory), then raw little-endian
    payload. Tensor round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .tensor import Tensor

MANIFEST_VERSION = 1
CHECKPOINT_MAGIC = b"RSFC"
CHECKPOINT_VERSION = 1
SPLITS = ("train", "val", "test")


class DataError(Exception):
    """Malformed or missing on-disk data."""


@dataclass
class Sample:
    sample_id: str
    segment_id: str
    label: str
    condition: str
    image: np.ndarray  # (3,H,W) float32 in [0,1]
    imu: np.ndarray    # (channels,T) float32


@dataclass
class SampleRecord:
    sample_id: str
    segment_id: str
    label: str
    condition: str
    image_path: str
    imu_path: str
    split: str | None = None


@dataclass
class Manifest:
    classes: list
    records: list = field(default_factory=list)
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        seen = set()
        by_segment: dict = {}
        for rec in self.records:
            if rec.sample_id in seen:
                raise DataError(f"duplicate sample id {rec.sample_id!r}")
            seen.add(rec.sample_id)
            if rec.label not in self.classes:
                raise DataError(f"sample {rec.sample_id!r}: label {rec.label!r} "
                                f"not in classes {self.classes}")
            by_segment.setdefault(rec.segment_id, rec.label)
            if by_segment[rec.segment_id] != rec.label:
                raise DataError(f"segment {rec.segment_id!r} mixes labels")

    def label_index(self, label: str) -> int:
        return self.classes.index(label)

    def split_records(self, split: str) -> list:
        return [r for r in self.records if r.split == split]

    def segments(self) -> dict:
        out: dict = {}
        for rec in self.records:
            out.setdefault(rec.segment_id, []).append(rec)
        return out

    def to_dict(self) -> dict:
        return {
            "format_version": self.version,
            "classes": list(self.classes),
            "samples": [
                {"id": r.sample_id, "segment_id": r.segment_id, "label": r.label,
                 "condition": r.condition, "image": r.image_path, "imu": r.imu_path,
                 **({"split": r.split} if r.split else {})}
                for r in self.records
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Manifest":
        try:
            records = [SampleRecord(sample_id=s["id"], segment_id=s["segment_id"],
                                    label=s["label"], condition=s["condition"],
                                    image_path=s["image"], imu_path=s["imu"],
                                    split=s.get("split"))
                       for s in doc["samples"]]
            return cls(classes=list(doc["classes"]), records=records,
                       version=int(doc["format_version"]))
        except KeyError as e:
            raise DataError(f"manifest missing key {e}") from e


# -- PPM images -----------------------------------------------------------------


def write_ppm(path: Path, image: np.ndarray) -> None:
    """8-bit binary PPM from a (3,H,W) float image in [0,1]."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataError(f"{path}: expected (3,H,W) image, got {img.shape}")
    _, h, w = img.shape
    quantized = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(quantized.transpose(1, 2, 0).tobytes())


def read_ppm(path: Path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    try:
        # Header: magic, width, height, maxval as whitespace-separated tokens.
        tokens = []
        pos = 0
        while len(tokens) < 4:
            while pos < len(raw) and raw[pos:pos + 1].isspace():
                pos += 1
            if raw[pos:pos + 1] == b"#":
                while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                    pos += 1
                continue
            start = pos
            while pos < len(raw) and not raw[pos:pos + 1].isspace():
                pos += 1
            tokens.append(raw[start:pos])
        pos += 1
        if tokens[0] != b"P6" or tokens[3] != b"255":
            raise DataError(f"{path}: not an 8-bit P6 PPM")
        w, h = int(tokens[1]), int(tokens[2])
        pixels = np.frombuffer(raw, dtype=np.uint8, count=h * w * 3, offset=pos)
    except (ValueError, IndexError) as e:
        raise DataError(f"{path}: malformed PPM: {e}") from e
    if pixels.size != h * w * 3:
        raise DataError(f"{path}: truncated PPM payload")
    return (pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0)


# -- IMU CSV -----------------------------------------------------------------------


def write_imu_csv(path: Path, imu: np.ndarray) -> None:
    """One row per tick: ``t,ch0..chN`` with full float repr (exact round trip)."""
    arr = np.asarray(imu, dtype=np.float32)
    if arr.ndim != 2:
        raise DataError(f"{path}: expected (channels,T) window, got {arr.shape}")
    channels, ticks = arr.shape
    with open(path, "w", encoding="ascii") as f:
        f.write("t," + ",".join(f"ch{c}" for c in range(channels)) + "\n")
        for t in range(ticks):
            f.write(str(t) + "," + ",".join(repr(float(v)) for v in arr[:, t]) + "\n")


def read_imu_csv(path: Path) -> np.ndarray:
    try:
        lines = Path(path).read_text(encoding="ascii").splitlines()
    except OSError as e:
        raise DataError(f"cannot read IMU window {path}: {e}") from e
    if not lines or not lines[0].startswith("t,"):
        raise DataError(f"{path}:1: expected header 't,ch0..chN'")
    channels = len(lines[0].split(",")) - 1
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != channels + 1:
            raise DataError(f"{path}:{lineno}: expected {channels + 1} fields, got {len(parts)}")
        try:
            rows.append([float(v) for v in parts[1:]])
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: bad value: {e}") from e
    return np.asarray(rows, dtype=np.float32).T


# -- dataset directory ---------------------------------------------------------------


class Dataset:
    """A manifest plus lazily loaded, cached samples."""

    def __init__(self, root: Path, manifest: Manifest):
        self.root = Path(root)
        self.manifest = manifest
        self._cache: dict = {}

    @property
    def classes(self) -> list:
        return self.manifest.classes

    def load(self, rec: SampleRecord) -> Sample:
        cached = self._cache.get(rec.sample_id)
        if cached is None:
            cached = Sample(sample_id=rec.sample_id, segment_id=rec.segment_id,
                            label=rec.label, condition=rec.condition,
                            image=read_ppm(self.root / rec.image_path),
                            imu=read_imu_csv(self.root / rec.imu_path))
            self._cache[rec.sample_id] = cached
        return cached

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}; expected one of {SPLITS}")
        return self.manifest.split_records(name)


def write_dataset(root, manifest: Manifest, samples) -> None:
    """Write samples and the manifest; paths inside the manifest are relative."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "imu").mkdir(parents=True, exist_ok=True)
    by_id = {rec.sample_id: rec for rec in manifest.records}
    for sample in samples:
        rec = by_id.get(sample.sample_id)
        if rec is None:
            raise DataError(f"sample {sample.sample_id!r} is not in the manifest")
        write_ppm(root / rec.image_path, sample.image)
        write_imu_csv(root / rec.imu_path, sample.imu)
    with open(root / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")


def read_dataset(root) -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json in {root}")
    try:
        doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{manifest_path}: invalid JSON: {e}") from e
    manifest = Manifest.from_dict(doc)
    for rec in manifest.records:
        for rel in (rec.image_path, rec.imu_path):
            if not (root / rel).exists():
                raise DataError(f"manifest references missing file {root / rel}")
    return Dataset(root, manifest)


# -- splitting -------------------------------------------------------------------------


def split_by_segment(manifest: Manifest, fractions=(0.7, 0.2, 0.1), seed: int = 0) -> Manifest:
    """Assign whole segments to train/val/test.

    Segments are shuffled with a seeded rng and assigned greedily: each
    goes to the split with the largest remaining sample deficit, so no
    segment ever straddles splits and achieved fractions stay within
    (largest segment)/n of the targets.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must sum to 1, got {fractions}")
    if len(fractions) != len(SPLITS):
        raise DataError(f"expected {len(SPLITS)} fractions")
    segments = manifest.segments()
    if len(segments) < len(SPLITS):
        raise DataError(f"need at least {len(SPLITS)} segments, got {len(segments)}")
    total = len(manifest.records)
    order = sorted(segments)
    np.random.default_rng(seed).shuffle(order)
    assigned = np.zeros(len(SPLITS))
    targets = np.asarray(fractions) * total
    split_of: dict = {}
    for seg_id in order:
        deficits = targets - assigned
        pick = int(np.argmax(deficits))
        split_of[seg_id] = SPLITS[pick]
        assigned[pick] += len(segments[seg_id])
    records = [replace(rec, split=split_of[rec.segment_id]) for rec in manifest.records]
    return Manifest(classes=list(manifest.classes), records=records, version=manifest.version)


# -- checkpoints ----------------------------------------------------------------------


_DTYPE_CODES = {"float32": np.float32, "float64": np.float64}


def save_checkpoint(path, params: dict, config: dict) -> None:
    """Write named tensors with a JSON directory; payload is little-endian raw."""
    directory = {}
    offset = 0
    names = sorted(params)
    for name in names:
        arr = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name])
        directory[name] = {"shape": list(arr.shape), "dtype": arr.dtype.name, "offset": offset}
        offset += arr.nbytes
    header = json.dumps({"config": config, "tensors": directory}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for name in names:
            arr = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name])
            f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path):
    """Read back (params, config); every tensor is bit-identical to what was saved."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header_len = struct.unpack("<Q", raw[8:16])[0]
    try:
        header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: corrupt checkpoint header: {e}") from e
    payload = raw[16 + header_len:]
    params = {}
    for name, entry in header["tensors"].items():
        dtype = _DTYPE_CODES.get(entry["dtype"])
        if dtype is None:
            raise DataError(f"{path}: tensor {name!r} has unsupported dtype {entry['dtype']}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * np.dtype(dtype).itemsize
        if end > len(payload):
            raise DataError(f"{path}: truncated payload for tensor {name!r}")
        arr = np.frombuffer(payload[start:end], dtype=np.dtype(dtype).newbyteorder("<"))
        params[name] = Tensor(arr.astype(dtype).reshape(shape).copy(), requires_grad=True)
    return params, header["config"]


def check_config_echo(loaded_params: dict, expected_params: dict, path="checkpoint") -> None:
    """Shape-compare two parameter dicts, naming the first conflicting tensor."""
    for name, tensor in expected_params.items():
        if name not in loaded_params:
            raise DataError(f"{path}: missing tensor {name!r}")
        got = loaded_params[name].data.shape
        want = tensor.data.shape
        if got != want:
            raise DataError(f"{path}: tensor {name!r} has shape {got}, expected {want}")
    extra = set(loaded_params) - set(expected_params)
    if extra:
        raise DataError(f"{path}: unexpected tensors {sorted(extra)}")
