"""Modality encoders: a compact CNN for images, a CNN-BLSTM for IMU windows.

Each encoder maps its input to a fixed-length embedding and is a pure,
differentiable function of (input, params). Ops accept a single sample
(C,H,W) / (C,T) or a leading batch axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

MODALITY_VISION = "vision"
MODALITY_INERTIAL = "inertial"


@dataclass(frozen=True)
class EncoderConfig:
    """Shapes for both encoders; ``d_imu`` is always 2x the BLSTM hidden size."""

    image_size: int = 64
    vision_widths: tuple = (8, 16, 32, 64)
    d_vis: int = 128
    d_sensor: int = 6
    imu_window: int = 200
    imu_conv_width: int = 16
    imu_conv_kernel: int = 7
    imu_conv_stride: int = 2
    blstm_hidden: int = 32
    # standardize each image before the conv stack; exposure shifts
    # (nighttime) then cannot move the network's operating point
    normalize_input: bool = True

    def __post_init__(self):
        for name in ("image_size", "d_vis", "d_sensor", "imu_window",
                     "imu_conv_width", "imu_conv_kernel", "imu_conv_stride", "blstm_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"EncoderConfig.{name} must be >= 1")
        if not self.vision_widths:
            raise ValueError("EncoderConfig.vision_widths must be non-empty")
        if self.image_size % (2 ** len(self.vision_widths)):
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2^{len(self.vision_widths)} "
                "(one 2x2 pool per conv block)")
        if self.imu_conv_kernel > self.imu_window:
            raise ValueError("imu_conv_kernel exceeds imu_window")

    @property
    def d_imu(self) -> int:
        return 2 * self.blstm_hidden

    @property
    def imu_seq_len(self) -> int:
        return (self.imu_window - self.imu_conv_kernel) // self.imu_conv_stride + 1


def tiny_encoder_config() -> EncoderConfig:
    """Small dims for gradient checks: 8x8 images, 20-tick windows."""
    return EncoderConfig(image_size=8, vision_widths=(2, 3), d_vis=8,
                         d_sensor=6, imu_window=20, imu_conv_width=4,
                         imu_conv_kernel=3, imu_conv_stride=1, blstm_hidden=3)


@dataclass
class ImageTensor:
    """An RGB image, channels-first, values in [0,1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ShapeError(f"ImageTensor expects (3,H,W), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ShapeError("ImageTensor values must be finite")
        self.data = np.clip(arr, 0.0, 1.0)


@dataclass
class ImuWindow:
    """A window of inertial channels (accel x,y,z then gyro x,y,z per IMU)."""

    data: np.ndarray
    sample_rate: float = 100.0

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[1] < 1:
            raise ShapeError(f"ImuWindow expects (channels,T), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ShapeError("ImuWindow values must be finite")
        self.data = arr


@dataclass
class Embedding:
    data: Tensor
    modality: str

    def __post_init__(self):
        if self.modality not in (MODALITY_VISION, MODALITY_INERTIAL):
            raise ValueError(f"unknown modality {self.modality!r}")


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype, relu: bool = False) -> Tensor:
    # Layers feeding a ReLU get the Kaiming-uniform gain; with the plain
    # sqrt(1/fan_in) bound the 4-block conv stack attenuates its input
    # ~2.4x per block and the vision branch never escapes the
    # majority-class plateau.
    a = math.sqrt((6.0 if relu else 1.0) / fan_in)
    return Tensor(rng.uniform(-a, a, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator,
                        dtype=np.float32, include_vision: bool = True,
                        include_imu: bool = True) -> dict:
    """Seeded uniform(-a, a) init with a = sqrt(1/fan_in); biases start at zero."""
    params: dict = {}
    if include_vision:
        c_in = 3
        for i, width in enumerate(cfg.vision_widths):
            params[f"vis.conv{i}.w"] = _uniform(rng, (width, c_in, 3, 3), c_in * 9, dtype, relu=True)
            params[f"vis.conv{i}.b"] = _zeros((width,), dtype)
            c_in = width
        params["vis.fc.w"] = _uniform(rng, (c_in, cfg.d_vis), c_in, dtype)
        params["vis.fc.b"] = _zeros((cfg.d_vis,), dtype)
    if include_imu:
        h = cfg.blstm_hidden
        params["imu.conv.w"] = _uniform(
            rng, (cfg.imu_conv_width, cfg.d_sensor, cfg.imu_conv_kernel),
            cfg.d_sensor * cfg.imu_conv_kernel, dtype, relu=True)
        params["imu.conv.b"] = _zeros((cfg.imu_conv_width,), dtype)
        for direction in ("fwd", "bwd"):
            params[f"imu.{direction}.wx"] = _uniform(rng, (cfg.imu_conv_width, 4 * h), cfg.imu_conv_width, dtype)
            params[f"imu.{direction}.wh"] = _uniform(rng, (h, 4 * h), h, dtype)
            params[f"imu.{direction}.b"] = _zeros((4 * h,), dtype)
    return params


def _as_batch(x: Tensor, sample_ndim: int):
    if x.ndim == sample_ndim:
        return T.reshape(x, (1,) + x.data.shape), True
    if x.ndim == sample_ndim + 1:
        return x, False
    raise ShapeError(f"expected {sample_ndim}-d sample or batch, got {x.data.shape}")


def _to_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (ImageTensor, ImuWindow)):
        return Tensor(x.data)
    return Tensor(np.asarray(x))


def encode_image(img, params: dict, cfg: EncoderConfig) -> Tensor:
    """Image -> embedding of length d_vis.

    With ``normalize_input`` the image is first standardized per sample
    (zero mean, unit variance over all pixels jointly) so global
    brightness/contrast shifts such as nighttime exposure do not move
    the operating point of the conv stack. Then blocks of (3x3 conv,
    relu, 2x2 average pool), global average pool, and a linear projection.
    """
    x = _to_tensor(img)
    x, single = _as_batch(x, 3)
    n, c, h, w = x.data.shape
    if c != 3 or h != cfg.image_size or w != cfg.image_size:
        raise ShapeError(f"expected (3,{cfg.image_size},{cfg.image_size}) image, got {x.data.shape[1:]}")
    if cfg.normalize_input:
        flat = T.reshape(x, (n, c * h * w))
        ones = Tensor(np.ones(c * h * w, dtype=x.data.dtype))
        zeros = Tensor(np.zeros(c * h * w, dtype=x.data.dtype))
        x = T.reshape(T.layernorm(flat, ones, zeros), (n, c, h, w))
    for i in range(len(cfg.vision_widths)):
        x = T.conv2d(x, params[f"vis.conv{i}.w"], params[f"vis.conv{i}.b"], stride=1, padding=1)
        x = T.relu(x)
        x = T.avgpool2d(x, 2)
    pooled = T.reduce_mean(x, axis=(2, 3))
    emb = T.matmul(pooled, params["vis.fc.w"]) + params["vis.fc.b"]
    return T.reshape(emb, (cfg.d_vis,)) if single else emb


def _lstm_pass(steps, wx: Tensor, wh: Tensor, b: Tensor, hidden: int) -> Tensor:
    """Run the LSTM cell over ``steps`` (each (N,C)); return the final hidden state."""
    n = steps[0].data.shape[0]
    dtype = steps[0].data.dtype
    h = Tensor(np.zeros((n, hidden), dtype=dtype))
    c = Tensor(np.zeros((n, hidden), dtype=dtype))
    for x_t in steps:
        pre = T.matmul(x_t, wx) + T.matmul(h, wh) + b
        i = T.sigmoid(T.narrow(pre, 1, 0, hidden))
        f = T.sigmoid(T.narrow(pre, 1, hidden, hidden))
        g = T.tanh(T.narrow(pre, 1, 2 * hidden, hidden))
        o = T.sigmoid(T.narrow(pre, 1, 3 * hidden, hidden))
        c = f * c + i * g
        h = o * T.tanh(c)
    return h


def blstm_forward(seq, wx_f, wh_f, b_f, wx_b, wh_b, b_b):
    """Bidirectional LSTM over (channels,L) or (N,channels,L).

    Returns the final hidden states of the left-to-right and right-to-left
    passes; the two directions have independent parameters.
    """
    x = _to_tensor(seq)
    x, single = _as_batch(x, 2)
    length = x.data.shape[2]
    if length < 1:
        raise ShapeError("blstm_forward needs at least one step")
    hidden = wh_f.data.shape[0]
    steps = [T.take(x, t, axis=2) for t in range(length)]
    h_fwd = _lstm_pass(steps, wx_f, wh_f, b_f, hidden)
    h_bwd = _lstm_pass(steps[::-1], wx_b, wh_b, b_b, hidden)
    if single:
        h_fwd = T.reshape(h_fwd, (hidden,))
        h_bwd = T.reshape(h_bwd, (hidden,))
    return h_fwd, h_bwd


def encode_imu(win, params: dict, cfg: EncoderConfig) -> Tensor:
    """IMU window -> embedding of length d_imu = 2 * blstm_hidden.

    One strided 1-d conv picks up local excitation patterns; the BLSTM
    models how they evolve over the window. The embedding concatenates
    the final hidden states of both directions.
    """
    x = _to_tensor(win)
    x, single = _as_batch(x, 2)
    n, c, t = x.data.shape
    if c != cfg.d_sensor or t != cfg.imu_window:
        raise ShapeError(f"expected ({cfg.d_sensor},{cfg.imu_window}) window, got {x.data.shape[1:]}")
    y = T.conv1d(x, params["imu.conv.w"], params["imu.conv.b"], stride=cfg.imu_conv_stride)
    y = T.relu(y)
    h_fwd, h_bwd = blstm_forward(y, params["imu.fwd.wx"], params["imu.fwd.wh"], params["imu.fwd.b"],
                                 params["imu.bwd.wx"], params["imu.bwd.wh"], params["imu.bwd.b"])
    emb = T.concat([h_fwd, h_bwd], axis=-1)
    return T.reshape(emb, (cfg.d_imu,)) if single else emb
