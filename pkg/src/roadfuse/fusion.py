"""Token fusion of the two modality embeddings.

Pipeline: each embedding is layer-normalized, linearly expanded into n
latent tokens, and the two token sets exchange information through
bidirectional multi-head cross-attention (vision tokens query inertial
tokens and vice versa, both reading the pre-update token sets). Each
refined set is attention-pooled into one vector, and an elementwise
sigmoid gate forms the fused vector z = g*v_star + (1-g)*a_star that the
softmax head classifies.

A vision_only mode pools the raw vision tokens and classifies them
directly, bypassing cross-attention and gating; its output does not
depend on the IMU input at all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import encoders
from . import tensor as T
from .encoders import Embedding, EncoderConfig, _as_batch, _to_tensor, _uniform, _zeros
from .tensor import ShapeError, Tensor

MODE_FUSED = "fused"
MODE_VISION_ONLY = "vision_only"
MODES = (MODE_FUSED, MODE_VISION_ONLY)


@dataclass(frozen=True)
class FusionConfig:
    n_tokens: int = 6
    d_latent: int = 64
    n_heads: int = 4
    ffn_expansion: int = 2
    per_modality_pool: bool = False
    n_classes: int = 3

    def __post_init__(self):
        for name in ("n_tokens", "d_latent", "n_heads", "ffn_expansion", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"FusionConfig.{name} must be >= 1")
        if self.d_latent % self.n_heads:
            raise ValueError(f"n_heads {self.n_heads} must divide d_latent {self.d_latent}")


def tiny_fusion_config() -> FusionConfig:
    return FusionConfig(n_tokens=2, d_latent=4, n_heads=2, n_classes=3)


@dataclass
class TokenSet:
    tokens: Tensor  # (n, d_latent) or (N, n, d_latent)
    modality: str


@dataclass
class FusionOutput:
    """Forward results plus diagnostics; fields are batched when inputs are."""

    y: Tensor
    logits: Tensor
    z: Tensor
    v_star: Tensor
    a_star: Tensor | None = None
    gate: Tensor | None = None
    attn_vision: Tensor | None = None     # weights for vision-queries-inertial
    attn_inertial: Tensor | None = None   # weights for inertial-queries-vision
    pool_weights_vision: Tensor | None = None
    pool_weights_inertial: Tensor | None = None

    def mean_gate(self) -> float | None:
        return None if self.gate is None else float(self.gate.data.mean())


def init_fusion_params(enc_cfg: EncoderConfig, fus_cfg: FusionConfig,
                       rng: np.random.Generator, dtype=np.float32,
                       mode: str = MODE_FUSED) -> dict:
    """Fusion-side parameters; cross-attention/gate/imu-tokenizer blocks
    exist only in fused mode. The gate starts at zero so g opens at 0.5."""
    n, d = fus_cfg.n_tokens, fus_cfg.d_latent
    e = fus_cfg.ffn_expansion
    params: dict = {}

    def tokenizer(tag: str, d_in: int):
        params[f"tok_{tag}.ln_gain"] = Tensor(np.ones(d_in, dtype=dtype), requires_grad=True)
        params[f"tok_{tag}.ln_bias"] = _zeros((d_in,), dtype)
        params[f"tok_{tag}.w"] = _uniform(rng, (d_in, n * d), d_in, dtype)
        params[f"tok_{tag}.b"] = _zeros((n * d,), dtype)

    tokenizer("vis", enc_cfg.d_vis)
    if mode == MODE_FUSED:
        tokenizer("imu", enc_cfg.d_imu)
        for tag in ("v", "a"):
            p = f"xattn_{tag}"
            for proj in ("wq", "wk", "wv", "wo"):
                params[f"{p}.{proj}"] = _uniform(rng, (d, d), d, dtype)
            params[f"{p}.bo"] = _zeros((d,), dtype)
            params[f"{p}.ffn1_w"] = _uniform(rng, (d, e * d), d, dtype, relu=True)
            params[f"{p}.ffn1_b"] = _zeros((e * d,), dtype)
            params[f"{p}.ffn2_w"] = _uniform(rng, (e * d, d), e * d, dtype)
            params[f"{p}.ffn2_b"] = _zeros((d,), dtype)
            for ln in ("ln1", "ln2"):
                params[f"{p}.{ln}_gain"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
                params[f"{p}.{ln}_bias"] = _zeros((d,), dtype)
        params["gate.w"] = _zeros((2 * d, d), dtype)
        params["gate.b"] = _zeros((d,), dtype)
    if fus_cfg.per_modality_pool:
        params["pool_vis.w"] = _uniform(rng, (d, 1), d, dtype)
        if mode == MODE_FUSED:
            params["pool_imu.w"] = _uniform(rng, (d, 1), d, dtype)
    else:
        params["pool.w"] = _uniform(rng, (d, 1), d, dtype)
    params["cls.w"] = _uniform(rng, (d, fus_cfg.n_classes), d, dtype)
    params["cls.b"] = _zeros((fus_cfg.n_classes,), dtype)
    return params


def init_model_params(enc_cfg: EncoderConfig, fus_cfg: FusionConfig, seed: int,
                      mode: str = MODE_FUSED, dtype=np.float32) -> dict:
    """All named parameter tensors for the requested mode in one flat dict."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    params = encoders.init_encoder_params(enc_cfg, rng, dtype=dtype,
                                          include_imu=(mode == MODE_FUSED))
    params.update(init_fusion_params(enc_cfg, fus_cfg, rng, dtype=dtype, mode=mode))
    return params


def _pool_weight(params: dict, fus_cfg: FusionConfig, tag: str) -> Tensor:
    if fus_cfg.per_modality_pool:
        return params[f"pool_{tag}.w"]
    return params["pool.w"]


def tokenize(e, params: dict, fus_cfg: FusionConfig, modality: str) -> TokenSet:
    """Embedding -> n tokens of width d_latent: LN, linear projection,
    row-major reshape."""
    tag = {"vision": "vis", "inertial": "imu"}.get(modality)
    if tag is None:
        raise ValueError(f"unknown modality {modality!r}")
    if isinstance(e, Embedding):
        e = e.data
    x = _to_tensor(e)
    x, single = _as_batch(x, 1)
    d_in = params[f"tok_{tag}.w"].data.shape[0]
    if x.data.shape[1] != d_in:
        raise ShapeError(f"{modality} tokenizer expects length {d_in}, got {x.data.shape[1]}")
    normed = T.layernorm(x, params[f"tok_{tag}.ln_gain"], params[f"tok_{tag}.ln_bias"])
    flat = T.matmul(normed, params[f"tok_{tag}.w"]) + params[f"tok_{tag}.b"]
    n, d = fus_cfg.n_tokens, fus_cfg.d_latent
    shape = (n, d) if single else (x.data.shape[0], n, d)
    return TokenSet(tokens=T.reshape(flat, shape), modality=modality)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    nb, n, d = x.data.shape
    dh = d // n_heads
    return T.transpose(T.reshape(x, (nb, n, n_heads, dh)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    nb, h, n, dh = x.data.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (nb, n, h * dh))


def _msa_block(queries: Tensor, keys_values: Tensor, params: dict, prefix: str,
               fus_cfg: FusionConfig):
    """One cross-attention block: multi-head scaled dot-product attention,
    output projection, residual, LN, 2-layer feed-forward, residual, LN."""
    p = lambda name: params[f"{prefix}.{name}"]
    q = _split_heads(T.matmul(queries, p("wq")), fus_cfg.n_heads)
    k = _split_heads(T.matmul(keys_values, p("wk")), fus_cfg.n_heads)
    v = _split_heads(T.matmul(keys_values, p("wv")), fus_cfg.n_heads)
    scale = 1.0 / math.sqrt(fus_cfg.d_latent // fus_cfg.n_heads)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale)
    attn = T.softmax(scores, axis=-1)
    context = _merge_heads(T.matmul(attn, v))
    projected = T.matmul(context, p("wo")) + p("bo")
    x1 = T.layernorm(queries + projected, p("ln1_gain"), p("ln1_bias"))
    ffn = T.matmul(T.relu(T.matmul(x1, p("ffn1_w")) + p("ffn1_b")), p("ffn2_w")) + p("ffn2_b")
    x2 = T.layernorm(x1 + ffn, p("ln2_gain"), p("ln2_bias"))
    return x2, attn, context


def cross_attend(v_tokens, a_tokens, params: dict, fus_cfg: FusionConfig):
    """Bidirectional cross-attention; both directions read the original
    token sets (simultaneous update). Returns (V', A', diagnostics)."""
    v = _to_tensor(v_tokens.tokens if isinstance(v_tokens, TokenSet) else v_tokens)
    a = _to_tensor(a_tokens.tokens if isinstance(a_tokens, TokenSet) else a_tokens)
    if v.data.shape[-2:] != a.data.shape[-2:]:
        raise ShapeError(f"token sets differ: {v.data.shape} vs {a.data.shape}")
    v, single = _as_batch(v, 2)
    a, _ = _as_batch(a, 2)
    v_out, attn_v, ctx_v = _msa_block(v, a, params, "xattn_v", fus_cfg)
    a_out, attn_a, ctx_a = _msa_block(a, v, params, "xattn_a", fus_cfg)
    if single:
        v_out = T.reshape(v_out, v_out.data.shape[1:])
        a_out = T.reshape(a_out, a_out.data.shape[1:])
        attn_v = T.reshape(attn_v, attn_v.data.shape[1:])
        attn_a = T.reshape(attn_a, attn_a.data.shape[1:])
        ctx_v = T.reshape(ctx_v, ctx_v.data.shape[1:])
        ctx_a = T.reshape(ctx_a, ctx_a.data.shape[1:])
    diag = {"attn_vision": attn_v, "attn_inertial": attn_a,
            "context_vision": ctx_v, "context_inertial": ctx_a}
    return TokenSet(v_out, "vision"), TokenSet(a_out, "inertial"), diag


def attention_pool(tokens, w_p: Tensor):
    """Softmax-weighted sum of token rows; weights come from a learned
    scalar score per token. Returns (pooled, weights)."""
    x = _to_tensor(tokens.tokens if isinstance(tokens, TokenSet) else tokens)
    x, single = _as_batch(x, 2)
    nb, n, d = x.data.shape
    scores = T.reshape(T.matmul(x, w_p), (nb, n))
    weights = T.softmax(scores, axis=-1)
    pooled = T.reshape(T.matmul(T.reshape(weights, (nb, 1, n)), x), (nb, d))
    if single:
        return T.reshape(pooled, (d,)), T.reshape(weights, (n,))
    return pooled, weights


def gate_fuse(v_star: Tensor, a_star: Tensor, w_g: Tensor, b_g: Tensor):
    """Adaptive gate g = sigmoid(W_g [v*; a*] + b_g); z is the elementwise
    convex combination g*v* + (1-g)*a*. Returns (z, g)."""
    v, single = _as_batch(_to_tensor(v_star), 1)
    a, _ = _as_batch(_to_tensor(a_star), 1)
    if v.data.shape != a.data.shape:
        raise ShapeError(f"pooled vectors differ: {v.data.shape} vs {a.data.shape}")
    both = T.concat([v, a], axis=-1)
    g = T.sigmoid(T.matmul(both, w_g) + b_g)
    z = g * v + (1.0 - g) * a
    if single:
        d = v.data.shape[1]
        return T.reshape(z, (d,)), T.reshape(g, (d,))
    return z, g


def class_logits(z: Tensor, w: Tensor, b: Tensor) -> Tensor:
    zz, single = _as_batch(_to_tensor(z), 1)
    logits = T.matmul(zz, w) + b
    return T.reshape(logits, (logits.data.shape[1],)) if single else logits


def classify(z: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Posterior probabilities over the classes: softmax(W z + b)."""
    return T.softmax(class_logits(z, w, b), axis=-1)


def forward_full(image, imu, params: dict, enc_cfg: EncoderConfig,
                 fus_cfg: FusionConfig, mode: str = MODE_FUSED) -> FusionOutput:
    """Run the whole pipeline on one sample or one batch."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if image is None:
        raise ShapeError("an image is required in every mode")
    f_vis = encoders.encode_image(image, params, enc_cfg)
    v_tokens = tokenize(f_vis, params, fus_cfg, "vision")

    if mode == MODE_VISION_ONLY:
        v_star, w_v = attention_pool(v_tokens, _pool_weight(params, fus_cfg, "vis"))
        logits = class_logits(v_star, params["cls.w"], params["cls.b"])
        return FusionOutput(y=T.softmax(logits, axis=-1), logits=logits, z=v_star,
                            v_star=v_star, pool_weights_vision=w_v)

    if imu is None:
        raise ShapeError("fused mode requires an IMU window")
    f_imu = encoders.encode_imu(imu, params, enc_cfg)
    a_tokens = tokenize(f_imu, params, fus_cfg, "inertial")
    v_ref, a_ref, diag = cross_attend(v_tokens, a_tokens, params, fus_cfg)
    v_star, w_v = attention_pool(v_ref, _pool_weight(params, fus_cfg, "vis"))
    a_star, w_a = attention_pool(a_ref, _pool_weight(params, fus_cfg, "imu"))
    z, g = gate_fuse(v_star, a_star, params["gate.w"], params["gate.b"])
    logits = class_logits(z, params["cls.w"], params["cls.b"])
    return FusionOutput(y=T.softmax(logits, axis=-1), logits=logits, z=z,
                        v_star=v_star, a_star=a_star, gate=g,
                        attn_vision=diag["attn_vision"], attn_inertial=diag["attn_inertial"],
                        pool_weights_vision=w_v, pool_weights_inertial=w_a)
