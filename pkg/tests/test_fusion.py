"""Fusion tests: every stage against hand/brute-force oracles, plus the
structural invariants (attention rows sum to 1, gate in (0,1), convex z)."""

import math

import numpy as np
import pytest

from roadfuse import encoders, fusion
from roadfuse import tensor as T
from roadfuse.encoders import EncoderConfig
from roadfuse.fusion import FusionConfig
from roadfuse.tensor import Tensor

LN_EPS = 1e-5


def enc_cfg():
    return encoders.tiny_encoder_config()


def fus_cfg(**kw):
    base = dict(n_tokens=2, d_latent=4, n_heads=2, n_classes=3)
    base.update(kw)
    return FusionConfig(**base)


def ln_oracle(x, gain, bias):
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    return gain * (x - mean) / np.sqrt(var + LN_EPS) + bias


def softmax_oracle(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


class TestTokenize:
    def test_zero_embedding_zero_tokens(self):
        cfg, fcfg = enc_cfg(), fus_cfg()
        params = fusion.init_fusion_params(cfg, fcfg, np.random.default_rng(0))
        out = fusion.tokenize(np.zeros(cfg.d_vis, dtype=np.float32), params, fcfg, "vision")
        assert out.modality == "vision"
        np.testing.assert_array_equal(out.tokens.data, np.zeros((2, 4)))

    def test_identity_projection(self):
        # square case d_vis = n*d, W=I, b=0: tokens are the reshaped input
        # when the input is already normalized (LN is then ~identity).
        cfg = EncoderConfig(image_size=8, vision_widths=(2,), d_vis=8, d_sensor=6,
                            imu_window=20, imu_conv_width=4, imu_conv_kernel=3,
                            imu_conv_stride=1, blstm_hidden=3)
        fcfg = fus_cfg()
        params = fusion.init_fusion_params(cfg, fcfg, np.random.default_rng(1))
        params["tok_vis.w"] = Tensor(np.eye(8, dtype=np.float32))
        params["tok_vis.b"] = Tensor(np.zeros(8, dtype=np.float32))
        rng = np.random.default_rng(2)
        e = rng.normal(size=8)
        e = (e - e.mean()) / e.std()
        out = fusion.tokenize(Tensor(e.astype(np.float32)), params, fcfg, "vision")
        np.testing.assert_allclose(out.tokens.data, e.reshape(2, 4), atol=1e-4)

    def test_matches_ln_matvec_reshape_oracle(self):
        cfg, fcfg = enc_cfg(), fus_cfg()
        rng = np.random.default_rng(3)
        params = fusion.init_fusion_params(cfg, fcfg, rng, dtype=np.float64)
        e = rng.normal(size=cfg.d_vis)
        out = fusion.tokenize(Tensor(e, dtype=np.float64), params, fcfg, "vision")
        normed = ln_oracle(e, params["tok_vis.ln_gain"].data, params["tok_vis.ln_bias"].data)
        expect = (normed @ params["tok_vis.w"].data + params["tok_vis.b"].data).reshape(2, 4)
        np.testing.assert_allclose(out.tokens.data, expect, atol=1e-6)

    def test_extent_mismatch(self):
        cfg, fcfg = enc_cfg(), fus_cfg()
        params = fusion.init_fusion_params(cfg, fcfg, np.random.default_rng(4))
        with pytest.raises(T.ShapeError):
            fusion.tokenize(np.zeros(cfg.d_vis + 1, dtype=np.float32), params, fcfg, "vision")


def msa_block_oracle(q, kv, params, prefix, n_heads):
    """Hand-executed attention block in plain numpy."""
    p = lambda name: params[f"{prefix}.{name}"].data
    n, d = q.shape
    dh = d // n_heads
    qq = (q @ p("wq")).reshape(n, n_heads, dh).transpose(1, 0, 2)
    kk = (kv @ p("wk")).reshape(n, n_heads, dh).transpose(1, 0, 2)
    vv = (kv @ p("wv")).reshape(n, n_heads, dh).transpose(1, 0, 2)
    attn = softmax_oracle(qq @ kk.transpose(0, 2, 1) / math.sqrt(dh))
    ctx = (attn @ vv).transpose(1, 0, 2).reshape(n, d)
    x1 = ln_oracle(q + ctx @ p("wo") + p("bo"), p("ln1_gain"), p("ln1_bias"))
    ffn = np.maximum(x1 @ p("ffn1_w") + p("ffn1_b"), 0.0) @ p("ffn2_w") + p("ffn2_b")
    return ln_oracle(x1 + ffn, p("ln2_gain"), p("ln2_bias")), attn


class TestCrossAttend:
    def _params(self, fcfg, seed=5, dtype=np.float64):
        return fusion.init_fusion_params(enc_cfg(), fcfg, np.random.default_rng(seed), dtype=dtype)

    def test_single_token_weight_is_one(self):
        fcfg = fus_cfg(n_tokens=1, d_latent=4, n_heads=1)
        params = self._params(fcfg)
        rng = np.random.default_rng(6)
        v = Tensor(rng.normal(size=(1, 4)), dtype=np.float64)
        a = Tensor(rng.normal(size=(1, 4)), dtype=np.float64)
        _, _, diag = fusion.cross_attend(v, a, params, fcfg)
        np.testing.assert_array_equal(diag["attn_vision"].data, np.ones((1, 1, 1)))

    def test_equal_value_rows_give_common_context(self):
        fcfg = fus_cfg(n_tokens=3, d_latent=4, n_heads=2)
        params = self._params(fcfg, seed=7)
        rng = np.random.default_rng(8)
        v = Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
        row = rng.normal(size=4)
        a = Tensor(np.tile(row, (3, 1)), dtype=np.float64)
        _, _, diag = fusion.cross_attend(v, a, params, fcfg)
        expect = row @ params["xattn_v.wv"].data
        for i in range(3):
            np.testing.assert_allclose(diag["context_vision"].data[i], expect, atol=1e-10)

    def test_matches_hand_oracle(self):
        fcfg = fus_cfg(n_tokens=2, d_latent=2, n_heads=1)
        params = self._params(fcfg, seed=9)
        rng = np.random.default_rng(10)
        v = rng.normal(size=(2, 2)) * 0.5
        a = rng.normal(size=(2, 2)) * 0.5
        v_out, a_out, diag = fusion.cross_attend(
            Tensor(v, dtype=np.float64), Tensor(a, dtype=np.float64), params, fcfg)
        expect_v, attn_v = msa_block_oracle(v, a, params, "xattn_v", 1)
        expect_a, attn_a = msa_block_oracle(a, v, params, "xattn_a", 1)
        np.testing.assert_allclose(v_out.tokens.data, expect_v, atol=1e-6)
        np.testing.assert_allclose(a_out.tokens.data, expect_a, atol=1e-6)
        np.testing.assert_allclose(diag["attn_vision"].data[0], attn_v[0], atol=1e-6)
        np.testing.assert_allclose(diag["attn_inertial"].data[0], attn_a[0], atol=1e-6)

    def test_attention_rows_sum_to_one(self):
        fcfg = fus_cfg(n_tokens=5, d_latent=8, n_heads=4)
        params = self._params(fcfg, seed=11)
        rng = np.random.default_rng(12)
        v = Tensor(rng.normal(size=(5, 8)) * 10, dtype=np.float64)
        a = Tensor(rng.normal(size=(5, 8)) * 10, dtype=np.float64)
        _, _, diag = fusion.cross_attend(v, a, params, fcfg)
        for key in ("attn_vision", "attn_inertial"):
            sums = diag[key].data.sum(axis=-1)
            np.testing.assert_allclose(sums, np.ones_like(sums), atol=1e-6)

    def test_heads_must_divide_latent(self):
        with pytest.raises(ValueError):
            FusionConfig(n_tokens=2, d_latent=6, n_heads=4)


class TestAttentionPool:
    def test_zero_projection_gives_mean(self):
        rng = np.random.default_rng(13)
        tokens = rng.normal(size=(4, 3))
        pooled, weights = fusion.attention_pool(Tensor(tokens), Tensor(np.zeros((3, 1))))
        np.testing.assert_allclose(weights.data, np.full(4, 0.25), atol=1e-7)
        np.testing.assert_allclose(pooled.data, tokens.mean(axis=0), atol=1e-6)

    def test_single_token_unchanged(self):
        tokens = np.array([[1.0, -2.0, 3.0]])
        pooled, _ = fusion.attention_pool(Tensor(tokens), Tensor(np.ones((3, 1))))
        np.testing.assert_allclose(pooled.data, tokens[0], atol=1e-7)

    def test_saturated_score_selects_token(self):
        tokens = np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]], dtype=np.float64)
        w_p = Tensor(np.array([[200.0], [0.0]]), dtype=np.float64)  # scores 0, 200, 1000
        pooled, weights = fusion.attention_pool(Tensor(tokens, dtype=np.float64), w_p)
        np.testing.assert_allclose(pooled.data, tokens[2], atol=1e-4)
        assert weights.data.sum() == pytest.approx(1.0, abs=1e-6)


class TestGateFuse:
    def test_neutral_gate_averages(self):
        v = np.array([1.0, 2.0])
        a = np.array([3.0, 6.0])
        z, g = fusion.gate_fuse(Tensor(v), Tensor(a), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))
        np.testing.assert_allclose(g.data, [0.5, 0.5])
        np.testing.assert_allclose(z.data, [2.0, 4.0])

    def test_saturated_gate_selects_vision(self):
        v = np.array([1.0, -1.0])
        a = np.array([9.0, 9.0])
        z, g = fusion.gate_fuse(Tensor(v), Tensor(a), Tensor(np.zeros((4, 2))),
                                Tensor(np.full(2, 20.0)))
        np.testing.assert_allclose(z.data, v, atol=1e-6)
        assert (g.data > 1.0 - 1e-6).all()

    def test_equal_inputs_fixed_point(self):
        rng = np.random.default_rng(14)
        v = rng.normal(size=3)
        w = Tensor(rng.normal(size=(6, 3)).astype(np.float32))
        b = Tensor(rng.normal(size=3).astype(np.float32))
        z, g = fusion.gate_fuse(Tensor(v.astype(np.float32)), Tensor(v.astype(np.float32)), w, b)
        np.testing.assert_allclose(z.data, v, atol=1e-6)
        assert ((g.data > 0) & (g.data < 1)).all()


class TestClassify:
    def test_zero_params_uniform(self):
        out = fusion.classify(Tensor(np.ones(4)), Tensor(np.zeros((4, 3))), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, np.full(3, 1 / 3), atol=1e-7)

    def test_dominant_logit(self):
        out = fusion.classify(Tensor(np.array([1.0])), Tensor(np.zeros((1, 3))),
                              Tensor(np.array([0.0, 0.0, 20.0])))
        np.testing.assert_allclose(out.data, [0.0, 0.0, 1.0], atol=1e-8)

    def test_argmax_shift_invariant(self):
        rng = np.random.default_rng(15)
        z = Tensor(rng.normal(size=4).astype(np.float32))
        w = Tensor(rng.normal(size=(4, 3)).astype(np.float32))
        b = rng.normal(size=3).astype(np.float32)
        base = fusion.classify(z, w, Tensor(b))
        shifted = fusion.classify(z, w, Tensor(b + 7.5))
        assert int(np.argmax(base.data)) == int(np.argmax(shifted.data))


class TestForwardFull:
    def _setup(self, mode, seed=16, dtype=np.float32):
        cfg, fcfg = enc_cfg(), fus_cfg()
        params = fusion.init_model_params(cfg, fcfg, seed, mode=mode, dtype=dtype)
        rng = np.random.default_rng(seed + 1)
        img = rng.random((3, cfg.image_size, cfg.image_size)).astype(dtype)
        imu = rng.normal(size=(cfg.d_sensor, cfg.imu_window)).astype(dtype)
        return cfg, fcfg, params, img, imu

    def test_vision_only_ignores_imu(self):
        cfg, fcfg, params, img, imu = self._setup(fusion.MODE_VISION_ONLY)
        rng = np.random.default_rng(17)
        out1 = fusion.forward_full(img, imu, params, cfg, fcfg, mode=fusion.MODE_VISION_ONLY)
        out2 = fusion.forward_full(img, rng.normal(size=imu.shape).astype(np.float32),
                                   params, cfg, fcfg, mode=fusion.MODE_VISION_ONLY)
        np.testing.assert_array_equal(out1.y.data, out2.y.data)  # bit-identical
        assert out1.gate is None and out1.a_star is None

    def test_vision_only_requires_image(self):
        cfg, fcfg, params, _, imu = self._setup(fusion.MODE_VISION_ONLY)
        with pytest.raises(T.ShapeError):
            fusion.forward_full(None, imu, params, cfg, fcfg, mode=fusion.MODE_VISION_ONLY)

    def test_saturated_gate_matches_decomposed_vstar(self):
        cfg, fcfg, params, img, imu = self._setup(fusion.MODE_FUSED)
        params["gate.w"] = Tensor(np.zeros((2 * fcfg.d_latent, fcfg.d_latent), dtype=np.float32),
                                  requires_grad=True)
        params["gate.b"] = Tensor(np.full(fcfg.d_latent, 20.0, dtype=np.float32), requires_grad=True)
        out = fusion.forward_full(img, imu, params, cfg, fcfg)
        # decomposed pipeline up to v*
        f_vis = encoders.encode_image(img, params, cfg)
        f_imu = encoders.encode_imu(imu, params, cfg)
        v_tok = fusion.tokenize(f_vis, params, fcfg, "vision")
        a_tok = fusion.tokenize(f_imu, params, fcfg, "inertial")
        v_ref, _, _ = fusion.cross_attend(v_tok, a_tok, params, fcfg)
        v_star, _ = fusion.attention_pool(v_ref, params["pool.w"])
        expect = fusion.classify(v_star, params["cls.w"], params["cls.b"])
        np.testing.assert_allclose(out.y.data, expect.data, atol=1e-5)

    def test_output_invariants(self):
        cfg, fcfg, params, img, imu = self._setup(fusion.MODE_FUSED, seed=18)
        out = fusion.forward_full(img, imu, params, cfg, fcfg)
        assert out.y.data.sum() == pytest.approx(1.0, abs=1e-6)
        assert (out.y.data >= 0).all()
        assert ((out.gate.data > 0) & (out.gate.data < 1)).all()
        lo = np.minimum(out.v_star.data, out.a_star.data) - 1e-6
        hi = np.maximum(out.v_star.data, out.a_star.data) + 1e-6
        assert ((out.z.data >= lo) & (out.z.data <= hi)).all()
        for attn in (out.attn_vision, out.attn_inertial):
            np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_batch_matches_single(self):
        cfg, fcfg, params, _, _ = self._setup(fusion.MODE_FUSED, seed=19)
        rng = np.random.default_rng(20)
        imgs = rng.random((3, 3, cfg.image_size, cfg.image_size)).astype(np.float32)
        imus = rng.normal(size=(3, cfg.d_sensor, cfg.imu_window)).astype(np.float32)
        batched = fusion.forward_full(imgs, imus, params, cfg, fcfg)
        for i in range(3):
            single = fusion.forward_full(imgs[i], imus[i], params, cfg, fcfg)
            np.testing.assert_allclose(batched.y.data[i], single.y.data, atol=1e-5)

    def test_modality_swap_symmetry(self):
        # Same-length embeddings so the tokenizers can swap; swapping all
        # parameter blocks (and negating the gate) must leave Y unchanged.
        fcfg = fus_cfg()
        cfg = EncoderConfig(image_size=8, vision_widths=(2,), d_vis=6, d_sensor=6,
                            imu_window=20, imu_conv_width=4, imu_conv_kernel=3,
                            imu_conv_stride=1, blstm_hidden=3)
        assert cfg.d_vis == cfg.d_imu
        rng = np.random.default_rng(21)
        params = fusion.init_fusion_params(cfg, fcfg, rng, dtype=np.float64)
        d = fcfg.d_latent
        params["gate.w"] = Tensor(rng.normal(size=(2 * d, d)), requires_grad=True, dtype=np.float64)
        params["gate.b"] = Tensor(rng.normal(size=d), requires_grad=True, dtype=np.float64)

        swapped = dict(params)
        for key in list(params):
            if key.startswith("tok_vis."):
                swapped[key] = params["tok_imu." + key[len("tok_vis."):]]
            elif key.startswith("tok_imu."):
                swapped[key] = params["tok_vis." + key[len("tok_imu."):]]
            elif key.startswith("xattn_v."):
                swapped[key] = params["xattn_a." + key[len("xattn_v."):]]
            elif key.startswith("xattn_a."):
                swapped[key] = params["xattn_v." + key[len("xattn_a."):]]
        wg = params["gate.w"].data
        swapped["gate.w"] = Tensor(-np.vstack([wg[d:], wg[:d]]), dtype=np.float64)
        swapped["gate.b"] = Tensor(-params["gate.b"].data, dtype=np.float64)

        def run(p, e_vis, e_imu):
            v = fusion.tokenize(Tensor(e_vis, dtype=np.float64), p, fcfg, "vision")
            a = fusion.tokenize(Tensor(e_imu, dtype=np.float64), p, fcfg, "inertial")
            v_ref, a_ref, _ = fusion.cross_attend(v, a, p, fcfg)
            v_star, _ = fusion.attention_pool(v_ref, p["pool.w"])
            a_star, _ = fusion.attention_pool(a_ref, p["pool.w"])
            z, _ = fusion.gate_fuse(v_star, a_star, p["gate.w"], p["gate.b"])
            return fusion.classify(z, p["cls.w"], p["cls.b"])

        e1 = rng.normal(size=cfg.d_vis)
        e2 = rng.normal(size=cfg.d_imu)
        y = run(params, e1, e2)
        y_swapped = run(swapped, e2, e1)
        np.testing.assert_allclose(y.data, y_swapped.data, atol=1e-10)

    def test_full_chain_gradcheck(self):
        cfg, fcfg, params, img, imu = self._setup(fusion.MODE_FUSED, seed=22, dtype=np.float64)
        img_t = Tensor(img, dtype=np.float64)
        imu_t = Tensor(imu, dtype=np.float64)
        probe = Tensor(np.random.default_rng(23).normal(size=fcfg.n_classes), dtype=np.float64)

        def f():
            out = fusion.forward_full(img_t, imu_t, params, cfg, fcfg)
            return T.reduce_sum(out.y * probe)

        report = T.gradcheck(f, params, tol=1e-4)
        assert report.passed, str(report)
