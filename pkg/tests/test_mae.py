"""Masked autoencoder tests: patch layout, visible-only encoding, decoder
read-outs, the brute-force attention oracle, and the pretraining step."""

import numpy as np
import pytest

from priorfill.errors import ConfigError, ContractError
from priorfill.mae import (
    MaeConfig,
    MaeModel,
    decode,
    encode_visible,
    extract_priors,
    mae_pretrain_step,
    partial_mask_embed,
    partial_token_inputs,
    patchify,
    patchify_array,
    reconstruction_loss,
    unpatchify,
)
from priorfill.masks import MaskMap, TokenMask, gen_mae_pretrain_mask, gen_random_token_mask
from priorfill.numerics import Tensor, backward, ops, precision
from priorfill.numerics.gradcheck import gradcheck
from priorfill.trainer import Adam


def tiny_cfg(**kw):
    base = dict(img=16, patch=4, enc_layers=2, dec_layers=2, dim=16, heads=2)
    base.update(kw)
    return MaeConfig(**base)


def brute_force_prior_attention(model, img, tmask):
    """Recompute masked attention from raw weights: per layer and head,
    softmax(q k^T / sqrt(head_dim)) with masked keys dropped, then head and
    layer means. Mirrors the full decoder forward with explicit numpy math."""
    cfg = model.cfg
    x = patchify_array(img[None], cfg.patch)[0]
    x = x @ model.patch_embed.w.data + model.patch_embed.b.data + model.enc_pos.data
    vis = tmask.unmasked_indices()
    h = x[vis]

    def layer_norm(v, ln):
        mu = v.mean(-1, keepdims=True)
        var = v.var(-1, keepdims=True)
        return (v - mu) / np.sqrt(var + ln.eps) * ln.gamma.data + ln.beta.data

    def attention(v, attn_mod, record=None):
        d = v.shape[-1]
        heads, hd = attn_mod.heads, attn_mod.head_dim
        qkv = v @ attn_mod.qkv.w.data + attn_mod.qkv.b.data
        q, k, val = qkv[:, :d], qkv[:, d : 2 * d], qkv[:, 2 * d :]
        out = np.zeros_like(v)
        per_head = []
        for hh in range(heads):
            qs = q[:, hh * hd : (hh + 1) * hd]
            ks = k[:, hh * hd : (hh + 1) * hd]
            vs = val[:, hh * hd : (hh + 1) * hd]
            logits = qs @ ks.T / np.sqrt(hd)
            e = np.exp(logits - logits.max(-1, keepdims=True))
            probs = e / e.sum(-1, keepdims=True)
            out[:, hh * hd : (hh + 1) * hd] = probs @ vs
            per_head.append(logits)
        if record is not None:
            record.append(per_head)
        return out @ attn_mod.proj.w.data + attn_mod.proj.b.data

    def block(v, blk, record=None):
        v = v + attention(layer_norm(v, blk.ln1), blk.attn, record)
        hmid = layer_norm(v, blk.ln2) @ blk.mlp.fc1.w.data + blk.mlp.fc1.b.data
        from scipy.special import erf

        gelu = 0.5 * hmid * (1 + erf(hmid / np.sqrt(2)))
        return v + gelu @ blk.mlp.fc2.w.data + blk.mlp.fc2.b.data

    for blk in model.enc_blocks:
        h = block(h, blk)
    h = layer_norm(h, model.enc_norm)
    h = h @ model.dec_embed.w.data + model.dec_embed.b.data
    full = np.tile(model.mask_token.data, (cfg.tokens, 1))
    full[vis] = h
    full = full + model.dec_pos.data
    recorded = []
    for blk in model.dec_blocks:
        full = block(full, blk, recorded)
    key_mask = tmask.flat().astype(bool)
    acc = np.zeros((cfg.tokens, cfg.tokens))
    for per_head in recorded[: cfg.attn_layers_used]:
        layer_acc = np.zeros_like(acc)
        for logits in per_head:
            masked_logits = np.where(key_mask[None, :], -np.inf, logits)
            e = np.exp(masked_logits - masked_logits.max(-1, keepdims=True))
            e[:, key_mask] = 0.0
            layer_acc += e / e.sum(-1, keepdims=True)
        acc += layer_acc / len(per_head)
    return acc / cfg.attn_layers_used


class TestPatchify:
    def test_roundtrip_bit_exact(self):
        rng = np.random.default_rng(0)
        img = Tensor(rng.random((2, 3, 32, 32)).astype(np.float32))
        toks = patchify(img, 4)
        back = unpatchify(toks, 4, 3)
        assert np.array_equal(back.data, img.data)

    def test_token_counts(self):
        img = Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32))
        toks = patchify(img, 4)
        assert toks.shape == (1, 64, 48)

    def test_first_token_covers_top_left(self):
        img = np.zeros((1, 1, 8, 8), dtype=np.float32)
        img[0, 0, :4, :4] = 7.0
        toks = patchify(Tensor(img), 4)
        assert np.all(toks.data[0, 0] == 7.0)
        assert np.all(toks.data[0, 1:] == 0.0)


class TestEncodeVisible:
    def test_row_count_matches_visible(self):
        cfg = MaeConfig()  # 32px, patch 4, 64 tokens
        model = MaeModel(cfg, np.random.default_rng(0))
        img = Tensor(np.random.default_rng(1).random((3, 32, 32)).astype(np.float32))
        tmask = gen_mae_pretrain_mask(0, 8, 8, 0.3)  # exactly 48 masked
        out = encode_visible(model, img, tmask)
        assert out.shape == (1, 16, 64)

    def test_all_masked_rejected(self):
        cfg = tiny_cfg()
        model = MaeModel(cfg, np.random.default_rng(0))
        img = Tensor(np.zeros((3, 16, 16), dtype=np.float32))
        with pytest.raises(ContractError):
            encode_visible(model, img, TokenMask(4, 4, np.ones((4, 4), np.uint8)))

    def test_depends_only_on_pixels_and_mask(self):
        cfg = tiny_cfg()
        model = MaeModel(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(2)
        img = Tensor(rng.random((3, 16, 16)).astype(np.float32))
        tmask = gen_random_token_mask(3, 4, 4, 0.5)
        a = encode_visible(model, img, tmask)
        b = encode_visible(model, img, tmask)
        assert np.array_equal(a.data, b.data)

    def test_gradcheck_through_block(self):
        with precision("float64"):
            cfg = tiny_cfg(enc_layers=1, dec_layers=1)
            model = MaeModel(cfg, np.random.default_rng(0))
            img = Tensor(np.random.default_rng(1).random((3, 16, 16)))
            tmask = gen_random_token_mask(0, 4, 4, 0.5)
            params = [model.patch_embed.w, model.enc_blocks[0].attn.qkv.w]

            def f(*_p):
                return ops.tmean(ops.square(encode_visible(model, img, tmask)))

            assert gradcheck(f, params) < 1e-3


class TestDecode:
    def test_full_token_count_and_attention_rows(self):
        cfg = tiny_cfg()
        model = MaeModel(cfg, np.random.default_rng(0))
        img = Tensor(np.random.default_rng(1).random((3, 16, 16)).astype(np.float32))
        tmask = gen_random_token_mask(2, 4, 4, 0.75)
        enc = encode_visible(model, img, tmask)
        toks, attns, pred = decode(model, enc, tmask)
        assert all(t.shape == (1, 16, 16) for t in toks)
        assert pred.shape == (1, 16, 48)
        for att in attns:
            assert np.abs(att.data.sum(-1) - 1).max() < 1e-6

    def test_masked_rows_follow_mask_token(self):
        cfg = tiny_cfg(dec_layers=1)
        model = MaeModel(cfg, np.random.default_rng(0))
        img = Tensor(np.random.default_rng(1).random((3, 16, 16)).astype(np.float32))
        tmask = gen_random_token_mask(2, 4, 4, 0.5)
        enc = encode_visible(model, img, tmask)
        _, _, pred_a = decode(model, enc, tmask)
        # non-uniform bump: a uniform one would vanish inside layer norm
        bump = np.random.default_rng(5).standard_normal(cfg.dim).astype(np.float32) * 0.5
        model.mask_token.data = model.mask_token.data + bump
        _, _, pred_b = decode(model, enc, tmask)
        masked = tmask.masked_indices()
        visible = tmask.unmasked_indices()
        assert np.abs(pred_a.data[0, masked] - pred_b.data[0, masked]).max() > 1e-4
        # visible rows shift only through attention mixing; masked rows move directly
        direct = np.abs(pred_a.data[0, masked] - pred_b.data[0, masked]).mean()
        indirect = np.abs(pred_a.data[0, visible] - pred_b.data[0, visible]).mean()
        assert direct > indirect


class TestReconstructionLoss:
    def test_zero_when_masked_patches_match(self):
        cfg = tiny_cfg()
        img = Tensor(np.random.default_rng(0).random((1, 3, 16, 16)).astype(np.float32))
        target = patchify_array(img.data, 4)
        tmask = gen_random_token_mask(1, 4, 4, 0.5)
        loss = reconstruction_loss(Tensor(target.copy()), img, tmask)
        assert loss.item() < 1e-12

    def test_unmasked_differences_ignored(self):
        img = Tensor(np.random.default_rng(0).random((1, 3, 16, 16)).astype(np.float32))
        target = patchify_array(img.data, 4)
        tmask = gen_random_token_mask(1, 4, 4, 0.5)
        pred = target.copy()
        pred[0, tmask.unmasked_indices()] += 3.0  # corrupt only visible tokens
        loss = reconstruction_loss(Tensor(pred), img, tmask)
        assert loss.item() < 1e-12

    def test_normalized_target_statistics(self):
        rng = np.random.default_rng(3)
        target = patchify_array(rng.random((1, 3, 16, 16)).astype(np.float64), 4)
        mu = target.mean(-1, keepdims=True)
        var = target.var(-1, keepdims=True)
        normed = (target - mu) / np.sqrt(var + 1e-6)
        assert np.abs(normed.mean(-1)).max() < 1e-6
        assert np.abs(normed.std(-1) - 1).max() < 1e-4

    def test_no_masked_tokens_rejected(self):
        img = Tensor(np.zeros((1, 3, 16, 16), dtype=np.float32))
        pred = Tensor(np.zeros((1, 16, 48), dtype=np.float32))
        with pytest.raises(ContractError):
            reconstruction_loss(pred, img, TokenMask(4, 4, np.zeros((4, 4), np.uint8)))


class TestExtractPriors:
    def test_single_visible_token_gets_all_attention(self):
        cfg = tiny_cfg()
        model = MaeModel(cfg, np.random.default_rng(0))
        img = Tensor(np.random.default_rng(1).random((3, 16, 16)).astype(np.float32))
        bits = np.ones((4, 4), dtype=np.uint8)
        bits[1, 2] = 0
        tmask = TokenMask(4, 4, bits)
        priors = extract_priors(model, img, tmask)
        keep = 1 * 4 + 2
        expected = np.zeros(16, dtype=np.float32)
        expected[keep] = 1.0
        for row in priors.attention.data:
            assert np.allclose(row, expected)

    def test_single_layer_mean_is_identity(self):
        cfg = tiny_cfg(attn_layers_used=1)
        model = MaeModel(cfg, np.random.default_rng(0))
        img = Tensor(np.random.default_rng(1).random((3, 16, 16)).astype(np.float32))
        tmask = gen_random_token_mask(4, 4, 4, 0.5)
        priors = extract_priors(model, img, tmask)
        ref = brute_force_prior_attention(model, img.data.astype(np.float64), tmask)
        assert np.abs(priors.attention.data - ref).max() < 1e-5

    @pytest.mark.parametrize("heads,layers", [(1, 1), (2, 2)])
    def test_matches_brute_force_oracle(self, heads, layers):
        cfg = tiny_cfg(heads=heads, dec_layers=layers, enc_layers=layers)
        model = MaeModel(cfg, np.random.default_rng(7))
        img = Tensor(np.random.default_rng(8).random((3, 16, 16)).astype(np.float32))
        tmask = gen_random_token_mask(9, 4, 4, 0.5)
        priors = extract_priors(model, img, tmask)
        ref = brute_force_prior_attention(model, img.data.astype(np.float64), tmask)
        assert np.abs(priors.attention.data - ref).max() < 1e-5

    def test_rows_normalize_and_masked_keys_zero(self):
        cfg = tiny_cfg()
        model = MaeModel(cfg, np.random.default_rng(0))
        img = Tensor(np.random.default_rng(2).random((3, 16, 16)).astype(np.float32))
        tmask = gen_mae_pretrain_mask(5, 4, 4, 0.3)
        priors = extract_priors(model, img, tmask)
        att = priors.attention.data
        assert np.abs(att.sum(-1) - 1).max() < 1e-5
        assert np.all(att[:, tmask.masked_indices()] == 0.0)

    def test_recomputation_bit_identical(self):
        cfg = tiny_cfg()
        model = MaeModel(cfg, np.random.default_rng(0))
        img = Tensor(np.random.default_rng(3).random((3, 16, 16)).astype(np.float32))
        tmask = gen_random_token_mask(6, 4, 4, 0.5)
        a = extract_priors(model, img, tmask)
        b = extract_priors(model, img, tmask)
        assert np.array_equal(a.attention.data, b.attention.data)
        assert np.array_equal(a.features.data, b.features.data)

    def test_features_shape_and_layer_choice(self):
        cfg = tiny_cfg(feature_layer=1)
        model = MaeModel(cfg, np.random.default_rng(0))
        img = Tensor(np.random.default_rng(4).random((3, 16, 16)).astype(np.float32))
        tmask = gen_random_token_mask(7, 4, 4, 0.5)
        priors = extract_priors(model, img, tmask)
        assert priors.features.shape == (4, 4, 16)
        cfg2 = tiny_cfg(feature_layer=2)
        model2 = MaeModel(cfg2, np.random.default_rng(0))
        other = extract_priors(model2, img, tmask)
        assert not np.allclose(priors.features.data, other.features.data)


class TestPartialMask:
    def test_fully_masked_patch_input_is_zeros_and_ones(self):
        img = np.random.default_rng(0).random((3, 16, 16)).astype(np.float32)
        bits = np.zeros((16, 16), dtype=np.uint8)
        bits[:4, :4] = 1  # token 0 fully masked
        inputs = partial_token_inputs(img, MaskMap(16, 16, bits), 4)
        assert np.all(inputs[0, :48] == 0.0)
        assert np.all(inputs[0, 48:] == 1.0)

    def test_unmasked_patch_input_keeps_rgb(self):
        img = np.random.default_rng(0).random((3, 16, 16)).astype(np.float32)
        bits = np.zeros((16, 16), dtype=np.uint8)
        inputs = partial_token_inputs(img, MaskMap(16, 16, bits), 4)
        assert np.all(inputs[:, 48:] == 0.0)

    def test_toggle_off_is_bit_exact_baseline(self):
        cfg = tiny_cfg(partial_mask_embed=True)
        model = MaeModel(cfg, np.random.default_rng(0))
        img = Tensor(np.random.default_rng(1).random((3, 16, 16)).astype(np.float32))
        bits = np.zeros((16, 16), dtype=np.uint8)
        bits[0:6, 0:6] = 1  # covers token 0 fully, tokens (0,1),(1,0),(1,1) partially
        pixel_mask = MaskMap(16, 16, bits)
        from priorfill.masks import downsample_to_tokens

        tmask = downsample_to_tokens(pixel_mask, 4)
        enc = encode_visible(model, img, tmask)
        base = decode(model, enc, tmask)[2]
        partial = partial_mask_embed(model, img, pixel_mask)
        assert partial is not None
        with_partial = decode(model, enc, tmask, partial=partial)[2]
        again = decode(model, enc, tmask)[2]
        assert np.array_equal(base.data, again.data)
        assert not np.array_equal(base.data, with_partial.data)

    def test_missing_projection_rejected(self):
        cfg = tiny_cfg(partial_mask_embed=False)
        model = MaeModel(cfg, np.random.default_rng(0))
        img = Tensor(np.zeros((3, 16, 16), dtype=np.float32))
        with pytest.raises(ConfigError):
            partial_mask_embed(model, img, MaskMap(16, 16, np.ones((16, 16), np.uint8)))


class TestPretrainStep:
    def test_loss_finite_and_positive(self):
        cfg = tiny_cfg()
        model = MaeModel(cfg, np.random.default_rng(0))
        opt = Adam(model.named_parameters(), 1e-3)
        batch = Tensor(np.random.default_rng(1).random((2, 3, 16, 16)).astype(np.float32))
        loss = mae_pretrain_step(model, batch, np.random.default_rng(2), opt)
        assert np.isfinite(loss) and loss > 0

    def test_deterministic_given_seed(self):
        losses = []
        for _ in range(2):
            cfg = tiny_cfg()
            model = MaeModel(cfg, np.random.default_rng(0))
            opt = Adam(model.named_parameters(), 1e-3)
            batch = Tensor(np.random.default_rng(1).random((2, 3, 16, 16)).astype(np.float32))
            rng = np.random.default_rng(2)
            losses.append([mae_pretrain_step(model, batch, rng, opt) for _ in range(2)])
        assert losses[0] == losses[1]
