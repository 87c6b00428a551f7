"""Metric tests: PSNR closed forms, SSIM properties, attention argmax map."""

import numpy as np
import pytest

from priorfill.errors import ContractError
from priorfill.masks import TokenMask
from priorfill.metrics import (
    EvalReport,
    attention_argmax_map,
    hole_psnr,
    psnr,
    ratio_bucket,
    render_attention_map,
    ssim,
)


class TestPsnr:
    def test_identical_capped(self):
        a = np.random.default_rng(0).random((3, 16, 16))
        assert psnr(a, a) == 99.0

    def test_uniform_difference_closed_form(self):
        a = np.full((1, 8, 8), 0.5)
        b = np.full((1, 8, 8), 0.4)
        # MSE = 0.01 -> 20 dB exactly
        assert abs(psnr(a, b) - 20.0) < 0.01

    def test_monotone_in_error(self):
        a = np.zeros((4, 4))
        values = [psnr(a, np.full((4, 4), err)) for err in (0.05, 0.1, 0.2, 0.4)]
        assert all(x > y for x, y in zip(values, values[1:]))

    def test_hole_psnr_selects_masked_pixels(self):
        rng = np.random.default_rng(1)
        gt = rng.random((3, 8, 8))
        pred = gt.copy()
        bits = np.zeros((8, 8), np.uint8)
        bits[:4] = 1
        pred[:, 4:] += 10.0  # corrupt only the unmasked region
        assert hole_psnr(pred, gt, bits) == 99.0

    def test_hole_psnr_requires_holes(self):
        with pytest.raises(ContractError):
            hole_psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 4)), np.zeros((4, 4), np.uint8))


class TestSsim:
    def test_self_similarity_is_one(self):
        x = np.random.default_rng(2).random((16, 16))
        assert abs(ssim(x, x) - 1.0) < 1e-9

    def test_inverted_checkerboard_negative(self):
        yy, xx = np.mgrid[0:16, 0:16]
        checker = ((yy + xx) % 2).astype(np.float64)
        assert ssim(checker, 1.0 - checker) < 0.0

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        a = rng.random((16, 16))
        b = rng.random((16, 16))
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-9

    def test_shift_invariance_on_equal_mean_pair(self):
        # with per-window means equal (identical images), the luminance term
        # is exactly 1 before and after a constant shift
        x = np.random.default_rng(4).random((16, 16)) * 0.5
        assert abs(ssim(x + 0.3, x + 0.3) - ssim(x, x)) < 1e-6

    def test_shift_sensitivity_bounded_for_noisy_pair(self):
        # canonical SSIM's luminance term is not exactly shift invariant once
        # per-window means differ; the drift stays small for small noise
        rng = np.random.default_rng(5)
        x = rng.random((16, 16)) * 0.5 + 0.2
        y = np.clip(x + rng.normal(0, 0.02, x.shape), 0, 1)
        drift = abs(ssim(x + 0.2, y + 0.2) - ssim(x, y))
        assert drift < 1e-3

    def test_multichannel_averaged(self):
        rng = np.random.default_rng(6)
        a = rng.random((3, 16, 16))
        per_channel = np.mean([ssim(a[c], a[c]) for c in range(3)])
        assert abs(ssim(a, a) - per_channel) < 1e-12

    def test_too_small_rejected(self):
        with pytest.raises(ContractError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestAttentionMap:
    def test_single_unmasked_token_attracts_all(self):
        bits = np.ones((3, 3), np.uint8)
        bits[1, 1] = 0
        tmask = TokenMask(3, 3, bits)
        att = np.zeros((9, 9), np.float32)
        att[:, 4] = 1.0
        idx_map, rgb = attention_argmax_map(att, tmask)
        masked = tmask.bits.astype(bool)
        assert np.all(idx_map[masked] == 4)
        assert np.all(idx_map[~masked] == -1)
        assert np.all(rgb[:, ~masked] == 0.0)  # unmasked rendered black

    def test_argmax_never_masked(self):
        rng = np.random.default_rng(7)
        for seed in range(20):
            from priorfill.masks import gen_random_token_mask

            tmask = gen_random_token_mask(seed, 4, 4, 0.5)
            att = rng.random((16, 16)).astype(np.float32)
            att[:, tmask.masked_indices()] = 0.0
            att /= att.sum(-1, keepdims=True)
            idx_map, _ = attention_argmax_map(att, tmask)
            chosen = idx_map[tmask.bits.astype(bool)]
            assert np.all(~tmask.flat().astype(bool)[chosen])

    def test_matches_brute_force_argmax(self):
        rng = np.random.default_rng(8)
        from priorfill.masks import gen_random_token_mask

        tmask = gen_random_token_mask(3, 4, 4, 0.5)
        att = rng.random((16, 16)).astype(np.float32)
        att[:, tmask.masked_indices()] = 0.0
        idx_map, _ = attention_argmax_map(att, tmask)
        for m in tmask.masked_indices():
            best, best_v = -1, -1.0
            for u in range(16):
                if att[m, u] > best_v:
                    best, best_v = u, att[m, u]
            assert idx_map.reshape(-1)[m] == best

    def test_render_upscales(self):
        bits = np.ones((2, 2), np.uint8)
        bits[0, 0] = 0
        tmask = TokenMask(2, 2, bits)
        att = np.zeros((4, 4), np.float32)
        att[:, 0] = 1.0
        img = render_attention_map(att, tmask, scale=4)
        assert img.shape == (3, 8, 8)


class TestEvalReport:
    def test_aggregate_is_mean(self):
        rep = EvalReport()
        rep.add("a", 20.0, 0.8, 0.15)
        rep.add("b", 30.0, 0.9, 0.45)
        agg = rep.aggregate()
        assert agg["psnr"] == pytest.approx(25.0)
        assert agg["ssim"] == pytest.approx(0.85)
        assert agg["count"] == 2

    def test_buckets(self):
        assert ratio_bucket(0.15) == "10-20%"
        assert ratio_bucket(0.45) == "40-50%"

    def test_serialization(self, tmp_path):
        rep = EvalReport()
        rep.add("a", 20.0, 0.8, 0.15)
        csv_path = str(tmp_path / "r.csv")
        json_path = str(tmp_path / "r.json")
        rep.to_csv(csv_path)
        rep.to_json(json_path)
        assert open(csv_path).readline().strip() == "name,psnr,ssim,mask_ratio,bucket"
        import json

        data = json.load(open(json_path))
        assert data["aggregate"]["count"] == 1
