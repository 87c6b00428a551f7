"""Built-in verification: finite-difference suites and module invariant checks.

These back the ``gradcheck`` and ``selftest`` commands. Gradient suites run in
float64 (finite differences are unreliable in float32) and report the worst
relative error per checked operation.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import masks
from .acr import (
    AcrConfig,
    AcrGenerator,
    FfcBlock,
    PatchDiscriminator,
    acr_forward,
    contextual_attention,
    discriminate,
    prior_attention_aggregate,
)
from .errors import ContractError
from .losses import (
    HrfExtractor,
    LossWeights,
    disc_loss,
    feature_match,
    gen_adv_loss,
    gradient_penalty,
    hrf_loss,
    l1_unmasked,
)
from .mae import MaeConfig, MaeModel, TransformerBlock, decode, encode_visible, extract_priors
from .masks import TokenMask, downsample_to_tokens, gen_acr_training_mask, gen_mae_pretrain_mask
from .metrics import attention_argmax_map, psnr, ssim
from .numerics import Tensor, backward, bilinear_resize, conv2d, deconv2d, fft2d, ifft2d, ops, precision
from .numerics.fft import _fft2d_stacked, _ifft2d_stacked
from .numerics.gradcheck import gradcheck
from .upsampler import GatedDeconvBlock, PriorUpsampler, build_fp_prime, inject

GRAD_TOL = 1e-3


def _rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# gradient suites (each returns list of (name, max_rel_err))


def _elementwise_checks(rng) -> list:
    out = []
    a = Tensor(rng.standard_normal(12), requires_grad=True)
    b = Tensor(rng.standard_normal(12), requires_grad=True)
    for kind in ("add", "sub", "mul"):
        err = gradcheck(lambda a, b, k=kind: ops.tsum(ops.square(ops.binary_elementwise(a, b, k))), [a, b])
        out.append((f"numerics.{kind}", err))
    return out


def _activation_checks(rng) -> list:
    out = []
    for kind in ("relu", "leaky_relu", "sigmoid", "gelu", "tanh"):
        x = Tensor(rng.standard_normal(24) + np.sign(rng.standard_normal(24)) * 0.05, requires_grad=True)
        err = gradcheck(lambda x, k=kind: ops.tsum(ops.square(ops.activation(x, k))), [x])
        out.append((f"numerics.{kind}", err))
    return out


def gradcheck_numerics() -> list:
    with precision("float64"):
        rng = _rng(10)
        results = _elementwise_checks(rng) + _activation_checks(rng)
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        results.append(("numerics.matmul", gradcheck(lambda a, b: ops.tsum(ops.square(ops.matmul(a, b))), [a, b])))
        x = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
        bias = Tensor(rng.standard_normal(3), requires_grad=True)
        results.append(
            ("numerics.conv2d", gradcheck(lambda x, w, bias: ops.tsum(ops.square(conv2d(x, w, bias, stride=2, pad=1))), [x, w, bias]))
        )
        xd = Tensor(rng.standard_normal((1, 3, 3, 3)), requires_grad=True)
        wd = Tensor(rng.standard_normal((3, 2, 4, 4)), requires_grad=True)
        results.append(
            ("numerics.deconv2d", gradcheck(lambda xd, wd: ops.tsum(ops.square(deconv2d(xd, wd, stride=2, pad=1))), [xd, wd]))
        )
        sx = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        smask = np.array([0, 1, 0, 0, 1], dtype=np.uint8)
        sw = Tensor(rng.standard_normal((3, 5)))
        results.append(
            ("numerics.softmax_lastdim", gradcheck(lambda sx: ops.tsum(ops.mul(ops.softmax_lastdim(sx, smask), sw)), [sx]))
        )
        lx = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
        lg = Tensor(rng.standard_normal(6), requires_grad=True)
        lb = Tensor(rng.standard_normal(6), requires_grad=True)
        lw = Tensor(rng.standard_normal((4, 6)))
        results.append(
            ("numerics.layer_norm", gradcheck(lambda lx, lg, lb: ops.tsum(ops.mul(ops.layer_norm(lx, lg, lb), lw)), [lx, lg, lb]))
        )
        bx = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        bg = Tensor(rng.standard_normal(3), requires_grad=True)
        bb = Tensor(rng.standard_normal(3), requires_grad=True)
        bw = Tensor(rng.standard_normal((2, 3, 4, 4)))

        def bn_loss(bx, bg, bb):
            return ops.tsum(ops.mul(ops.batch_norm(bx, bg, bb, np.zeros(3), np.ones(3), training=True), bw))

        results.append(("numerics.batch_norm", gradcheck(bn_loss, [bx, bg, bb])))
        fx = Tensor(rng.standard_normal((1, 1, 4, 4)), requires_grad=True)
        fw = Tensor(rng.standard_normal((1, 2, 4, 4)))
        results.append(("numerics.fft2d", gradcheck(lambda fx: ops.tsum(ops.mul(_fft2d_stacked(fx), fw)), [fx])))
        zx = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
        zw = Tensor(rng.standard_normal((1, 1, 4, 4)))
        results.append(("numerics.ifft2d", gradcheck(lambda zx: ops.tsum(ops.mul(_ifft2d_stacked(zx), zw)), [zx])))
        rx = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
        rw = Tensor(rng.standard_normal((1, 2, 5, 5)))
        results.append(
            ("numerics.bilinear_resize", gradcheck(lambda rx: ops.tsum(ops.mul(bilinear_resize(rx, 5, 5), rw)), [rx]))
        )
    return results


def gradcheck_mae() -> list:
    with precision("float64"):
        rng = _rng(11)
        blk = TransformerBlock(rng, dim=8, heads=2)
        params = list(blk.named_parameters().values())
        x_in = Tensor(rng.standard_normal((1, 5, 8)))
        w = Tensor(rng.standard_normal((1, 5, 8)))

        def f(*_params):
            out, _, _ = blk(x_in)
            return ops.tsum(ops.mul(out, w))

        return [("mae.transformer_block", gradcheck(f, params))]


def gradcheck_upsampler() -> list:
    with precision("float64"):
        rng = _rng(12)
        blk = GatedDeconvBlock(rng, 3, 4)
        params = list(blk.named_parameters().values())
        x_in = Tensor(rng.standard_normal((1, 3, 3, 3)))
        w = Tensor(rng.standard_normal((1, 4, 6, 6)))

        def f(*_params):
            return ops.tsum(ops.mul(blk(x_in), w))

        results = [("upsampler.gated_deconv_block", gradcheck(f, params))]
        feats = Tensor(rng.standard_normal((1, 2, 4, 4)))
        p = Tensor(rng.standard_normal((1, 2, 4, 4)))
        alpha = Tensor(np.zeros(()), requires_grad=True)
        results.append(
            ("upsampler.inject_alpha", gradcheck(lambda alpha: ops.tsum(ops.square(inject(feats, p, alpha))), [alpha]))
        )
    return results


def gradcheck_acr() -> list:
    with precision("float64"):
        rng = _rng(13)
        blk = FfcBlock(rng, 8, 0.5)
        params = list(blk.named_parameters().values())
        x_in = Tensor(rng.standard_normal((1, 8, 4, 4)))
        w = Tensor(rng.standard_normal((1, 8, 4, 4)))

        def f(*_params):
            return ops.tsum(ops.mul(blk(x_in), w))

        results = [("acr.ffc_block", gradcheck(f, params))]
        disc = PatchDiscriminator(rng, 3, widths=(4, 6, 6, 8))
        dparams = list(disc.named_parameters().values())
        img = Tensor(rng.random((1, 3, 16, 16)))

        def fd(*_params):
            score, feats = discriminate(disc, img)
            return ops.add(ops.tsum(ops.square(score)), ops.tmean(ops.square(feats[1])))

        results.append(("acr.discriminator", gradcheck(fd, dparams)))
    return results


def gradcheck_losses() -> list:
    with precision("float64"):
        rng = _rng(14)
        disc = PatchDiscriminator(rng, 3, widths=(4, 6, 6, 8))
        dparams = list(disc.named_parameters().values())
        real = Tensor(rng.random((1, 3, 16, 16)))

        def f_gp(*_params):
            return gradient_penalty(disc, real)

        results = [("losses.gradient_penalty_wrt_disc", gradcheck(f_gp, dparams))]
        pred = Tensor(rng.random((1, 3, 16, 16)), requires_grad=True)
        gt = Tensor(rng.random((1, 3, 16, 16)))
        bits = masks.gen_irregular(_rng(3), 16, 16, 0.3).bits[None, None]
        results.append(("losses.l1_unmasked", gradcheck(lambda pred: l1_unmasked(pred, gt, bits), [pred])))
        fake = Tensor(rng.random((1, 3, 16, 16)), requires_grad=True)
        results.append(("losses.gen_adv", gradcheck(lambda fake: gen_adv_loss(disc, fake), [fake])))
        results.append(("losses.feature_match", gradcheck(lambda fake: feature_match(disc, gt, fake), [fake])))
        hrf = HrfExtractor(5)
        hrf.freeze()
        results.append(("losses.hrf", gradcheck(lambda fake: hrf_loss(hrf, gt, fake), [fake])))
    return results


GRAD_SUITES: dict[str, Callable[[], list]] = {
    "numerics": gradcheck_numerics,
    "mae": gradcheck_mae,
    "upsampler": gradcheck_upsampler,
    "acr": gradcheck_acr,
    "losses": gradcheck_losses,
}


def gradient_integrity(modules=None) -> list:
    """Run the requested gradient suites; returns [(name, max_rel_err), ...]."""
    names = modules or list(GRAD_SUITES)
    results = []
    for n in names:
        if n not in GRAD_SUITES:
            raise ContractError(f"unknown gradcheck module {n!r}")
        results.extend(GRAD_SUITES[n]())
    return results


# ---------------------------------------------------------------------------
# invariant self-test suites (fast, float32)


def check_softmax_normalization() -> None:
    rng = _rng(0)
    x = Tensor(rng.standard_normal((6, 9)).astype(np.float32))
    mask = (rng.random(9) < 0.4).astype(np.uint8)
    mask[0] = 0
    out = ops.softmax_lastdim(x, mask)
    assert np.abs(out.data.sum(-1) - 1).max() < 1e-6, "softmax rows must sum to 1"
    assert np.all(out.data[:, mask.astype(bool)] == 0), "masked keys must be exactly zero"


def check_attention_priors() -> None:
    rng = _rng(1)
    cfg = MaeConfig(img=16, patch=4, enc_layers=2, dec_layers=2, dim=16, heads=2)
    model = MaeModel(cfg, rng)
    img = Tensor(rng.random((3, 16, 16)).astype(np.float32))
    tmask = gen_mae_pretrain_mask(rng, cfg.grid, cfg.grid, 0.3)
    priors = extract_priors(model, img, tmask)
    att = priors.attention.data
    assert np.abs(att.sum(-1) - 1).max() < 1e-5, "prior attention rows must normalize"
    assert np.all(att[:, tmask.masked_indices()] == 0), "masked keys must be exactly zero"
    idx_map, _ = attention_argmax_map(priors.attention, tmask)
    attended = idx_map[tmask.bits.astype(bool)]
    assert np.all(~tmask.flat().astype(bool)[attended]), "argmax must reference unmasked tokens"
    again = extract_priors(model, img, tmask)
    assert np.array_equal(att, again.attention.data), "prior extraction must be deterministic"


def check_mask_statistics() -> None:
    for seed in range(30):
        tm = gen_mae_pretrain_mask(seed, 8, 8, 0.1 + 0.4 * seed / 29)
        assert tm.count() == 48, "pretraining masks must hit the exact budget"
    fams = [gen_acr_training_mask(s, 32, 32).family for s in range(400)]
    freq = fams.count("combined") / len(fams)
    assert 0.13 <= freq <= 0.27, f"combined-mask frequency {freq} out of band"
    for seed in range(20):
        m = masks.gen_irregular(seed, 8, 8, 0.3)
        tm = downsample_to_tokens(m, 2)
        assert np.all(tm.upsample(2).bits >= m.bits), "token mask must cover the pixel mask"


def check_zero_init_inertness() -> None:
    rng = _rng(2)
    mae_cfg = MaeConfig(img=32, patch=8, enc_layers=2, dec_layers=2, dim=16, heads=2)
    mae_model = MaeModel(mae_cfg, rng)
    acr_cfg = AcrConfig(stage_widths=(8, 12, 16, 16), n_ffc=2)
    gen = AcrGenerator(acr_cfg, rng)
    gen.eval()
    ups = PriorUpsampler(rng, mae_cfg.dim + 2, acr_cfg.stage_widths)
    ups.eval()
    img = rng.random((3, 32, 32)).astype(np.float32)
    m = masks.gen_irregular(rng, 32, 32, 0.3)
    tmask = downsample_to_tokens(m, 8)
    masked = img * (1 - m.bits)[None]
    priors = extract_priors(mae_model, Tensor(masked), tmask)
    fp = build_fp_prime(priors, 32, 32)
    pyramid = ups(ops.reshape(fp, (1,) + tuple(fp.shape)))
    with_branch = acr_forward(
        gen, Tensor(masked[None]), Tensor(m.bits[None, None].astype(np.float32)),
        priors=priors, pyramid=pyramid, upsampler=ups, tmask=tmask,
    )
    without = acr_forward(gen, Tensor(masked[None]), Tensor(m.bits[None, None].astype(np.float32)))
    diff = np.abs(with_branch.data - without.data).max()
    assert diff < 1e-6, f"zero-init branch must be inert, got {diff}"


def check_fft_roundtrip() -> None:
    rng = _rng(3)
    x = Tensor(rng.standard_normal((1, 2, 8, 8)).astype(np.float32))
    back = ifft2d(fft2d(x))
    assert np.abs(back.data - x.data).max() < 1e-6, "fft roundtrip drifted"
    grid = fft2d(x)
    spatial = float((x.data.astype(np.float64) ** 2).sum())
    spectral = float((grid.real.data.astype(np.float64) ** 2 + grid.imag.data.astype(np.float64) ** 2).sum())
    assert abs(spatial - spectral) < 1e-5, "energy must be preserved"


def check_conv_oracle() -> None:
    rng = _rng(4)
    x = rng.standard_normal((1, 2, 6, 6)).astype(np.float64)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float64)
    with precision("float64"):
        y = conv2d(Tensor(x), Tensor(w), pad=1).data
    ref = np.zeros_like(y)
    for oc in range(3):
        for oy in range(6):
            for ox in range(6):
                acc = 0.0
                for ic in range(2):
                    for ky in range(3):
                        for kx in range(3):
                            iy, ix = oy + ky - 1, ox + kx - 1
                            if 0 <= iy < 6 and 0 <= ix < 6:
                                acc += x[0, ic, iy, ix] * w[oc, ic, ky, kx]
                ref[0, oc, oy, ox] = acc
    assert np.abs(y - ref).max() < 1e-6, "conv must match the nested-loop oracle"


def check_aggregation_oracles() -> None:
    rng = _rng(5)
    gh = gw = 4
    feats = Tensor(rng.standard_normal((1, 6, 8, 8)).astype(np.float32))
    bits = masks.gen_random_token_mask(rng, gh, gw, 0.5).bits
    tmask = TokenMask(gh, gw, bits)
    t = gh * gw
    att = rng.random((t, t)).astype(np.float32)
    att[:, tmask.masked_indices()] = 0
    att /= att.sum(-1, keepdims=True)
    beta = Tensor(np.asarray(1.0, dtype=np.float32))
    out = prior_attention_aggregate(feats, att, tmask, beta)
    cells = feats.data.reshape(1, 6, 4, 2, 4, 2).transpose(0, 2, 4, 1, 3, 5).reshape(1, 16, 24)
    expect = cells.copy()
    for m in tmask.masked_indices():
        acc = np.zeros(24, dtype=np.float64)
        for u in tmask.unmasked_indices():
            acc += att[m, u] * cells[0, u]
        expect[0, m] = cells[0, m] + acc
    expect_map = expect.reshape(1, 4, 4, 6, 2, 2).transpose(0, 3, 1, 4, 2, 5).reshape(1, 6, 8, 8)
    assert np.abs(out.data - expect_map).max() < 1e-5, "prior aggregation must match the double loop"
    delta = contextual_attention(feats, tmask)
    normed = cells / (np.linalg.norm(cells, axis=-1, keepdims=True) + 1e-8)
    for m in tmask.masked_indices():
        sims = np.array([normed[0, m] @ normed[0, u] for u in tmask.unmasked_indices()])
        wts = np.exp(sims - sims.max())
        wts /= wts.sum()
        expected = sum(w * cells[0, u] for w, u in zip(wts, tmask.unmasked_indices()))
        got = delta.data.reshape(1, 6, 4, 2, 4, 2).transpose(0, 2, 4, 1, 3, 5).reshape(1, 16, 24)[0, m]
        assert np.abs(got - expected).max() < 1e-5, "contextual attention must match the oracle"


def check_metrics() -> None:
    rng = _rng(6)
    a = rng.random((3, 16, 16)).astype(np.float32)
    assert psnr(a, a) == 99.0
    assert abs(psnr(a, np.clip(a - 0.1, -10, 10)) - 20.0) < 0.01
    assert abs(ssim(a, a) - 1.0) < 1e-9


SELFTEST_SUITES = {
    "numerics.fft_roundtrip": check_fft_roundtrip,
    "numerics.conv_oracle": check_conv_oracle,
    "numerics.softmax": check_softmax_normalization,
    "masking.statistics": check_mask_statistics,
    "mae.prior_attention": check_attention_priors,
    "upsampler.zero_init_inertness": check_zero_init_inertness,
    "acr.aggregation_oracles": check_aggregation_oracles,
    "metrics.sanity": check_metrics,
}


def selftest(print_fn=print) -> bool:
    """Run every invariant suite; prints one PASS/FAIL line per suite."""
    ok = True
    for name, fn in SELFTEST_SUITES.items():
        t0 = time.time()
        try:
            fn()
            print_fn(f"PASS {name} ({time.time() - t0:.2f}s)")
        except AssertionError as e:
            ok = False
            print_fn(f"FAIL {name}: {e}")
    return ok
