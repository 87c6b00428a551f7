"""Command-line interface.

Exit codes: 0 success, 1 runtime or validation failure, 2 usage error.
Every subcommand is deterministic given --seed (and --deterministic, which is
the default execution mode: all work is single-threaded per step).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import masks
from .errors import CheckpointError, ConfigError, ContractError, ShapeError, UnsupportedSizeError

USAGE_ERROR = 2
RUNTIME_ERROR = 1


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--deterministic", action="store_true",
                   help="force deterministic execution (already the default behavior)")


def _load_config(args, overrides=None):
    from .trainer import RunConfig, load_run_config

    if args.config:
        cfg = load_run_config(args.config)
    else:
        cfg = RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    for key, value in (overrides or {}).items():
        setattr(cfg, key, value)
    return cfg


def cmd_genmask(args) -> int:
    from .data import save_mask

    rng = np.random.default_rng(args.seed)
    if args.square is not None:
        mask = masks.square_mask(args.height, args.width, args.square)
    elif args.family == "irregular":
        mask = masks.gen_irregular(rng, args.height, args.width, args.ratio)
    elif args.family == "polygon":
        mask = masks.gen_polygon(rng, args.height, args.width, args.ratio)
    else:
        mask = masks.gen_acr_training_mask(rng, args.height, args.width)
    os.makedirs(args.out, exist_ok=True)
    png = os.path.join(args.out, f"mask_{args.seed}.png")
    save_mask(png, mask)
    sidecar = {"seed": args.seed, "family": mask.family, "ratio": mask.ratio()}
    with open(png.replace(".png", ".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2)
    print(f"wrote {png} (family={mask.family}, ratio={mask.ratio():.3f})")
    return 0


def cmd_pretrain_mae(args) -> int:
    from .trainer import pretrain_mae

    cfg = _load_config(args)
    steps = args.steps if args.steps is not None else cfg.total_steps
    result = pretrain_mae(cfg, out_dir=args.out, steps=steps)
    print(f"final loss {result['losses'][-1]:.6f}; checkpoint {result['ckpt']}")
    return 0


def cmd_train_acr(args) -> int:
    from .trainer import train_acr

    cfg = _load_config(args)
    steps = args.steps if args.steps is not None else cfg.total_steps
    resume = (args.resume_acr, args.resume_disc) if args.resume_acr else None
    result = train_acr(cfg, mae_ckpt=args.ckpt_mae, out_dir=args.out, steps=steps, resume=resume)
    last = result["rows"][-1]
    print(f"step {last['step']}: l1={last['loss_l1']:.4f} d={last['loss_d']:.4f}")
    print(f"checkpoints: {result['acr_ckpt']}, {result['disc_ckpt']}")
    return 0


def cmd_finetune_hr(args) -> int:
    from .trainer import dynamic_resolution_finetune

    cfg = _load_config(args)
    result = dynamic_resolution_finetune(
        cfg, args.ckpt_acr, args.ckpt_disc, mae_ckpt=args.ckpt_mae, out_dir=args.out
    )
    sizes = sorted(set(result["resolutions"]))
    print(f"finetuned across resolutions {sizes}; checkpoint {result['acr_ckpt']}")
    return 0


def _load_models_for_inference(ckpt_acr: str, ckpt_mae: str):
    from .acr import AcrConfig, AcrGenerator
    from .trainer import RunConfig, load_checkpoint, load_mae
    from .upsampler import PriorUpsampler

    ck = load_checkpoint(ckpt_acr)
    if ck.model_kind != "acr":
        raise CheckpointError(f"{ckpt_acr!r} holds {ck.model_kind!r}, expected 'acr'")
    cfg = RunConfig.from_dict(ck.config)
    rng = np.random.default_rng(0)
    gen = AcrGenerator(cfg.acr, rng)
    gen.load_state({k[4:]: v for k, v in ck.tensors.items() if k.startswith("gen.")})
    gen.eval()
    mae_model = load_mae(ckpt_mae) if ckpt_mae else None
    ups = None
    if ck.extra.get("has_upsampler") and mae_model is not None:
        ups = PriorUpsampler(rng, mae_model.cfg.dim + 2, cfg.acr.stage_widths)
        ups.load_state({k[4:]: v for k, v in ck.tensors.items() if k.startswith("ups.")})
        ups.eval()
    return cfg, gen, ups, mae_model


def _inpaint_array(cfg, gen, ups, mae_model, img: np.ndarray, mask: masks.MaskMap):
    from .acr import acr_forward
    from .mae import extract_priors
    from .numerics import Tensor, no_grad
    from .trainer import _image_at_mae_size, _mask_at_mae_size, _token_mask_for_mae
    from .upsampler import build_fp_prime_batch

    masked = img * (1 - mask.bits)[None]
    priors = pyramid = tmask = None
    with no_grad():
        if ups is not None and mae_model is not None:
            m_mae = _mask_at_mae_size(mask, mae_model.cfg.img)
            tmask = _token_mask_for_mae(m_mae, mae_model.cfg.patch)
            img_mae = _image_at_mae_size(masked, mae_model.cfg.img) * (1.0 - m_mae.bits)[None]
            priors = extract_priors(mae_model, Tensor(img_mae.astype(np.float32)), tmask)
            fp = build_fp_prime_batch([priors], mask.h, mask.w)
            pyramid = ups(fp)
        pred = acr_forward(
            gen,
            Tensor(masked[None].astype(np.float32)),
            Tensor(mask.bits[None, None].astype(np.float32)),
            priors=priors, pyramid=pyramid, upsampler=ups, tmask=tmask,
        )
    return pred.data[0]


def cmd_inpaint(args) -> int:
    from .data import load_image, load_mask, save_image
    from .metrics import hole_psnr, psnr

    for path in (args.ckpt_acr, args.image, args.mask):
        if not os.path.exists(path):
            print(f"error: missing file {path!r}", file=sys.stderr)
            return RUNTIME_ERROR
    cfg, gen, ups, mae_model = _load_models_for_inference(args.ckpt_acr, args.ckpt_mae)
    img = load_image(args.image)
    mask = load_mask(args.mask)
    if img.shape[1:] != mask.bits.shape:
        print(f"error: image {img.shape[1:]} and mask {mask.bits.shape} extents differ", file=sys.stderr)
        return RUNTIME_ERROR
    if img.shape[1] % 8 or img.shape[2] % 8:
        print("error: image extents must be divisible by 8", file=sys.stderr)
        return RUNTIME_ERROR
    pred = _inpaint_array(cfg, gen, ups, mae_model, img, mask)
    if args.raw:
        out_img = pred
    else:
        out_img = img * (1 - mask.bits)[None] + pred * mask.bits[None]
    save_image(args.out_file, out_img)
    print(f"wrote {args.out_file}")
    if args.gt:
        gt = load_image(args.gt)
        print(f"psnr={psnr(out_img, gt):.2f} dB hole_psnr={hole_psnr(out_img, gt, mask.bits):.2f} dB")
    return 0


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .metrics import EvalReport, psnr, ssim

    cfg, gen, ups, mae_model = _load_models_for_inference(args.ckpt_acr, args.ckpt_mae)
    images = load_dataset(args.dataset, args.size)
    report = EvalReport()
    rng = np.random.default_rng(args.seed)
    for i, img in enumerate(images):
        mask = masks.gen_acr_training_mask(rng, args.size, args.size)
        pred = _inpaint_array(cfg, gen, ups, mae_model, img, mask)
        comp = img * (1 - mask.bits)[None] + pred * mask.bits[None]
        report.add(f"img{i:03d}", psnr(comp, img), ssim(comp, img), mask.ratio())
    os.makedirs(args.out, exist_ok=True)
    report.to_csv(os.path.join(args.out, "eval.csv"))
    report.to_json(os.path.join(args.out, "eval.json"))
    agg = report.aggregate()
    print(f"evaluated {agg['count']} images: psnr={agg['psnr']:.2f} dB ssim={agg['ssim']:.4f}")
    return 0


def cmd_vis_attn(args) -> int:
    from .data import load_image, load_mask, save_image
    from .mae import extract_priors
    from .metrics import render_attention_map
    from .numerics import Tensor
    from .trainer import _token_mask_for_mae, load_mae

    mae_model = load_mae(args.ckpt_mae)
    img = load_image(args.image, size=mae_model.cfg.img)
    mask = load_mask(args.mask)
    if mask.h != mae_model.cfg.img:
        from .trainer import _mask_at_mae_size

        mask = _mask_at_mae_size(mask, mae_model.cfg.img)
    tmask = _token_mask_for_mae(mask, mae_model.cfg.patch)
    masked = img * (1 - mask.bits)[None]
    priors = extract_priors(mae_model, Tensor(masked.astype(np.float32)), tmask)
    rgb = render_attention_map(priors.attention, tmask, scale=mae_model.cfg.patch)
    save_image(args.out_file, rgb)
    print(f"wrote {args.out_file}")
    return 0


def cmd_gradcheck(args) -> int:
    from .verify import GRAD_TOL, gradient_integrity

    modules = args.module if args.module else None
    results = gradient_integrity(modules)
    worst_name, worst = "", 0.0
    for name, err in results:
        status = "ok" if err < GRAD_TOL else "FAIL"
        print(f"{status:4s} {name:40s} max rel err {err:.3e}")
        if err > worst:
            worst_name, worst = name, err
    if worst >= GRAD_TOL:
        print(f"worst offender: {worst_name} at {worst:.3e} (tolerance {GRAD_TOL})", file=sys.stderr)
        return RUNTIME_ERROR
    print(f"all {len(results)} checks passed (worst {worst:.3e} in {worst_name})")
    return 0


def cmd_selftest(args) -> int:
    from .verify import selftest

    return 0 if selftest() else RUNTIME_ERROR


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="priorfill", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("genmask", help="generate a mask PNG plus JSON sidecar")
    _add_common(p)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--family", choices=["irregular", "polygon", "mixed"], default="mixed")
    p.add_argument("--ratio", type=float, default=0.3)
    p.add_argument("--square", type=float, default=None, help="centered square mask at this area ratio")
    p.set_defaults(fn=cmd_genmask)

    p = sub.add_parser("pretrain-mae", help="stage one: autoencoder pretraining")
    _add_common(p)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(fn=cmd_pretrain_mae)

    p = sub.add_parser("train-acr", help="stage two: restoration training")
    _add_common(p)
    p.add_argument("--ckpt-mae", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--resume-acr", default=None)
    p.add_argument("--resume-disc", default=None)
    p.set_defaults(fn=cmd_train_acr)

    p = sub.add_parser("finetune-hr", help="dynamic-resolution finetuning")
    _add_common(p)
    p.add_argument("--ckpt-acr", required=True)
    p.add_argument("--ckpt-disc", required=True)
    p.add_argument("--ckpt-mae", required=True)
    p.set_defaults(fn=cmd_finetune_hr)

    p = sub.add_parser("inpaint", help="fill holes in one image")
    _add_common(p)
    p.add_argument("--ckpt-acr", required=True)
    p.add_argument("--ckpt-mae", default=None)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out-file", default="inpainted.png")
    p.add_argument("--gt", default=None, help="ground truth for PSNR reporting")
    p.add_argument("--raw", action="store_true", help="write the unblended generator output")
    p.set_defaults(fn=cmd_inpaint)

    p = sub.add_parser("eval", help="PSNR/SSIM over a dataset directory")
    _add_common(p)
    p.add_argument("--ckpt-acr", required=True)
    p.add_argument("--ckpt-mae", default=None)
    p.add_argument("--dataset", required=True)
    p.add_argument("--size", type=int, default=32)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("vis-attn", help="render the strongest-attention map")
    _add_common(p)
    p.add_argument("--ckpt-mae", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out-file", default="attention.png")
    p.set_defaults(fn=cmd_vis_attn)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_common(p)
    p.add_argument("--module", action="append",
                   choices=["numerics", "mae", "acr", "upsampler", "losses"],
                   help="restrict to one or more modules (default: all)")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("selftest", help="run every module invariant suite")
    _add_common(p)
    p.set_defaults(fn=cmd_selftest)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ContractError, ShapeError, UnsupportedSizeError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_ERROR
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
