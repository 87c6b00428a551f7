"""Ablation calibration: find a toy regime where the prior branch wins
consistently (not part of the test suite)."""

import sys
import time

import numpy as np

from priorfill.acr import AcrConfig
from priorfill.data import synthetic_images, synthetic_textured_images
from priorfill.mae import MaeConfig
from priorfill.metrics import hole_psnr
from priorfill.trainer import RunConfig, pretrain_mae, train_acr

STEPS = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
SEEDS = [int(s) for s in sys.argv[2].split(",")] if len(sys.argv) > 2 else [0, 1, 2]
WIDTHS = tuple(int(w) for w in sys.argv[3].split(",")) if len(sys.argv) > 3 else (16, 24, 32, 32)
DATA = sys.argv[4] if len(sys.argv) > 4 else "textured"
MAE_STEPS = int(sys.argv[5]) if len(sys.argv) > 5 else 1500


def main():
    mae_cfg = MaeConfig(img=32, patch=8)
    base = RunConfig(seed=0, img_size=32, batch_size=8, mae=mae_cfg, lr_mae=1e-3)
    maker = synthetic_textured_images if DATA == "textured" else synthetic_images
    images = maker(8, 32, seed=123)
    t0 = time.time()
    pre = pretrain_mae(base, steps=MAE_STEPS, images=images)
    print(f"widths={WIDTHS} data={DATA} mae {MAE_STEPS} steps: loss {pre['losses'][-1]:.5f} ({time.time()-t0:.0f}s)", flush=True)
    mae_model = pre["model"]

    target = [images[0]]
    scores = {}
    for use_branch in (True, False):
        for seed in SEEDS:
            cfg = RunConfig(
                seed=seed, img_size=32, batch_size=1, total_steps=STEPS,
                mae=mae_cfg, acr=AcrConfig(stage_widths=WIDTHS), fixed_mask_ratio=0.25,
                use_mae_branch=use_branch, hrf_seed=7,
            )
            t0 = time.time()
            out = train_acr(cfg, mae_model=mae_model, images=target, steps=STEPS)
            state = out["state"]
            mask = state.fixed_masks[32]
            final = state.train_step(target, 32)
            db = hole_psnr(final["pred"].data[0], target[0], mask.bits)
            scores[(use_branch, seed)] = db
            print(f"branch={'on ' if use_branch else 'off'} seed={seed} hole_psnr={db:.2f} dB ({time.time()-t0:.0f}s)", flush=True)
    wins = sum(scores[(True, s)] > scores[(False, s)] for s in SEEDS)
    print(f"branch-on wins {wins}/{len(SEEDS)}")


if __name__ == "__main__":
    main()
