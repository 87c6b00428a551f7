"""Calibration run for the toy overfit experiment (not part of the test suite).

Pretrains a small autoencoder, then overfits the restoration net on one image
with a fixed 25% mask, with and without the prior branch, reporting hole PSNR.
"""

import sys
import time

import numpy as np

from priorfill.acr import AcrConfig
from priorfill.data import synthetic_images
from priorfill.mae import MaeConfig
from priorfill.metrics import hole_psnr
from priorfill.trainer import RunConfig, pretrain_mae, train_acr

STEPS = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
SEEDS = [int(s) for s in sys.argv[2].split(",")] if len(sys.argv) > 2 else [0, 1, 2]
MAE_STEPS = int(sys.argv[3]) if len(sys.argv) > 3 else 1500


def main():
    mae_cfg = MaeConfig(img=32, patch=8)
    base = RunConfig(seed=0, img_size=32, batch_size=8, mae=mae_cfg, lr_mae=1e-3)
    images = synthetic_images(8, 32, seed=123)
    t0 = time.time()
    pre = pretrain_mae(base, steps=MAE_STEPS, images=images)
    print(f"mae pretrain {MAE_STEPS} steps: last losses {pre['losses'][-3:]}, {time.time()-t0:.0f}s", flush=True)
    mae_model = pre["model"]

    target = [images[0]]
    for use_branch in (True, False):
        for seed in SEEDS:
            cfg = RunConfig(
                seed=seed, img_size=32, batch_size=1, total_steps=STEPS,
                mae=mae_cfg, acr=AcrConfig(), fixed_mask_ratio=0.25,
                use_mae_branch=use_branch, hrf_seed=7,
            )
            t0 = time.time()
            out = train_acr(cfg, mae_model=mae_model, images=target, steps=STEPS)
            state = out["state"]
            mask = state.fixed_masks[32]
            row = out["rows"][-1]
            # fresh forward for evaluation
            final = state.train_step(target, 32)
            pred = final["pred"].data[0]
            db = hole_psnr(pred, target[0], mask.bits)
            print(
                f"branch={'on ' if use_branch else 'off'} seed={seed} hole_psnr={db:.2f} dB "
                f"l1={row['loss_l1']:.4f} fm={row['loss_fm']:.4f} hrf={row['loss_hrf']:.4f} "
                f"({time.time()-t0:.0f}s)",
                flush=True,
            )


if __name__ == "__main__":
    main()
