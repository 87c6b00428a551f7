"""Quick trajectory probe for the ablation regime (not part of the test suite).

Tracks hole PSNR at checkpoints along one run per (widths, branch) combo.
"""

import sys
import time

import numpy as np

from priorfill.acr import AcrConfig
from priorfill.data import synthetic_textured_images
from priorfill.mae import MaeConfig
from priorfill.metrics import hole_psnr
from priorfill.trainer import RunConfig, pretrain_mae, train_acr

WIDTH_SETS = [(16, 24, 32, 32), (8, 12, 16, 16)]
CHECK_AT = [500, 1000, 2000, 3000]


def main():
    mae_cfg = MaeConfig(img=32, patch=8)
    base = RunConfig(seed=0, img_size=32, batch_size=8, mae=mae_cfg)
    images = synthetic_textured_images(8, 32, seed=123)
    pre = pretrain_mae(base, steps=1500, images=images)
    print(f"mae loss {pre['losses'][-1]:.5f}", flush=True)
    mae_model = pre["model"]
    target = [images[0]]

    for widths in WIDTH_SETS:
        for use_branch in (True, False):
            cfg = RunConfig(
                seed=0, img_size=32, batch_size=1, total_steps=3000,
                mae=mae_cfg, acr=AcrConfig(stage_widths=widths), fixed_mask_ratio=0.25,
                use_mae_branch=use_branch, hrf_seed=7,
            )
            out = train_acr(cfg, mae_model=mae_model, images=target, steps=0)
            state = out["state"]
            mask = state.fixed_masks.get(32)
            t0 = time.time()
            done = 0
            marks = []
            for stop in CHECK_AT:
                for _ in range(stop - done):
                    row = state.train_step(target, 32)
                done = stop
                mask = state.fixed_masks[32]
                db = hole_psnr(row["pred"].data[0], target[0], mask.bits)
                marks.append(f"{stop}:{db:.1f}")
            print(f"widths={widths} branch={'on ' if use_branch else 'off'} " + " ".join(marks) +
                  f" ({time.time()-t0:.0f}s)", flush=True)


if __name__ == "__main__":
    main()
