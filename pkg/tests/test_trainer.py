"""Trainer tests: Adam, schedules, checkpoints, determinism, resume,
dynamic-resolution cycling."""

import os

import numpy as np
import pytest

from priorfill.acr import AcrConfig
from priorfill.data import synthetic_images
from priorfill.errors import CheckpointError, ConfigError
from priorfill.mae import MaeConfig, MaeModel
from priorfill.numerics import Tensor, backward, ops
from priorfill.trainer import (
    Adam,
    AcrTrainState,
    Checkpoint,
    DynResSpec,
    RunConfig,
    dynamic_resolution_finetune,
    load_checkpoint,
    load_mae,
    lr_schedule,
    pretrain_mae,
    resolution_cycle,
    rng_from_json,
    rng_state_to_json,
    save_checkpoint,
    train_acr,
)


def tiny_run_config(**kw):
    base = dict(
        seed=0,
        img_size=32,
        batch_size=2,
        total_steps=3,
        mae=MaeConfig(img=32, patch=8, enc_layers=1, dec_layers=1, dim=16, heads=2),
        acr=AcrConfig(stage_widths=(8, 12, 16, 16), n_ffc=2),
        dynres=DynResSpec(high=64, low=32, cycles=1, steps_per_size=1),
    )
    base.update(kw)
    return RunConfig(**base)


class TestAdam:
    def test_zero_grads_leave_params(self):
        p = Tensor(np.ones(4, dtype=np.float32), requires_grad=True)
        opt = Adam({"p": p}, lr=0.1)
        before = p.data.copy()
        opt.step()
        assert np.array_equal(p.data, before)

    def test_first_step_closed_form(self):
        # g = 1 at t = 1: bias corrections cancel, update = -lr / (1 + eps')
        p = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
        opt = Adam({"p": p}, lr=0.01)
        loss = ops.tsum(p)
        backward(loss)  # grad = 1
        opt.step()
        assert p.data[0] == pytest.approx(-0.01, rel=1e-5)

    def test_determinism(self):
        results = []
        for _ in range(2):
            p = Tensor(np.full(3, 0.5, dtype=np.float32), requires_grad=True)
            opt = Adam({"p": p}, lr=0.05)
            for _ in range(3):
                p.zero_grad()
                backward(ops.tsum(ops.square(p)))
                opt.step()
            results.append(p.data.copy())
        assert np.array_equal(results[0], results[1])

    def test_nan_grad_aborts_with_name(self):
        p = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        opt = Adam({"weird": p}, lr=0.1)
        p.grad = Tensor(np.array([np.nan, 1.0], dtype=np.float32))
        with pytest.raises(RuntimeError, match="weird"):
            opt.step()

    def test_update_follows_gradient_direction(self):
        p = Tensor(np.array([1.0, -1.0], dtype=np.float32), requires_grad=True)
        opt = Adam({"p": p}, lr=0.1)
        backward(ops.tsum(ops.square(p)))
        opt.step()
        assert p.data[0] < 1.0 and p.data[1] > -1.0


class TestLrSchedule:
    def test_piecewise_halving(self):
        assert lr_schedule(0, 1e-3, 100) == 1e-3
        assert lr_schedule(99, 1e-3, 100) == 1e-3
        assert lr_schedule(200, 1e-3, 100) == pytest.approx(2.5e-4)

    def test_paper_scale_analog(self):
        # 850k steps with halving every 200k lands at base / 16
        assert lr_schedule(850_000, 1e-3, 200_000) == pytest.approx(1e-3 / 16)

    def test_bad_interval_rejected(self):
        with pytest.raises(ConfigError):
            lr_schedule(1, 1e-3, 0)


class TestCheckpointFormat:
    def test_roundtrip_bit_exact_and_resave_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {
            "b.weight": rng.standard_normal((3, 4)).astype(np.float32),
            "a.bias": rng.standard_normal(7).astype(np.float32),
        }
        path = os.path.join(tmp_path, "x.ckpt")
        save_checkpoint(path, "acr", {"k": 1}, 5, tensors, rng_state={"s": 1}, extra={"e": 2})
        first = open(path, "rb").read()
        ck = load_checkpoint(path)
        assert ck.model_kind == "acr" and ck.step == 5 and ck.extra == {"e": 2}
        for name, arr in tensors.items():
            assert np.array_equal(ck.tensors[name], arr)
        save_checkpoint(path, "acr", {"k": 1}, 5, ck.tensors, rng_state={"s": 1}, extra={"e": 2})
        assert open(path, "rb").read() == first

    def test_corrupted_blob_rejected(self, tmp_path):
        path = os.path.join(tmp_path, "x.ckpt")
        save_checkpoint(path, "mae", {}, 1, {"w": np.ones(4, np.float32)})
        raw = bytearray(open(path, "rb").read())
        raw[-2] ^= 0xFF
        open(path, "wb").write(bytes(raw))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_truncated_blob_rejected(self, tmp_path):
        path = os.path.join(tmp_path, "x.ckpt")
        save_checkpoint(path, "mae", {}, 1, {"w": np.ones(4, np.float32)})
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[:-3])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = os.path.join(tmp_path, "x.ckpt")
        open(path, "wb").write(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_version_mismatch_rejected(self, tmp_path):
        import json as json_mod
        import struct

        path = os.path.join(tmp_path, "x.ckpt")
        manifest = json_mod.dumps({"version": 99, "blob_sha256": "", "tensors": []}).encode()
        with open(path, "wb") as fh:
            fh.write(b"PFCK" + struct.pack("<I", len(manifest)) + manifest)
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_tensors_serialized_as_le_float32(self, tmp_path):
        path = os.path.join(tmp_path, "x.ckpt")
        save_checkpoint(path, "mae", {}, 0, {"w": np.ones(2, np.float64)})
        ck = load_checkpoint(path)
        assert ck.tensors["w"].dtype == np.dtype("<f4")


class TestRunConfig:
    def test_json_roundtrip_lossless(self):
        cfg = tiny_run_config(fixed_mask_ratio=0.25, dataset_dir="/tmp/x")
        again = RunConfig.from_json(cfg.to_json())
        assert again.to_dict() == cfg.to_dict()

    def test_rng_state_roundtrip(self):
        rng = np.random.default_rng(42)
        rng.random(10)
        state = rng_state_to_json(rng)
        clone = rng_from_json(state)
        assert rng.random(5).tolist() == clone.random(5).tolist()


class TestTrainAcr:
    def test_smoke_steps_finite(self):
        cfg = tiny_run_config(total_steps=2)
        images = synthetic_images(4, 32, 0)
        result = train_acr(cfg, mae_model=MaeModel(cfg.mae, np.random.default_rng(0)),
                           images=images, steps=2)
        for row in result["rows"]:
            for key in ("loss_l1", "loss_adv", "loss_fm", "loss_hrf", "loss_d", "gp"):
                assert np.isfinite(row[key])

    def test_deterministic_loss_curves(self):
        curves = []
        images = synthetic_images(4, 32, 0)
        for _ in range(2):
            cfg = tiny_run_config(total_steps=3)
            mae_model = MaeModel(cfg.mae, np.random.default_rng(cfg.seed))
            result = train_acr(cfg, mae_model=mae_model, images=images, steps=3)
            curves.append([r["loss_l1"] for r in result["rows"]])
        assert curves[0] == curves[1]

    def test_frozen_mae_hash_unchanged(self):
        cfg = tiny_run_config(total_steps=2)
        images = synthetic_images(2, 32, 0)
        mae_model = MaeModel(cfg.mae, np.random.default_rng(0))
        before = mae_model.param_hash()
        train_acr(cfg, mae_model=mae_model, images=images, steps=2)
        assert mae_model.param_hash() == before

    def test_gen_and_disc_updates_disjoint(self):
        cfg = tiny_run_config(total_steps=1)
        images = synthetic_images(2, 32, 0)
        mae_model = MaeModel(cfg.mae, np.random.default_rng(0))
        state = AcrTrainState(cfg, mae_model, np.random.default_rng(0))
        gen_before = state.gen.param_hash()
        disc_before = state.disc.param_hash()
        state.train_step(images, 32)
        assert state.gen.param_hash() != gen_before
        assert state.disc.param_hash() != disc_before

    def test_empty_dataset_rejected(self):
        cfg = tiny_run_config()
        mae_model = MaeModel(cfg.mae, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            train_acr(cfg, mae_model=mae_model, images=[], steps=1)

    def test_resume_matches_continuous_run(self, tmp_path):
        images = synthetic_images(4, 32, 0)
        cfg = tiny_run_config(total_steps=8)
        mae_model = MaeModel(cfg.mae, np.random.default_rng(0))

        cont = train_acr(cfg, mae_model=mae_model, images=images, steps=8)
        losses_cont = [(r["loss_l1"], r["loss_d"]) for r in cont["rows"]]

        first = train_acr(cfg, mae_model=mae_model, images=images, steps=4,
                          out_dir=str(tmp_path))
        resumed = train_acr(cfg, mae_model=mae_model, images=images, steps=4,
                            resume=(first["acr_ckpt"], first["disc_ckpt"]))
        losses_first = [(r["loss_l1"], r["loss_d"]) for r in first["rows"]]
        losses_resumed = [(r["loss_l1"], r["loss_d"]) for r in resumed["rows"]]
        assert losses_cont == losses_first + losses_resumed

    def test_checkpoint_roundtrip_restores_tensors(self, tmp_path):
        images = synthetic_images(2, 32, 0)
        cfg = tiny_run_config(total_steps=2)
        mae_model = MaeModel(cfg.mae, np.random.default_rng(0))
        result = train_acr(cfg, mae_model=mae_model, images=images, steps=2,
                           out_dir=str(tmp_path))
        state = result["state"]
        fresh = AcrTrainState(cfg, mae_model, np.random.default_rng(99))
        fresh.load(result["acr_ckpt"], result["disc_ckpt"])
        for name, t in state.gen.state_tensors().items():
            assert np.array_equal(fresh.gen.state_tensors()[name].data, t.data), name
        for name, t in state.disc.state_tensors().items():
            assert np.array_equal(fresh.disc.state_tensors()[name].data, t.data), name

    def test_log_csv_columns(self, tmp_path):
        images = synthetic_images(2, 32, 0)
        cfg = tiny_run_config(total_steps=2)
        mae_model = MaeModel(cfg.mae, np.random.default_rng(0))
        train_acr(cfg, mae_model=mae_model, images=images, steps=2, out_dir=str(tmp_path))
        header = open(os.path.join(tmp_path, "acr_log.csv")).readline().strip()
        assert header == ("step,loss_l1,loss_adv,loss_fm,loss_hrf,loss_d,gp,"
                          "alpha1,alpha2,alpha3,alpha4,beta_start,beta_end,lr_g,lr_d")
        alpha_header = open(os.path.join(tmp_path, "alphas.csv")).readline().strip()
        assert alpha_header == "step,alpha1,alpha2,alpha3,alpha4"


class TestPretrainMae:
    def test_losses_decrease_on_tiny_overfit(self):
        cfg = tiny_run_config(batch_size=4)
        images = synthetic_images(4, 32, 0)
        result = pretrain_mae(cfg, steps=40, images=images)
        assert np.mean(result["losses"][-10:]) < np.mean(result["losses"][:10])

    def test_checkpoint_reload_matches(self, tmp_path):
        cfg = tiny_run_config(batch_size=2)
        images = synthetic_images(2, 32, 0)
        result = pretrain_mae(cfg, out_dir=str(tmp_path), steps=3, images=images)
        model = load_mae(result["ckpt"])
        assert model.param_hash() == result["model"].param_hash()
        ck = load_checkpoint(result["ckpt"])
        assert ck.model_kind == "mae"
        assert ck.config["img"] == cfg.mae.img and ck.config["patch"] == cfg.mae.patch


class TestDynamicResolution:
    def test_cycle_for_two_point_set(self):
        assert resolution_cycle(64, 32, 8) == [64, 32]

    def test_cycle_triangular_general(self):
        assert resolution_cycle(128, 32, 8) == [128, 64, 32, 64]

    def test_invalid_endpoint_rejected(self):
        with pytest.raises(ConfigError):
            resolution_cycle(60, 32, 8)

    def test_finetune_runs_and_reloads_at_both_sizes(self, tmp_path):
        images32 = synthetic_images(2, 32, 0)
        images64 = synthetic_images(2, 64, 0)
        cfg = tiny_run_config(total_steps=2, batch_size=1)
        mae_model = MaeModel(cfg.mae, np.random.default_rng(0))
        base = train_acr(cfg, mae_model=mae_model, images=images32, steps=2, out_dir=str(tmp_path))
        result = dynamic_resolution_finetune(
            cfg, base["acr_ckpt"], base["disc_ckpt"], mae_model=mae_model,
            out_dir=str(tmp_path), images_by_size={32: images32, 64: images64},
        )
        assert sorted(set(result["resolutions"])) == [32, 64]
        # the finetuned checkpoint must run at both sizes
        state = AcrTrainState(cfg, mae_model, np.random.default_rng(1))
        state.load(result["acr_ckpt"], result["disc_ckpt"])
        for res, imgs in ((32, images32), (64, images64)):
            row = state.train_step(imgs, res)
            assert np.isfinite(row["loss_l1"])

    def test_priors_grid_constant_across_resolutions(self, tmp_path):
        cfg = tiny_run_config(total_steps=1, batch_size=1)
        mae_model = MaeModel(cfg.mae, np.random.default_rng(0))
        state = AcrTrainState(cfg, mae_model, np.random.default_rng(0))
        from priorfill.mae import extract_priors
        from priorfill.masks import downsample_to_tokens, gen_irregular
        from priorfill.trainer import _image_at_mae_size, _mask_at_mae_size

        for res in (32, 64):
            img = synthetic_images(1, res, 0)[0]
            mask = gen_irregular(0, res, res, 0.3)
            m_mae = _mask_at_mae_size(mask, cfg.mae.img)
            tmask = downsample_to_tokens(m_mae, cfg.mae.patch)
            img_mae = _image_at_mae_size(img, cfg.mae.img)
            priors = extract_priors(mae_model, Tensor(img_mae.astype(np.float32)), tmask)
            assert priors.features.shape == (cfg.mae.grid, cfg.mae.grid, cfg.mae.dim)
            assert priors.attention.shape == (cfg.mae.tokens, cfg.mae.tokens)
