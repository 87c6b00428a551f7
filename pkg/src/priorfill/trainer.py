"""Optimization and training orchestration.

Two stages: autoencoder pretraining, then adversarial restoration training
against the frozen autoencoder, with an optional dynamic-resolution finetune
cycling between two FFT-compatible sizes. Checkpoints are a JSON manifest
plus a little-endian float32 blob and round-trip byte-identically; a fixed
seed reproduces the loss log exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .acr import AcrConfig, AcrGenerator, PatchDiscriminator, acr_forward, discriminate
from .data import load_dataset, synthetic_images
from .errors import CheckpointError, ConfigError
from .losses import (
    HrfExtractor,
    LossWeights,
    disc_loss,
    feature_match,
    gen_adv_loss,
    gradient_penalty,
    hrf_loss,
    l1_unmasked,
    total_generator_loss,
)
from .mae import MaeConfig, MaeModel, extract_priors, mae_pretrain_step
from .masks import MaskMap, TokenMask, as_rng, downsample_to_tokens, gen_acr_training_mask, gen_irregular
from .module import Module
from .numerics import Tensor, backward, no_grad, ops
from .upsampler import PriorUpsampler, build_fp_prime_batch

CHECKPOINT_MAGIC = b"PFCK"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# optimizer and schedule


class Adam(object):
    """Bias-corrected Adam over a named parameter dict.

    Parameters are flattened into one contiguous buffer (their ``data`` arrays
    become views into it), so one update runs a handful of vectorized array
    ops instead of per-parameter Python loops.
    """

    def __init__(self, params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = dict(params)
        self.names = sorted(self.params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        dtypes = {p.data.dtype for p in self.params.values()}
        if len(dtypes) > 1:
            raise ConfigError(f"Adam needs a uniform parameter dtype, got {sorted(map(str, dtypes))}")
        dt = dtypes.pop() if dtypes else np.dtype(np.float32)
        self.slices = {}
        offset = 0
        for name in self.names:
            n = self.params[name].data.size
            self.slices[name] = (offset, offset + n)
            offset += n
        self.m = np.zeros(offset, dtype=dt)
        self.v = np.zeros(offset, dtype=dt)
        self._g = np.zeros(offset, dtype=dt)
        self._flat = np.zeros(offset, dtype=dt)
        self.step_count = 0
        self.rebind()

    def rebind(self) -> None:
        """Copy current parameter values into the flat buffer and alias them.

        Call again after any external replacement of parameter arrays (for
        example after loading a checkpoint into the model).
        """
        for name in self.names:
            p = self.params[name]
            lo, hi = self.slices[name]
            self._flat[lo:hi] = p.data.reshape(-1)
            p.data = self._flat[lo:hi].reshape(p.data.shape)

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        g = self._g
        for name in self.names:
            p = self.params[name]
            lo, hi = self.slices[name]
            if p.grad is None:
                g[lo:hi] = 0.0
            else:
                g[lo:hi] = p.grad.data.reshape(-1)
        if not np.all(np.isfinite(g)):
            for name in self.names:
                lo, hi = self.slices[name]
                if not np.all(np.isfinite(g[lo:hi])):
                    raise RuntimeError(f"non-finite gradient at step {t} in parameter {name!r}")
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * g
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (g * g)
        denom = np.sqrt(self.v)
        denom *= 1.0 / np.sqrt(bc2)
        denom += self.eps
        update = self.m / denom
        update *= lr / bc1
        self._flat -= update

    def state_arrays(self, prefix: str) -> dict:
        out = {}
        for name in self.names:
            lo, hi = self.slices[name]
            shape = self.params[name].data.shape
            out[f"{prefix}.m.{name}"] = self.m[lo:hi].reshape(shape).copy()
            out[f"{prefix}.v.{name}"] = self.v[lo:hi].reshape(shape).copy()
        return out

    def load_state_arrays(self, prefix: str, arrays: dict, step_count: int) -> None:
        for name in self.names:
            lo, hi = self.slices[name]
            self.m[lo:hi] = arrays[f"{prefix}.m.{name}"].reshape(-1)
            self.v[lo:hi] = arrays[f"{prefix}.v.{name}"].reshape(-1)
        self.step_count = step_count


def lr_schedule(step: int, base_lr: float, interval: int) -> float:
    """Halve the rate every `interval` steps."""
    if interval <= 0:
        raise ConfigError("lr halving interval must be positive")
    return base_lr * 0.5 ** (step // interval)


# ---------------------------------------------------------------------------
# checkpoint format: magic, manifest length, manifest JSON, raw blob


def save_checkpoint(
    path: str,
    model_kind: str,
    config: dict,
    step: int,
    tensors: dict,
    rng_state: Optional[dict] = None,
    extra: Optional[dict] = None,
) -> None:
    index = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name].data if isinstance(tensors[name], Tensor) else tensors[name])
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)  # keeps 0-d arrays 0-d
        if arr.dtype == np.float64:
            arr = arr.astype(np.float32)
        dtype = arr.dtype.newbyteorder("<")
        raw = arr.astype(dtype, copy=False).tobytes()
        index.append(
            {"name": name, "dtype": dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "model_kind": model_kind,
        "config": config,
        "step": step,
        "rng_state": rng_state,
        "extra": extra or {},
        "tensors": index,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    payload = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        fh.write(blob)
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    model_kind: str
    config: dict
    step: int
    tensors: dict
    rng_state: Optional[dict]
    extra: dict


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path!r}: {e}") from None
    if raw[:4] != CHECKPOINT_MAGIC or len(raw) < 8:
        raise CheckpointError(f"{path!r} is not a checkpoint file")
    (mlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + mlen:
        raise CheckpointError(f"{path!r}: truncated manifest")
    try:
        manifest = json.loads(raw[8 : 8 + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path!r}: bad manifest: {e}") from None
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path!r}: version {manifest.get('version')} != {CHECKPOINT_VERSION}")
    blob = raw[8 + mlen :]
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointError(f"{path!r}: blob checksum mismatch")
    tensors = {}
    for entry in manifest["tensors"]:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(blob):
            raise CheckpointError(f"{path!r}: tensor {entry['name']!r} extends past the blob")
        arr = np.frombuffer(blob[lo:hi], dtype=np.dtype(entry["dtype"]))
        expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if arr.size != expected:
            raise CheckpointError(f"{path!r}: tensor {entry['name']!r} size mismatch")
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(
        model_kind=manifest["model_kind"],
        config=manifest["config"],
        step=manifest["step"],
        tensors=tensors,
        rng_state=manifest.get("rng_state"),
        extra=manifest.get("extra", {}),
    )


def rng_state_to_json(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state))


def rng_from_json(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class DynResSpec:
    high: int = 64
    low: int = 32
    step_px: int = 8
    cycles: int = 2
    steps_per_size: int = 50

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class RunConfig:
    seed: int = 0
    img_size: int = 32
    batch_size: int = 8
    total_steps: int = 3000
    lr_gen: float = 1e-3
    lr_disc: float = 1e-4
    lr_mae: float = 1e-3
    lr_halve_interval: int = 200000
    hrf_seed: int = 0
    dataset_dir: Optional[str] = None
    fixed_mask_ratio: Optional[float] = None
    use_mae_branch: bool = True
    deterministic: bool = True
    ckpt_every: Optional[int] = None
    mae: MaeConfig = field(default_factory=MaeConfig)
    acr: AcrConfig = field(default_factory=AcrConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    dynres: DynResSpec = field(default_factory=DynResSpec)

    def __post_init__(self):
        if self.img_size % 8:
            raise ConfigError("img_size must be divisible by 8")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d["mae"] = MaeConfig(**d.get("mae", {}))
        d["acr"] = AcrConfig(**{k: tuple(v) if k == "stage_widths" else v for k, v in d.get("acr", {}).items()})
        d["loss"] = LossWeights(**d.get("loss", {}))
        d["dynres"] = DynResSpec(**d.get("dynres", {}))
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))


def load_run_config(path: str) -> RunConfig:
    with open(path) as fh:
        return RunConfig.from_json(fh.read())


# ---------------------------------------------------------------------------
# dataset plumbing


def _resolve_dataset(cfg: RunConfig, size: int) -> list[np.ndarray]:
    if cfg.dataset_dir:
        return load_dataset(cfg.dataset_dir, size)
    # synthetic fallback keyed by the run seed
    return synthetic_images(8, size, cfg.seed)


def _sample_batch(rng: np.random.Generator, images: list[np.ndarray], batch: int) -> list[int]:
    n = len(images)
    if n == 0:
        raise ConfigError("dataset is empty")
    if batch < n:
        return list(rng.choice(n, size=batch, replace=False))
    if batch == n:
        return list(rng.permutation(n))
    return list(rng.integers(0, n, size=batch))


def _block_mean(img: np.ndarray, factor: int) -> np.ndarray:
    c, h, w = img.shape
    return img.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def _block_max(bits: np.ndarray, factor: int) -> np.ndarray:
    h, w = bits.shape
    return bits.reshape(h // factor, factor, w // factor, factor).max(axis=(1, 3))


def _mask_at_mae_size(mask: MaskMap, mae_img: int) -> MaskMap:
    if mask.h == mae_img:
        return mask
    if mask.h % mae_img == 0:
        factor = mask.h // mae_img
        return MaskMap(mae_img, mae_img, _block_max(mask.bits, factor))
    if mae_img % mask.h == 0:
        factor = mae_img // mask.h
        bits = np.repeat(np.repeat(mask.bits, factor, axis=0), factor, axis=1)
        return MaskMap(mae_img, mae_img, bits)
    raise ConfigError(f"mask size {mask.h} incompatible with autoencoder size {mae_img}")


def _token_mask_for_mae(mask_mae: MaskMap, patch: int) -> TokenMask:
    """Enlarge the pixel mask to the token grid, guaranteeing a visible token.

    On coarse grids a moderate mask can touch every patch; the autoencoder
    needs at least one visible token, so the least-masked token is freed. The
    pixel mask itself is untouched (its masked pixels stay zeroed).
    """
    tmask = downsample_to_tokens(mask_mae, patch)
    if tmask.count() == tmask.tokens:
        gh, gw = tmask.gh, tmask.gw
        per_token = mask_mae.bits.reshape(gh, patch, gw, patch).sum(axis=(1, 3)).reshape(-1)
        bits = tmask.bits.copy()
        bits.reshape(-1)[int(per_token.argmin())] = 0
        tmask = TokenMask(gh, gw, bits)
    return tmask


def _image_at_mae_size(img: np.ndarray, mae_img: int) -> np.ndarray:
    if img.shape[-1] == mae_img:
        return img
    if img.shape[-1] % mae_img == 0:
        return _block_mean(img, img.shape[-1] // mae_img)
    if mae_img % img.shape[-1] == 0:
        factor = mae_img // img.shape[-1]
        return np.repeat(np.repeat(img, factor, axis=1), factor, axis=2)
    raise ConfigError(f"image size {img.shape[-1]} incompatible with autoencoder size {mae_img}")


# ---------------------------------------------------------------------------
# training state


class AcrTrainState:
    """Everything one restoration training run mutates."""

    def __init__(self, cfg: RunConfig, mae_model: MaeModel, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.mae = mae_model
        self.gen = AcrGenerator(cfg.acr, rng)
        self.disc = PatchDiscriminator(rng, cfg.acr.out_channels)
        self.ups = (
            PriorUpsampler(rng, mae_model.cfg.dim + 2, cfg.acr.stage_widths)
            if cfg.use_mae_branch
            else None
        )
        self.hrf = HrfExtractor(cfg.hrf_seed, cfg.acr.out_channels)
        self.hrf.freeze()
        gen_params = {"gen." + k: v for k, v in self.gen.named_parameters().items()}
        if self.ups is not None:
            gen_params.update({"ups." + k: v for k, v in self.ups.named_parameters().items()})
        self.opt_gen = Adam(gen_params, cfg.lr_gen)
        self.opt_disc = Adam({"disc." + k: v for k, v in self.disc.named_parameters().items()}, cfg.lr_disc)
        self.step = 0
        self.fixed_masks: dict[int, MaskMap] = {}
        # priors are a pure function of (frozen weights, image, mask): with a
        # fixed mask they can be reused across steps
        self._priors_cache: dict[tuple[int, int], tuple] = {}

    # -- persistence ------------------------------------------------------

    def generator_tensors(self) -> dict:
        out = {"gen." + k: v for k, v in self.gen.state_tensors().items()}
        if self.ups is not None:
            out.update({"ups." + k: v for k, v in self.ups.state_tensors().items()})
        return out

    def save(self, out_dir: str, tag: str = "latest") -> tuple[str, str]:
        os.makedirs(out_dir, exist_ok=True)
        gen_tensors = self.generator_tensors()
        gen_tensors.update(self.opt_gen.state_arrays("adam"))
        acr_path = os.path.join(out_dir, f"acr_{tag}.ckpt")
        save_checkpoint(
            acr_path,
            "acr",
            self.cfg.to_dict(),
            self.step,
            gen_tensors,
            rng_state=rng_state_to_json(self.rng),
            extra={"adam_step": self.opt_gen.step_count, "has_upsampler": self.ups is not None},
        )
        disc_tensors = {"disc." + k: v for k, v in self.disc.state_tensors().items()}
        disc_tensors.update(self.opt_disc.state_arrays("adam"))
        disc_path = os.path.join(out_dir, f"disc_{tag}.ckpt")
        save_checkpoint(
            disc_path,
            "disc",
            self.cfg.to_dict(),
            self.step,
            disc_tensors,
            extra={"adam_step": self.opt_disc.step_count},
        )
        return acr_path, disc_path

    def load(self, acr_path: str, disc_path: str) -> None:
        ck = load_checkpoint(acr_path)
        if ck.model_kind != "acr":
            raise CheckpointError(f"{acr_path!r} holds {ck.model_kind!r}, expected 'acr'")
        gen_state = {k[len("gen.") :]: v for k, v in ck.tensors.items() if k.startswith("gen.")}
        self.gen.load_state(gen_state)
        if self.ups is not None:
            ups_state = {k[len("ups.") :]: v for k, v in ck.tensors.items() if k.startswith("ups.")}
            self.ups.load_state(ups_state)
        self.opt_gen.load_state_arrays("adam", ck.tensors, ck.extra["adam_step"])
        self.opt_gen.rebind()
        self.rng = rng_from_json(ck.rng_state)
        self.step = ck.step
        dk = load_checkpoint(disc_path)
        if dk.model_kind != "disc":
            raise CheckpointError(f"{disc_path!r} holds {dk.model_kind!r}, expected 'disc'")
        disc_state = {k[len("disc.") :]: v for k, v in dk.tensors.items() if k.startswith("disc.")}
        self.disc.load_state(disc_state)
        self.opt_disc.load_state_arrays("adam", dk.tensors, dk.extra["adam_step"])
        self.opt_disc.rebind()

    # -- one training step --------------------------------------------------

    def _mask_for(self, res: int) -> MaskMap:
        if self.cfg.fixed_mask_ratio is not None:
            if res not in self.fixed_masks:
                self.fixed_masks[res] = gen_irregular(
                    np.random.default_rng(self.cfg.seed), res, res, self.cfg.fixed_mask_ratio
                )
            return self.fixed_masks[res]
        return gen_acr_training_mask(self.rng, res, res)

    def train_step(self, images: list[np.ndarray], res: int) -> dict:
        cfg = self.cfg
        idxs = _sample_batch(self.rng, images, cfg.batch_size)
        batch = np.stack([images[i] for i in idxs]).astype(np.float32)
        mask_maps = [self._mask_for(res) for _ in idxs]
        mask_bits = np.stack([m.bits for m in mask_maps])[:, None].astype(np.float32)
        masked = batch * (1.0 - mask_bits)

        priors_list = None
        pyramid = None
        tmasks = None
        if cfg.use_mae_branch:
            mae_img = self.mae.cfg.img
            priors_list = []
            tmasks = []
            fixed = cfg.fixed_mask_ratio is not None
            for i, img_idx in enumerate(idxs):
                key = (img_idx, res)
                if fixed and key in self._priors_cache:
                    priors, tmask = self._priors_cache[key]
                else:
                    m_mae = _mask_at_mae_size(mask_maps[i], mae_img)
                    tmask = _token_mask_for_mae(m_mae, self.mae.cfg.patch)
                    img_mae = _image_at_mae_size(masked[i], mae_img) * (1.0 - m_mae.bits)[None]
                    priors = extract_priors(self.mae, Tensor(img_mae.astype(np.float32)), tmask)
                    if fixed:
                        self._priors_cache[key] = (priors, tmask)
                priors_list.append(priors)
                tmasks.append(tmask)
            fp = build_fp_prime_batch(priors_list, res, res)
            pyramid = self.ups(fp)

        img_masked_t = Tensor(masked)
        mask_t = Tensor(mask_bits)
        real_t = Tensor(batch)

        pred = acr_forward(
            self.gen,
            img_masked_t,
            mask_t,
            priors=priors_list,
            pyramid=pyramid,
            upsampler=self.ups,
            tmask=tmasks,
        )

        comp = {
            "l1": l1_unmasked(pred, real_t, mask_bits),
            "adv": gen_adv_loss(self.disc, pred),
            "fm": feature_match(self.disc, real_t, pred),
            "hrf": hrf_loss(self.hrf, real_t, pred),
        }
        g_loss = total_generator_loss(comp, cfg.loss)
        self.gen.zero_grad()
        if self.ups is not None:
            self.ups.zero_grad()
        self.disc.zero_grad()
        backward(g_loss)
        lr_g = lr_schedule(self.step, cfg.lr_gen, cfg.lr_halve_interval)
        self.opt_gen.step(lr=lr_g)

        fake_detached = Tensor(pred.data)
        d_loss = disc_loss(self.disc, real_t, fake_detached, mask_bits)
        gp = gradient_penalty(self.disc, real_t)
        d_total = ops.add(d_loss, ops.scale(gp, cfg.loss.gp))
        self.disc.zero_grad()
        backward(d_total)
        lr_d = lr_schedule(self.step, cfg.lr_disc, cfg.lr_halve_interval)
        self.opt_disc.step(lr=lr_d)

        self.step += 1
        alphas = self.ups.alpha_values() if self.ups is not None else [0.0] * 4
        b_start, b_end = self.gen.beta_values()
        return {
            "step": self.step,
            "loss_l1": float(comp["l1"].item()),
            "loss_adv": float(comp["adv"].item()),
            "loss_fm": float(comp["fm"].item()),
            "loss_hrf": float(comp["hrf"].item()),
            "loss_d": float(d_loss.item()),
            "gp": float(gp.item()),
            "alpha1": alphas[0],
            "alpha2": alphas[1],
            "alpha3": alphas[2],
            "alpha4": alphas[3],
            "beta_start": b_start,
            "beta_end": b_end,
            "lr_g": lr_g,
            "lr_d": lr_d,
            "pred": pred,
            "batch_indices": idxs,
            "mask_maps": mask_maps,
        }


LOG_COLUMNS = [
    "step", "loss_l1", "loss_adv", "loss_fm", "loss_hrf", "loss_d", "gp",
    "alpha1", "alpha2", "alpha3", "alpha4", "beta_start", "beta_end", "lr_g", "lr_d",
]


def _append_log(path: Optional[str], row: dict) -> None:
    if path is None:
        return
    fresh = not os.path.exists(path)
    with open(path, "a") as fh:
        if fresh:
            fh.write(",".join(LOG_COLUMNS) + "\n")
        fh.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in LOG_COLUMNS) + "\n")


def _append_alpha_log(path: Optional[str], row: dict) -> None:
    if path is None:
        return
    fresh = not os.path.exists(path)
    with open(path, "a") as fh:
        if fresh:
            fh.write("step,alpha1,alpha2,alpha3,alpha4\n")
        fh.write(
            f"{row['step']},{row['alpha1']!r},{row['alpha2']!r},{row['alpha3']!r},{row['alpha4']!r}\n"
        )


# ---------------------------------------------------------------------------
# stage drivers


def pretrain_mae(cfg: RunConfig, out_dir: Optional[str] = None, steps: Optional[int] = None,
                 images: Optional[list[np.ndarray]] = None) -> dict:
    """Stage one: reconstruction pretraining. Returns model, losses, ckpt path."""
    rng = as_rng(cfg.seed)
    model = MaeModel(cfg.mae, rng)
    opt = Adam({k: v for k, v in model.named_parameters().items()}, cfg.lr_mae)
    images = images if images is not None else _resolve_dataset(cfg, cfg.mae.img)
    steps = steps if steps is not None else cfg.total_steps
    losses = []
    log_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "mae_log.csv")
        if os.path.exists(log_path):
            os.remove(log_path)
    for step in range(steps):
        idxs = _sample_batch(rng, images, cfg.batch_size)
        batch = Tensor(np.stack([images[i] for i in idxs]).astype(np.float32))
        opt.lr = lr_schedule(step, cfg.lr_mae, cfg.lr_halve_interval)
        loss = mae_pretrain_step(model, batch, rng, opt)
        losses.append(loss)
        if log_path:
            fresh = not os.path.exists(log_path)
            with open(log_path, "a") as fh:
                if fresh:
                    fh.write("step,loss\n")
                fh.write(f"{step + 1},{loss!r}\n")
    ckpt_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(out_dir, "mae_latest.ckpt")
        tensors = dict(model.state_tensors())
        tensors.update(opt.state_arrays("adam"))
        save_checkpoint(
            ckpt_path, "mae", asdict(cfg.mae), steps, tensors,
            rng_state=rng_state_to_json(rng), extra={"adam_step": opt.step_count},
        )
    return {"model": model, "losses": losses, "ckpt": ckpt_path}


def load_mae(ckpt_path: str) -> MaeModel:
    ck = load_checkpoint(ckpt_path)
    if ck.model_kind != "mae":
        raise CheckpointError(f"{ckpt_path!r} holds {ck.model_kind!r}, expected 'mae'")
    model = MaeModel(MaeConfig(**ck.config), np.random.default_rng(0))
    model.load_state({k: v for k, v in ck.tensors.items() if not k.startswith("adam.")})
    model.freeze()
    model.eval()
    return model


def train_acr(
    cfg: RunConfig,
    mae_model: Optional[MaeModel] = None,
    mae_ckpt: Optional[str] = None,
    out_dir: Optional[str] = None,
    steps: Optional[int] = None,
    images: Optional[list[np.ndarray]] = None,
    resume: Optional[tuple[str, str]] = None,
) -> dict:
    """Stage two: adversarial restoration training against the frozen autoencoder."""
    if mae_model is None:
        if mae_ckpt is None and cfg.use_mae_branch:
            raise ConfigError("train_acr needs a pretrained autoencoder (model or checkpoint)")
        mae_model = load_mae(mae_ckpt) if mae_ckpt else MaeModel(cfg.mae, np.random.default_rng(cfg.seed))
    mae_model.freeze()
    mae_model.eval()
    rng = as_rng(cfg.seed)
    state = AcrTrainState(cfg, mae_model, rng)
    if resume is not None:
        state.load(*resume)
    images = images if images is not None else _resolve_dataset(cfg, cfg.img_size)
    steps = steps if steps is not None else cfg.total_steps
    log_path = os.path.join(out_dir, "acr_log.csv") if out_dir else None
    alpha_path = os.path.join(out_dir, "alphas.csv") if out_dir else None
    rows = []
    for _ in range(steps):
        row = state.train_step(images, cfg.img_size)
        rows.append({c: row[c] for c in LOG_COLUMNS})
        _append_log(log_path, row)
        _append_alpha_log(alpha_path, row)
        if out_dir and cfg.ckpt_every and state.step % cfg.ckpt_every == 0:
            state.save(out_dir, tag=f"step{state.step}")
    paths = state.save(out_dir) if out_dir else (None, None)
    return {"state": state, "rows": rows, "acr_ckpt": paths[0], "disc_ckpt": paths[1]}


def resolution_cycle(high: int, low: int, step_px: int) -> list[int]:
    """Descending-then-ascending size cycle over FFT-compatible extents.

    Valid sizes are divisible by 8 with a power-of-two bottleneck grid; raw
    triangle points snap onto that set, e.g. {32, 64} yields [64, 32].
    """
    if high % 8 or low % 8:
        raise ConfigError("cycle endpoints must be divisible by 8")

    def valid(size: int) -> bool:
        g = size // 8
        return size % 8 == 0 and g >= 1 and (g & (g - 1)) == 0

    candidates = sorted({s for s in range(low, high + 1, step_px) if valid(s)}, reverse=True)
    if not candidates:
        raise ConfigError(f"no valid resolution between {low} and {high}")
    ascending = candidates[::-1][1:-1]  # exclude endpoints: next cycle restarts at high
    return candidates + ascending


def dynamic_resolution_finetune(
    cfg: RunConfig,
    acr_ckpt: str,
    disc_ckpt: str,
    mae_model: Optional[MaeModel] = None,
    mae_ckpt: Optional[str] = None,
    out_dir: Optional[str] = None,
    images_by_size: Optional[dict] = None,
) -> dict:
    """Finetune across a triangular resolution cycle; priors stay on the
    autoencoder's native grid and are resized per working resolution."""
    if mae_model is None:
        if mae_ckpt is None and cfg.use_mae_branch:
            raise ConfigError("finetune needs the frozen autoencoder")
        mae_model = load_mae(mae_ckpt) if mae_ckpt else MaeModel(cfg.mae, np.random.default_rng(cfg.seed))
    mae_model.freeze()
    mae_model.eval()
    rng = as_rng(cfg.seed)
    state = AcrTrainState(cfg, mae_model, rng)
    state.load(acr_ckpt, disc_ckpt)
    cycle = resolution_cycle(cfg.dynres.high, cfg.dynres.low, cfg.dynres.step_px)
    log_path = os.path.join(out_dir, "finetune_log.csv") if out_dir else None
    rows = []
    resolutions = []
    for _ in range(cfg.dynres.cycles):
        for res in cycle:
            if images_by_size is not None:
                images = images_by_size[res]
            elif cfg.dataset_dir:
                images = load_dataset(cfg.dataset_dir, res)
            else:
                images = synthetic_images(8, res, cfg.seed)
            for _ in range(cfg.dynres.steps_per_size):
                row = state.train_step(images, res)
                rows.append({c: row[c] for c in LOG_COLUMNS})
                resolutions.append(res)
                _append_log(log_path, row)
    paths = state.save(out_dir, tag="finetuned") if out_dir else (None, None)
    return {"state": state, "rows": rows, "resolutions": resolutions,
            "acr_ckpt": paths[0], "disc_ckpt": paths[1]}
