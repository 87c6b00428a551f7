"""Toy-scale ViT masked autoencoder and prior extraction.

The encoder sees only visible tokens; the decoder fills masked positions with
a shared learnable token and reconstructs pixels. Besides reconstruction, the
decoder provides the transfer material for the restoration network: token
features from a chosen layer, and attention scores re-normalized over visible
keys only, averaged over heads and layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .masks import MaskMap, TokenMask, as_rng, gen_mae_pretrain_mask
from .module import LayerNorm, Linear, Module, ModuleList
from .numerics import Tensor, backward, no_grad, ops
from .numerics.tensor import default_dtype


@dataclass
class MaeConfig:
    img: int = 32
    patch: int = 4
    channels: int = 3
    enc_layers: int = 6
    dec_layers: int = 4
    dim: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    norm_pixel_target: bool = False
    attn_layers_used: Optional[int] = None  # None: all decoder layers
    feature_layer: Optional[int] = None  # None: last decoder layer
    partial_mask_embed: bool = False

    def __post_init__(self):
        if self.img % self.patch:
            raise ConfigError("img must be divisible by patch")
        if self.dim % self.heads:
            raise ConfigError("dim must be divisible by heads")
        if self.dim % 4:
            raise ConfigError("dim must be divisible by 4 for 2d sin-cos embeddings")
        if self.attn_layers_used is None:
            self.attn_layers_used = self.dec_layers
        if self.feature_layer is None:
            self.feature_layer = self.dec_layers
        if not 1 <= self.attn_layers_used <= self.dec_layers:
            raise ConfigError("attn_layers_used out of range")
        if not 1 <= self.feature_layer <= self.dec_layers:
            raise ConfigError("feature_layer out of range")

    @property
    def grid(self) -> int:
        return self.img // self.patch

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


@dataclass
class MaePriors:
    """Transfer bundle extracted from a frozen autoencoder for one image."""

    features: Tensor  # [gh, gw, dim]
    attention: Tensor  # [T, T]; rows normalized over unmasked keys, masked keys exactly 0
    grid: tuple[int, int] = field(default=(0, 0))


def sincos_pos_embed_2d(dim: int, gh: int, gw: int) -> np.ndarray:
    """Fixed 2D sin-cos positional table, [gh*gw, dim]."""

    def axis(pos, d):
        omega = 1.0 / 10000 ** (np.arange(d // 2, dtype=np.float64) / (d / 2))
        ang = pos[:, None] * omega[None]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    gy, gx = np.meshgrid(np.arange(gh, dtype=np.float64), np.arange(gw, dtype=np.float64), indexing="ij")
    emb = np.concatenate([axis(gy.reshape(-1), dim // 2), axis(gx.reshape(-1), dim // 2)], axis=1)
    return emb.astype(default_dtype())


class SelfAttention(Module):
    def __init__(self, rng, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = self.child("qkv", Linear(rng, dim, dim * 3))
        self.proj = self.child("proj", Linear(rng, dim, dim))

    def __call__(self, x: Tensor):
        b, t, d = x.shape
        h, hd = self.heads, self.head_dim
        qkv = self.qkv(x)
        q = ops.transpose(ops.reshape(qkv[:, :, :d], (b, t, h, hd)), (0, 2, 1, 3))
        k = ops.transpose(ops.reshape(qkv[:, :, d : 2 * d], (b, t, h, hd)), (0, 2, 1, 3))
        v = ops.transpose(ops.reshape(qkv[:, :, 2 * d :], (b, t, h, hd)), (0, 2, 1, 3))
        logits = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        attn = ops.softmax_lastdim(logits)
        out = ops.matmul(attn, v)  # [b, h, t, hd]
        out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (b, t, d))
        return self.proj(out), logits, attn


class Mlp(Module):
    def __init__(self, rng, dim: int, hidden: int):
        super().__init__()
        self.fc1 = self.child("fc1", Linear(rng, dim, hidden))
        self.fc2 = self.child("fc2", Linear(rng, hidden, dim))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, rng, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln1 = self.child("ln1", LayerNorm(dim))
        self.attn = self.child("attn", SelfAttention(rng, dim, heads))
        self.ln2 = self.child("ln2", LayerNorm(dim))
        self.mlp = self.child("mlp", Mlp(rng, dim, dim * mlp_ratio))

    def __call__(self, x: Tensor):
        a, logits, attn = self.attn(self.ln1(x))
        x = ops.add(x, a)
        x = ops.add(x, self.mlp(self.ln2(x)))
        return x, logits, attn


class MaeModel(Module):
    def __init__(self, cfg: MaeConfig, rng):
        super().__init__()
        rng = as_rng(rng)
        self.cfg = cfg
        d = cfg.dim
        self.patch_embed = self.child("patch_embed", Linear(rng, cfg.patch_dim, d))
        self.enc_pos = self.buffer("enc_pos", sincos_pos_embed_2d(d, cfg.grid, cfg.grid))
        self.enc_blocks = self.child(
            "enc_blocks", ModuleList([TransformerBlock(rng, d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.enc_layers)])
        )
        self.enc_norm = self.child("enc_norm", LayerNorm(d))
        self.dec_embed = self.child("dec_embed", Linear(rng, d, d))
        self.mask_token = self.param("mask_token", (rng.standard_normal(d) * 0.02).astype(default_dtype()))
        self.dec_pos = self.buffer("dec_pos", sincos_pos_embed_2d(d, cfg.grid, cfg.grid))
        self.dec_blocks = self.child(
            "dec_blocks", ModuleList([TransformerBlock(rng, d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.dec_layers)])
        )
        self.dec_norm = self.child("dec_norm", LayerNorm(d))
        self.pixel_proj = self.child("pixel_proj", Linear(rng, d, cfg.patch_dim))
        if cfg.partial_mask_embed:
            self.partial_proj = self.child(
                "partial_proj", Linear(rng, cfg.patch * cfg.patch * (cfg.channels + 1), d)
            )
        else:
            self.partial_proj = None


# ---------------------------------------------------------------------------
# patch layout


def patchify(img: Tensor, patch: int) -> Tensor:
    """[B, C, H, W] -> [B, T, patch*patch*C]; token (0,0) covers pixels [0:p, 0:p]."""
    if img.ndim != 4:
        raise ShapeError("patchify expects [B, C, H, W]")
    b, c, h, w = img.shape
    if h % patch or w % patch:
        raise ShapeError(f"extents ({h}, {w}) not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = ops.reshape(img, (b, c, gh, patch, gw, patch))
    x = ops.transpose(x, (0, 2, 4, 3, 5, 1))  # [B, gh, gw, p, p, C]
    return ops.reshape(x, (b, gh * gw, patch * patch * c))


def unpatchify(tokens: Tensor, patch: int, channels: int) -> Tensor:
    """Inverse of patchify."""
    b, t, pd = tokens.shape
    gh = int(round(np.sqrt(t)))
    if gh * gh != t or pd != patch * patch * channels:
        raise ShapeError(f"cannot unpatchify shape {tuple(tokens.shape)}")
    x = ops.reshape(tokens, (b, gh, gh, patch, patch, channels))
    x = ops.transpose(x, (0, 5, 1, 3, 2, 4))  # [B, C, gh, p, gw, p]
    return ops.reshape(x, (b, channels, gh * patch, gh * patch))


def patchify_array(img: np.ndarray, patch: int) -> np.ndarray:
    """Numpy twin of patchify for targets that need no gradient."""
    c, h, w = img.shape[-3:]
    lead = img.shape[:-3]
    gh, gw = h // patch, w // patch
    x = img.reshape(lead + (c, gh, patch, gw, patch))
    x = np.moveaxis(x, (-4, -2, -3, -1, -5), (-5, -4, -3, -2, -1))
    return x.reshape(lead + (gh * gw, patch * patch * c))


# ---------------------------------------------------------------------------
# mask plumbing


def _mask_list(tmask: Union[TokenMask, Sequence[TokenMask]], batch: int) -> list[TokenMask]:
    if isinstance(tmask, TokenMask):
        return [tmask] * batch
    tmask = list(tmask)
    if len(tmask) != batch:
        raise ShapeError(f"{len(tmask)} masks for batch of {batch}")
    return tmask


def _index_arrays(tmasks: list[TokenMask]):
    """Per-image visible/masked index arrays; visible counts must match."""
    visible = [m.require_unmasked().unmasked_indices() for m in tmasks]
    counts = {v.size for v in visible}
    if len(counts) != 1:
        raise ContractError("batched masks must share the same visible-token count")
    masked = [m.masked_indices() for m in tmasks]
    return np.stack(visible), np.stack(masked)


# ---------------------------------------------------------------------------
# forward paths


def encode_visible(model: MaeModel, img: Tensor, tmask) -> Tensor:
    """Run the encoder over visible tokens only: [B, U, dim] with U = #unmasked."""
    cfg = model.cfg
    if img.ndim == 3:
        img = ops.reshape(img, (1,) + tuple(img.shape))
    b = img.shape[0]
    tmasks = _mask_list(tmask, b)
    vis_idx, _ = _index_arrays(tmasks)
    tokens = patchify(img, cfg.patch)
    x = ops.add(model.patch_embed(tokens), model.enc_pos)
    x = ops.gather_rows(x, vis_idx)
    for blk in model.enc_blocks:
        x, _, _ = blk(x)
        if x.shape[1] != vis_idx.shape[1]:
            raise ContractError("encoder must keep only visible rows")
    return model.enc_norm(x)


def decode(model: MaeModel, enc_out: Tensor, tmask, partial=None, want_logits: bool = False):
    """Decoder over all tokens.

    Returns (tokens_per_layer, attn_per_layer, pixel_pred); every entry of
    attn_per_layer is the head-averaged post-softmax attention. The last entry
    of tokens_per_layer is the final-norm output, i.e. the features right
    before the pixel projection. ``partial`` optionally overrides decoder
    inputs at partially-masked tokens (see partial_mask_embed).
    """
    cfg = model.cfg
    b = enc_out.shape[0]
    tmasks = _mask_list(tmask, b)
    vis_idx, _ = _index_arrays(tmasks)
    if enc_out.shape[1] != vis_idx.shape[1]:
        raise ShapeError("enc_out row count does not match the visible-token count")
    y = model.dec_embed(enc_out)
    base = ops.expand(ops.reshape(model.mask_token, (1, 1, cfg.dim)), (b, cfg.tokens, cfg.dim))
    full = ops.scatter_rows(base, vis_idx, y)
    if partial is not None:
        partial_idx, partial_values = partial
        if model.partial_proj is None:
            raise ConfigError("model was built without the partial-mask projection")
        full = ops.scatter_rows(full, partial_idx, model.partial_proj(partial_values))
    x = ops.add(full, model.dec_pos)
    tokens_per_layer: list[Tensor] = []
    attn_per_layer: list[Tensor] = []
    logits_per_layer: list[Tensor] = []
    for blk in model.dec_blocks:
        x, logits, attn = blk(x)
        tokens_per_layer.append(x)
        logits_per_layer.append(logits)
        attn_per_layer.append(ops.tmean(attn, axis=1))
    normed = model.dec_norm(x)
    tokens_per_layer[-1] = normed
    pixel_pred = model.pixel_proj(normed)
    if want_logits:
        return tokens_per_layer, attn_per_layer, pixel_pred, logits_per_layer
    return tokens_per_layer, attn_per_layer, pixel_pred


def reconstruction_loss(pixel_pred: Tensor, img: Tensor, tmask, norm_pixel_target: bool = False) -> Tensor:
    """Mean squared error over masked tokens only.

    With ``norm_pixel_target`` every target patch is standardized to mean 0 /
    unit variance (eps 1e-6) before comparison.
    """
    patch = int(round(np.sqrt(pixel_pred.shape[-1] // (img.shape[-3]))))
    if img.ndim == 3:
        img = ops.reshape(img, (1,) + tuple(img.shape))
    b = img.shape[0]
    tmasks = _mask_list(tmask, b)
    target = patchify_array(img.data, patch).astype(pixel_pred.dtype)
    if norm_pixel_target:
        mu = target.mean(axis=-1, keepdims=True)
        var = target.var(axis=-1, keepdims=True)
        target = (target - mu) / np.sqrt(var + 1e-6)
    weights = np.stack([m.flat().astype(pixel_pred.dtype) for m in tmasks])
    n_masked = float(weights.sum())
    if n_masked == 0:
        raise ContractError("no masked tokens to reconstruct")
    sq = ops.tmean(ops.square(ops.sub(pixel_pred, Tensor(target))), axis=-1)  # [B, T]
    return ops.scale(ops.tsum(ops.mul(sq, Tensor(weights))), 1.0 / n_masked)


def partial_token_inputs(img: np.ndarray, mask: MaskMap, patch: int) -> np.ndarray:
    """Per-token [rgb with holes zeroed || 0-1 mask] vectors, [T, p*p*(C+1)].

    A fully masked patch yields [zeros || ones].
    """
    c = img.shape[0]
    rgb = img * (1 - mask.bits)[None]
    rgb_tok = patchify_array(rgb, patch)
    mask_tok = patchify_array(mask.bits[None].astype(img.dtype), patch)
    return np.concatenate([rgb_tok, mask_tok], axis=-1)


def partial_mask_embed(model: MaeModel, img: Tensor, pixel_mask: MaskMap):
    """Decoder-input override for partially masked tokens.

    Returns (token_indices [1, K], inputs Tensor [1, K, p*p*(C+1)]) to pass to
    ``decode``; fully masked tokens keep the shared mask token and fully
    visible tokens keep encoder outputs. Returns None when no token is
    partially masked.
    """
    if model.partial_proj is None:
        raise ConfigError("model was built without the partial-mask projection")
    cfg = model.cfg
    arr = img.data if img.ndim == 3 else img.data[0]
    per_token = patchify_array(pixel_mask.bits[None].astype(np.float64), cfg.patch).sum(axis=-1)
    full = per_token == cfg.patch * cfg.patch
    partial = (per_token > 0) & ~full
    idx = np.flatnonzero(partial)
    if idx.size == 0:
        return None
    inputs = partial_token_inputs(arr.astype(default_dtype()), pixel_mask, cfg.patch)[idx]
    return idx[None], Tensor(inputs[None])


def extract_priors(model: MaeModel, img: Tensor, tmask: TokenMask) -> MaePriors:
    """Frozen-model read-out: layer features plus masked-key attention.

    Attention per layer and head is softmax(q k / sqrt(head_dim)) with masked
    keys excluded, then averaged over heads and over the first
    ``attn_layers_used`` decoder layers. Rows of masked queries therefore sum
    to one over unmasked keys, and masked-key columns are exactly zero.
    """
    cfg = model.cfg
    tmask.require_unmasked()
    with no_grad():
        enc = encode_visible(model, img, tmask)
        tokens_per_layer, _, _, logits_layers = decode(model, enc, tmask, want_logits=True)
        feats = tokens_per_layer[cfg.feature_layer - 1]
        features = ops.reshape(feats[0], (cfg.grid, cfg.grid, cfg.dim))
        key_mask = tmask.flat()
        acc = None
        for logits in logits_layers[: cfg.attn_layers_used]:
            probs = ops.softmax_lastdim(logits, key_mask)
            head_mean = ops.tmean(probs, axis=1)  # [1, T, T]
            acc = head_mean if acc is None else ops.add(acc, head_mean)
        attention = ops.scale(acc, 1.0 / cfg.attn_layers_used)[0]
    return MaePriors(features=features.detach(), attention=attention.detach(), grid=(cfg.grid, cfg.grid))


def mae_pretrain_step(model: MaeModel, batch: Tensor, rng, optimizer) -> float:
    """One pretraining step: sample blended masks, reconstruct, Adam update."""
    cfg = model.cfg
    rng = as_rng(rng)
    if batch.ndim == 3:
        batch = ops.reshape(batch, (1,) + tuple(batch.shape))
    b = batch.shape[0]
    tmasks = [
        gen_mae_pretrain_mask(rng, cfg.grid, cfg.grid, rng.uniform(0.10, 0.50)) for _ in range(b)
    ]
    enc = encode_visible(model, batch, tmasks)
    _, _, pixel_pred = decode(model, enc, tmasks)
    loss = reconstruction_loss(pixel_pred, batch, tmasks, cfg.norm_pixel_target)
    model.zero_grad()
    backward(loss)
    optimizer.step()
    return float(loss.item())
