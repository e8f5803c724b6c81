"""Masked-autoencoder self-supervised pretraining.

A fraction of patch tokens is hidden; the encoder sees only the visible
tokens (with their grid positional codes), a lightweight attention decoder
fills the hidden slots with a shared learned mask token, and the model is
trained to reproduce the raw pixel values of each patch under an MSE
objective computed over masked tokens only.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .bands import PatchEmbedLayer
from .encoder import EncoderBlock, EncoderConfig, ViTEncoder, sincos_pos_embed_3d
from .errors import ConfigError, NumericError, UsageError
from .module import Linear, Module, ModuleList
from .optim import AdamW
from .rng import Rng
from .tensor import Tensor


@dataclass
class MaskPlan:
    """Which token indices are hidden for one training example."""

    n_tokens: int
    mask_ratio: float
    masked: np.ndarray  # sorted unique indices into [0, n_tokens)
    seed: int

    @property
    def visible(self) -> np.ndarray:
        keep = np.ones(self.n_tokens, dtype=bool)
        keep[self.masked] = False
        return np.nonzero(keep)[0]


def random_mask(n_tokens: int, ratio: float, rng: Rng | int) -> MaskPlan:
    """Uniform sample without replacement of round(ratio * n) token indices."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"mask ratio must be in [0, 1), got {ratio}")
    if isinstance(rng, int):
        rng = Rng(rng, ("mask",))
    count = int(round(ratio * n_tokens))
    masked = np.sort(rng.choice_without_replacement(n_tokens, count)) if count else np.empty(0, dtype=np.int64)
    return MaskPlan(n_tokens=n_tokens, mask_ratio=ratio, masked=masked.astype(np.int64), seed=rng.seed)


def patchify(x: np.ndarray, patch: tuple[int, int, int]) -> np.ndarray:
    """(C, T, H, W) raster -> (N, C*t*p*p) rows in tokenizer order."""
    x = np.asarray(x)
    C, Tt, H, W = x.shape
    t, p, q = patch
    nt, nh, nw = Tt // t, H // p, W // q
    blocks = x.reshape(C, nt, t, nh, p, nw, q)
    return np.ascontiguousarray(blocks.transpose(1, 3, 5, 0, 2, 4, 6)).reshape(nt * nh * nw, C * t * p * q)


@dataclass
class MAEConfig:
    in_bands: int = 6
    patch: tuple[int, int, int] = (1, 4, 4)
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    decoder_dim: int = 32
    decoder_depth: int = 2
    mask_ratio: float = 0.75
    mlp_ratio: float = 4.0
    adaptation: str = "native"
    input_mean: float = 0.3
    input_std: float = 0.3
    # reconstruct per-patch standardized pixels instead of raw normalized ones
    per_patch_norm: bool = False

    def validate(self) -> None:
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mae.mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if self.decoder_depth < 0 or self.depth < 0:
            raise ConfigError("depths must be non-negative")
        if self.input_std <= 0:
            raise ConfigError(f"input_std must be positive, got {self.input_std}")


class MAEModel(Module):
    """Encoder on visible tokens; decoder over the full grid."""

    def __init__(self, config: MAEConfig, rng: Rng):
        super().__init__()
        config.validate()
        self.cfg = config
        self.embed = PatchEmbedLayer(in_bands=config.in_bands, patch=config.patch,
                                     embed_dim=config.embed_dim, rng=rng.child("embed"))
        self.encoder = ViTEncoder(
            EncoderConfig(depth=config.depth, heads=config.heads, embed_dim=config.embed_dim,
                          mlp_ratio=config.mlp_ratio),
            rng.child("encoder"),
        )
        dd = config.decoder_dim
        self.to_decoder = Linear(config.embed_dim, dd, rng.child("to_decoder"))
        # normalize latent rows before positional codes so visible-token
        # content enters the decoder at the same scale as position
        self.dec_in_norm_g = T.ones((dd,), requires_grad=True)
        self.dec_in_norm_b = T.zeros((dd,), requires_grad=True)
        self.mask_token = Tensor(rng.child("mask_token").trunc_normal((dd,), std=0.02), requires_grad=True)
        self.dec_blocks = ModuleList(
            EncoderBlock(dd, max(1, config.heads // 2), config.mlp_ratio, rng.child(f"dec{i}"))
            for i in range(config.decoder_depth)
        )
        self.dec_norm_g = T.ones((dd,), requires_grad=True)
        self.dec_norm_b = T.zeros((dd,), requires_grad=True)
        t, p, q = config.patch
        self.head = Linear(dd, config.in_bands * t * p * q, rng.child("head"))
        self._use_pos = True  # tests may disable for equivariance probes

    def prepare(self, x: np.ndarray) -> np.ndarray:
        """Standardize to model space, then apply the band adaptation
        (zeros padded after normalization stay exact zeros)."""
        from .bands import adapt_input

        normalized = (np.asarray(x, dtype=np.float32) - self.cfg.input_mean) / self.cfg.input_std
        return adapt_input(normalized, self.cfg.adaptation)

    def target(self, x: np.ndarray, prepared: bool = False) -> np.ndarray:
        """Per-token reconstruction target: the prepared input's pixels,
        optionally standardized within each patch."""
        rows = patchify(x if prepared else self.prepare(x), self.cfg.patch)
        if self.cfg.per_patch_norm:
            mu = rows.mean(axis=1, keepdims=True)
            sd = rows.std(axis=1, keepdims=True)
            rows = (rows - mu) / (sd + 1e-6)
        return rows

    def forward(self, x, plan: MaskPlan, prepared: bool = False) -> Tensor:
        grid = self.embed(x if prepared else self.prepare(x))
        if plan.n_tokens != grid.n_tokens:
            raise UsageError(f"mask plan covers {plan.n_tokens} tokens but the grid has {grid.n_tokens}")
        cfg = self.cfg
        tokens = self.encoder.normalize_tokens(grid.tokens)
        if self._use_pos:
            tokens = tokens + Tensor(sincos_pos_embed_3d(cfg.embed_dim, grid.nt, grid.nh, grid.nw))
        visible_idx = plan.visible
        vis = T.take(tokens, visible_idx, axis=0)
        latents = self.encoder.forward_sequence(vis.reshape(1, len(visible_idx), cfg.embed_dim))
        latents = self.to_decoder(latents.reshape(len(visible_idx), cfg.embed_dim))
        latents = T.layer_norm(latents, self.dec_in_norm_g, self.dec_in_norm_b)
        n_masked = len(plan.masked)
        if n_masked:
            mask_rows = self.mask_token.reshape(1, cfg.decoder_dim) * T.ones((n_masked, 1))
            seq = T.concat([latents, mask_rows], axis=0)
            order = np.concatenate([visible_idx, plan.masked])
        else:
            seq = latents
            order = visible_idx
        inverse = np.empty(grid.n_tokens, dtype=np.int64)
        inverse[order] = np.arange(grid.n_tokens)
        full = T.take(seq, inverse, axis=0)
        if self._use_pos:
            full = full + Tensor(sincos_pos_embed_3d(cfg.decoder_dim, grid.nt, grid.nh, grid.nw))
        h = full.reshape(1, grid.n_tokens, cfg.decoder_dim)
        for block in self.dec_blocks:
            h = block(h)
        h = T.layer_norm(h, self.dec_norm_g, self.dec_norm_b)
        return self.head(h.reshape(grid.n_tokens, cfg.decoder_dim))

    __call__ = forward


def mae_loss(recon: Tensor, target: np.ndarray, plan: MaskPlan) -> Tensor:
    """MSE over masked token rows only."""
    if len(plan.masked) == 0:
        raise ConfigError("mae loss is undefined with an empty mask")
    if tuple(recon.shape) != tuple(np.asarray(target).shape):
        raise UsageError(f"reconstruction shape {recon.shape} vs target {np.asarray(target).shape}")
    picked = T.take(recon, plan.masked, axis=0)
    return T.mse_loss(picked, Tensor(np.asarray(target)[plan.masked]))


@dataclass
class PretrainResult:
    epoch_losses: list[float]
    seconds_per_step: float
    seed: int


def pretrain_loop(scenes: list[np.ndarray], config: MAEConfig, seed: int,
                  epochs: int = 20, lr: float = 1e-3, weight_decay: float = 1e-4,
                  model: MAEModel | None = None) -> tuple[MAEModel, PretrainResult]:
    """Epochs of mask -> reconstruct -> MSE -> AdamW, deterministic per seed."""
    if not scenes:
        raise UsageError("pretraining needs a non-empty dataset")
    root = Rng(seed, ("mae",))
    if model is None:
        model = MAEModel(config, root.child("init"))
    opt = AdamW(model.named_parameters(), lr=lr, weight_decay=weight_decay)
    n_tokens = None
    losses: list[float] = []
    t0 = time.perf_counter()
    steps = 0
    for epoch in range(epochs):
        order = root.child(f"epoch{epoch}").permutation(len(scenes))
        total = 0.0
        for i, scene_idx in enumerate(order):
            x = scenes[scene_idx]
            if n_tokens is None:
                t, p, q = config.patch
                n_tokens = (x.shape[1] // t) * (x.shape[2] // p) * (x.shape[3] // q)
            # mask keyed by scene (not epoch/step): lr=0 then yields a
            # bit-constant loss curve
            plan = random_mask(n_tokens, config.mask_ratio, root.child(f"mask/scene{scene_idx}"))
            prepared = model.prepare(x)
            recon = model(prepared, plan, prepared=True)
            loss = mae_loss(recon, model.target(prepared, prepared=True), plan)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"pretraining diverged at epoch {epoch}, step {i}: loss={value}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value
            steps += 1
        losses.append(total / len(order))
    per_step = (time.perf_counter() - t0) / max(steps, 1)
    return model, PretrainResult(epoch_losses=losses, seconds_per_step=per_step, seed=seed)
