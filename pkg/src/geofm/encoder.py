"""Transformer encoder over the token grid, plus a small hierarchical
convolutional backbone.

Two attention regimes cover the backbone comparison: global multi-head
attention over every token, and window attention that runs the same
scaled-dot-product math independently inside non-overlapping spatial
windows. Blocks are pre-norm with a GELU MLP; positional information is a
fixed 3-D sin-cos embedding factorized over (time, row, col), so
checkpoints carry no geometry.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .bands import PatchEmbedLayer, TokenGrid
from .errors import ConfigError, UsageError
from .module import Linear, Module, ModuleList
from .rng import Rng
from .tensor import Tensor

GLOBAL_ATTENTION = "global"
WINDOWED_ATTENTION = "windowed"


# ------------------------------------------------------------ positional code
def _sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    half = dim // 2
    omega = 1.0 / (10000.0 ** (np.arange(half, dtype=np.float64) / half))
    angles = np.outer(positions.astype(np.float64), omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sincos_pos_embed_3d(dim: int, nt: int, nh: int, nw: int) -> np.ndarray:
    """Fixed (N, dim) positional table factorized over (time, row, col)."""
    if dim % 2 != 0:
        raise ConfigError(f"positional embedding width must be even, got {dim}")
    d_space = (3 * dim // 8) // 2 * 2
    d_time = dim - 2 * d_space
    tt, rr, cc = np.meshgrid(np.arange(nt), np.arange(nh), np.arange(nw), indexing="ij")
    parts = [
        _sincos_1d(d_time, tt.reshape(-1)),
        _sincos_1d(d_space, rr.reshape(-1)),
        _sincos_1d(d_space, cc.reshape(-1)),
    ]
    return np.concatenate(parts, axis=1).astype(np.float32)


# ------------------------------------------------------------------- attention
class MultiHeadAttention(Module):
    """Scaled dot-product attention over (B, N, D) token batches."""

    def __init__(self, dim: int, heads: int, rng: Rng):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"embed dim {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = 1.0 / np.sqrt(self.head_dim)
        self.qkv = Linear(dim, 3 * dim, rng.child("qkv"))
        self.proj = Linear(dim, dim, rng.child("proj"))

    def __call__(self, x: Tensor, return_weights: bool = False):
        B, N, D = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, self.head_dim).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]  # each (B, heads, N, head_dim)
        attn = T.softmax((q @ k.transpose(0, 1, 3, 2)) * self.scale, axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, N, D)
        out = self.proj(out)
        if return_weights:
            return out, attn
        return out


class EncoderBlock(Module):
    """Pre-norm transformer block: x + attn(LN(x)); x + mlp(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: Rng):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1_g = T.ones((dim,), requires_grad=True)
        self.norm1_b = T.zeros((dim,), requires_grad=True)
        self.attn = MultiHeadAttention(dim, heads, rng.child("attn"))
        self.norm2_g = T.ones((dim,), requires_grad=True)
        self.norm2_b = T.zeros((dim,), requires_grad=True)
        self.fc1 = Linear(dim, hidden, rng.child("fc1"))
        self.fc2 = Linear(hidden, dim, rng.child("fc2"))

    def __call__(self, x: Tensor, window: int | None = None, grid: tuple[int, int] | None = None) -> Tensor:
        h = T.layer_norm(x, self.norm1_g, self.norm1_b)
        if window is None:
            h = self.attn(h)
        else:
            h = self._windowed(h, window, grid)
        x = x + h
        h = T.layer_norm(x, self.norm2_g, self.norm2_b)
        h = self.fc2(T.gelu(self.fc1(h)))
        return x + h

    def _windowed(self, x: Tensor, window: int, grid: tuple[int, int]) -> Tensor:
        nh, nw = grid
        B, N, D = x.shape
        if N != nh * nw:
            raise UsageError(f"token count {N} does not match grid {nh}x{nw}")
        if nh % window or nw % window:
            raise ConfigError(f"grid {nh}x{nw} is not divisible by window size {window}")
        gh, gw = nh // window, nw // window
        tiles = (
            x.reshape(B, gh, window, gw, window, D)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(B * gh * gw, window * window, D)
        )
        out = self.attn(tiles)
        return (
            out.reshape(B, gh, gw, window, window, D)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(B, N, D)
        )


@dataclass
class EncoderConfig:
    depth: int = 4
    heads: int = 4
    embed_dim: int = 64
    mlp_ratio: float = 4.0
    attention: str = GLOBAL_ATTENTION
    window_size: int = 2
    use_pos_embed: bool = True

    def validate(self) -> None:
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.attention not in (GLOBAL_ATTENTION, WINDOWED_ATTENTION):
            raise ConfigError(f"unknown attention kind {self.attention!r}")
        if self.attention == WINDOWED_ATTENTION and self.window_size < 1:
            raise ConfigError(f"window_size must be >= 1, got {self.window_size}")


class ViTEncoder(Module):
    """A stack of encoder blocks over the patch-token grid.

    Incoming tokens are layer-normalized before positional codes are
    added: raw patch projections are small next to the O(1) sin-cos table,
    and an unnormalized stream is position-dominated.
    """

    def __init__(self, config: EncoderConfig, rng: Rng):
        super().__init__()
        config.validate()
        self.config = config
        self.embed_norm_g = T.ones((config.embed_dim,), requires_grad=True)
        self.embed_norm_b = T.zeros((config.embed_dim,), requires_grad=True)
        self.blocks = ModuleList(
            EncoderBlock(config.embed_dim, config.heads, config.mlp_ratio, rng.child(f"block{i}"))
            for i in range(config.depth)
        )
        self.norm_g = T.ones((config.embed_dim,), requires_grad=True)
        self.norm_b = T.zeros((config.embed_dim,), requires_grad=True)
        self._pos_cache: dict[tuple[int, int, int], np.ndarray] = {}

    def normalize_tokens(self, tokens: Tensor) -> Tensor:
        return T.layer_norm(tokens, self.embed_norm_g, self.embed_norm_b)

    def pos_table(self, nt: int, nh: int, nw: int) -> np.ndarray:
        key = (nt, nh, nw)
        if key not in self._pos_cache:
            self._pos_cache[key] = sincos_pos_embed_3d(self.config.embed_dim, nt, nh, nw)
        return self._pos_cache[key]

    def forward_sequence(self, x: Tensor) -> Tensor:
        """Run the block stack + final norm over an arbitrary (1, N, D)
        sequence with global attention (no positional handling)."""
        if self.config.attention != GLOBAL_ATTENTION:
            raise ConfigError("forward_sequence supports global attention only")
        for block in self.blocks:
            x = block(x)
        return T.layer_norm(x, self.norm_g, self.norm_b)

    def forward_tokens(self, grid: TokenGrid, add_pos: bool | None = None) -> TokenGrid:
        cfg = self.config
        use_pos = cfg.use_pos_embed if add_pos is None else add_pos
        tokens = self.normalize_tokens(grid.tokens)
        if use_pos:
            tokens = tokens + Tensor(self.pos_table(grid.nt, grid.nh, grid.nw))
        x = tokens.reshape(1, grid.n_tokens, cfg.embed_dim)
        window = None
        if cfg.attention == WINDOWED_ATTENTION:
            if grid.nt != 1:
                raise ConfigError("window attention requires a single time step")
            window = cfg.window_size
        for block in self.blocks:
            x = block(x, window=window, grid=(grid.nh, grid.nw))
        x = T.layer_norm(x, self.norm_g, self.norm_b)
        return TokenGrid(tokens=x.reshape(grid.n_tokens, cfg.embed_dim), nt=grid.nt, nh=grid.nh, nw=grid.nw)

    def encode(self, x, embed: PatchEmbedLayer) -> Tensor:
        """Raster -> single-scale (D, H/p, W/p) feature map (requires T == 1)."""
        grid = embed(x)
        if grid.nt != 1:
            raise UsageError(f"encode expects a single time step, got T={grid.nt}")
        out = self.forward_tokens(grid)
        return out.tokens.reshape(grid.nh, grid.nw, self.config.embed_dim).transpose(2, 0, 1)


# --------------------------------------------------------------- conv blocks
def channel_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """LayerNorm across channels of an (N, C, H, W) map."""
    return T.layer_norm(x.transpose(0, 2, 3, 1), gamma, beta).transpose(0, 3, 1, 2)


class Conv2dLayer(Module):
    def __init__(self, in_ch: int, out_ch: int, ksize: int, rng: Rng, stride: int = 1,
                 padding: int | None = None, std: float | None = None, zero_init: bool = False):
        super().__init__()
        self.stride = stride
        self.padding = (ksize // 2) if padding is None else padding
        if zero_init:
            self.kernel = T.zeros((out_ch, in_ch, ksize, ksize), requires_grad=True)
        else:
            if std is None:
                std = float(np.sqrt(2.0 / (in_ch * ksize * ksize)))
            self.kernel = Tensor(rng.normal((out_ch, in_ch, ksize, ksize), std=std), requires_grad=True)
        self.bias = T.zeros((out_ch,), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.kernel, self.bias, stride=self.stride, padding=self.padding)


class ResidualDownBlock(Module):
    """stride-2 unit: 1x1 projection shortcut + (conv-norm-act-conv) branch."""

    def __init__(self, in_ch: int, out_ch: int, rng: Rng):
        super().__init__()
        self.shortcut = Conv2dLayer(in_ch, out_ch, 1, rng.child("short"), stride=2, padding=0)
        self.conv1 = Conv2dLayer(in_ch, out_ch, 3, rng.child("conv1"), stride=2)
        self.ng = T.ones((out_ch,), requires_grad=True)
        self.nb = T.zeros((out_ch,), requires_grad=True)
        self.conv2 = Conv2dLayer(out_ch, out_ch, 3, rng.child("conv2"), stride=1)

    def __call__(self, x: Tensor) -> Tensor:
        branch = self.conv2(T.gelu(channel_norm(self.conv1(x), self.ng, self.nb)))
        return self.shortcut(x) + branch


@dataclass
class ConvBackboneConfig:
    in_bands: int = 6
    widths: tuple[int, int, int, int] = (32, 64, 96, 128)
    stem_width: int = 16

    def validate(self) -> None:
        if len(self.widths) != 4:
            raise ConfigError(f"conv backbone needs 4 stage widths, got {self.widths}")


class ConvBackbone(Module):
    """Five stride-2 residual units; taps at strides 4, 8, 16, and 32."""

    def __init__(self, config: ConvBackboneConfig, rng: Rng):
        super().__init__()
        config.validate()
        self.config = config
        w = (config.stem_width,) + tuple(config.widths)
        self.units = ModuleList(
            ResidualDownBlock(cin, cout, rng.child(f"unit{i}"))
            for i, (cin, cout) in enumerate(zip((config.in_bands,) + w[:-1], w))
        )

    def __call__(self, x) -> dict[int, Tensor]:
        x = T.as_tensor(x)
        if x.ndim == 4:  # (C, T, H, W) with T == 1
            if x.shape[1] != 1:
                raise UsageError(f"conv backbone expects T=1, got T={x.shape[1]}")
            x = x.reshape(x.shape[0], x.shape[2], x.shape[3])
        C, H, W = x.shape
        if H % 32 or W % 32:
            raise ConfigError(f"input {H}x{W} is not divisible by 32")
        h = x.reshape(1, C, H, W)
        maps: dict[int, Tensor] = {}
        stride = 1
        for unit in self.units:
            h = unit(h)
            stride *= 2
            if stride >= 4:
                maps[stride] = h.reshape(h.shape[1], h.shape[2], h.shape[3])
        return maps

    @property
    def out_channels(self) -> dict[int, int]:
        w = self.config.widths
        return {4: w[0], 8: w[1], 16: w[2], 32: w[3]}
