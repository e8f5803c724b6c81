"""Spatiotemporal patch embedding and input band adaptation.

The tokenizer is a 3-D convolution whose stride equals its kernel extent,
so each token is one non-overlapping (t, p, p) patch of the (C, T, H, W)
raster. Three strategies reconcile a 3-band input with a 6-band-trained
embed: pad the missing bands with zeros, duplicate the present ones, or
reinitialize the kernel for the new band count. Padding and duplication
are linear-algebra identities on the kernel (slice, respectively sum, of
its channel blocks), which the equivalence tests pin down exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import AdaptationError, UsageError
from .module import Module
from .rng import Rng
from .tensor import Tensor

BAND_ORDER_DEFAULT = ("Blue", "Green", "Red", "NarrowNIR", "SWIR1", "SWIR2")

# Full-size geometry: 16x16 spatial patches at embed width 768, where a
# 3-band retrain removes 3*16*16*768 = 589,824 kernel weights.
FULL_PATCH = (1, 16, 16)
FULL_EMBED_DIM = 768

# Desk-scale geometry used for CPU training runs.
DESK_PATCH = (1, 4, 4)
DESK_EMBED_DIM = 64

ZERO_PADDED = "zero_padded"
CHANNEL_DUPLICATION = "channel_duplication"
RETRAINED_PATCH_EMBED = "retrained_patch_embed"
NATIVE = "native"

ADAPTATION_STRATEGIES = (ZERO_PADDED, CHANNEL_DUPLICATION, RETRAINED_PATCH_EMBED, NATIVE)


@dataclass
class TokenGrid:
    """A token sequence with its (time, row, col) grid coordinates.

    Token i sits at time i // (nh*nw), row (i // nw) % nh, col i % nw.
    """

    tokens: Tensor  # (N, D)
    nt: int
    nh: int
    nw: int

    @property
    def n_tokens(self) -> int:
        return self.nt * self.nh * self.nw

    def coords(self, index: int) -> tuple[int, int, int]:
        per_frame = self.nh * self.nw
        return index // per_frame, (index % per_frame) // self.nw, index % self.nw


class PatchEmbedLayer(Module):
    """3-D convolutional tokenizer: kernel (D, C, t, p, p), stride == kernel."""

    def __init__(self, in_bands: int = 6, patch: tuple[int, int, int] = FULL_PATCH,
                 embed_dim: int = FULL_EMBED_DIM, band_order: tuple[str, ...] | None = None,
                 rng: Rng | None = None):
        super().__init__()
        if band_order is None:
            band_order = BAND_ORDER_DEFAULT[:in_bands] if in_bands <= 6 else tuple(
                f"Band{i}" for i in range(in_bands)
            )
        if len(band_order) != in_bands:
            raise UsageError(f"band_order has {len(band_order)} names for {in_bands} bands")
        rng = rng if rng is not None else Rng(0, ("patch_embed",))
        t, p, q = patch
        self.in_bands = in_bands
        self.patch = (t, p, q)
        self.embed_dim = embed_dim
        self.band_order = tuple(band_order)
        self.kernel = Tensor(rng.child("kernel").trunc_normal((embed_dim, in_bands, t, p, q), std=0.02),
                             requires_grad=True)
        self.bias = T.zeros((embed_dim,), requires_grad=True)

    def forward(self, x) -> TokenGrid:
        """Tokenize a (C, T, H, W) raster into a (N, D) grid sequence."""
        x = T.as_tensor(x)
        if x.ndim != 4:
            raise UsageError(f"expected a (C, T, H, W) raster, got shape {x.shape}")
        if x.shape[0] != self.in_bands:
            raise AdaptationError(
                f"input has {x.shape[0]} bands but the patch embed expects {self.in_bands}; "
                f"apply a band-adaptation strategy first"
            )
        fmap = T.conv3d(x, self.kernel, self.patch, self.bias)  # (D, nt, nh, nw)
        D, nt, nh, nw = fmap.shape
        tokens = fmap.transpose(1, 2, 3, 0).reshape(nt * nh * nw, D)
        return TokenGrid(tokens=tokens, nt=nt, nh=nh, nw=nw)

    __call__ = forward

    def param_count(self) -> int:
        """Kernel weights plus bias: D*C*t*p^2 + D."""
        t, p, q = self.patch
        return self.embed_dim * self.in_bands * t * p * q + self.embed_dim


def adapt_zero_pad(x: np.ndarray) -> np.ndarray:
    """Append three zero-filled bands to a 3-band raster."""
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[0] != 3:
        raise UsageError(f"zero-pad adaptation expects a (3, T, H, W) raster, got shape {x.shape}")
    pad = np.zeros((3,) + x.shape[1:], dtype=x.dtype)
    return np.concatenate([x, pad], axis=0)


def adapt_duplicate(x: np.ndarray) -> np.ndarray:
    """Replicate the three present bands into the three missing slots."""
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[0] != 3:
        raise UsageError(f"channel duplication expects a (3, T, H, W) raster, got shape {x.shape}")
    return np.concatenate([x, x], axis=0)


def adapt_input(x: np.ndarray, strategy: str) -> np.ndarray:
    if strategy == ZERO_PADDED:
        return adapt_zero_pad(x)
    if strategy == CHANNEL_DUPLICATION:
        return adapt_duplicate(x)
    if strategy in (RETRAINED_PATCH_EMBED, NATIVE):
        return np.asarray(x)
    raise UsageError(f"unknown adaptation strategy {strategy!r}")


def retrain_patch_embed(old: PatchEmbedLayer, new_bands: int, rng: Rng) -> PatchEmbedLayer:
    """Fresh kernel for `new_bands` input channels; bias and geometry kept."""
    if new_bands < 1:
        raise UsageError(f"new_bands must be >= 1, got {new_bands}")
    band_order = old.band_order[:new_bands] if new_bands <= len(old.band_order) else None
    layer = PatchEmbedLayer(in_bands=new_bands, patch=old.patch, embed_dim=old.embed_dim,
                            band_order=band_order, rng=rng)
    layer.bias.data[...] = old.bias.data
    return layer


def sliced_kernel_embed(layer: PatchEmbedLayer, channels: slice | list[int], rng_name: str = "sliced") -> PatchEmbedLayer:
    """Embed layer whose kernel is a channel slice of `layer`'s kernel."""
    idx = np.arange(layer.in_bands)[channels]
    out = PatchEmbedLayer(in_bands=len(idx), patch=layer.patch, embed_dim=layer.embed_dim,
                          band_order=tuple(layer.band_order[i] for i in idx),
                          rng=Rng(0, (rng_name,)))
    out.kernel.data[...] = layer.kernel.data[:, idx]
    out.bias.data[...] = layer.bias.data
    return out


def summed_kernel_embed(layer: PatchEmbedLayer) -> PatchEmbedLayer:
    """3-band embed whose kernel is W[:, 0:3] + W[:, 3:6] of a 6-band layer."""
    if layer.in_bands != 6:
        raise UsageError(f"summed-kernel construction needs a 6-band layer, got {layer.in_bands}")
    out = PatchEmbedLayer(in_bands=3, patch=layer.patch, embed_dim=layer.embed_dim,
                          band_order=layer.band_order[:3], rng=Rng(0, ("summed",)))
    out.kernel.data[...] = layer.kernel.data[:, 0:3] + layer.kernel.data[:, 3:6]
    out.bias.data[...] = layer.bias.data
    return out
