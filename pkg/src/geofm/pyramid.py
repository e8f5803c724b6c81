"""Multi-scale feature construction.

Two routes produce the same four-level, uniform-width pyramid: an FPN that
projects hierarchical backbone maps to a common width and fuses them top-
down with nearest-neighbor upsampling, and a generator that manufactures
all four strides from one single-scale transformer map via transposed
convolutions (finer), identity (same), and max-pooling (coarser).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, load_into
from .encoder import Conv2dLayer, channel_norm
from .errors import ConfigError, ShapeError
from .module import Module, ModuleList
from .rng import Rng
from .tensor import Tensor

PYRAMID_STRIDES = (4, 8, 16, 32)


@dataclass
class FeaturePyramid:
    """stride -> (F, H/stride, W/stride) feature map, uniform F."""

    levels: dict[int, Tensor]

    def validate(self, image_size: tuple[int, int] | None = None) -> "FeaturePyramid":
        if sorted(self.levels) != list(PYRAMID_STRIDES):
            raise ShapeError(f"pyramid must carry strides {PYRAMID_STRIDES}, got {sorted(self.levels)}")
        widths = {fmap.shape[0] for fmap in self.levels.values()}
        if len(widths) != 1:
            raise ShapeError(f"pyramid channel widths differ across levels: {widths}")
        base_h = self.levels[4].shape[1] * 4
        base_w = self.levels[4].shape[2] * 4
        if image_size is not None and (base_h, base_w) != tuple(image_size):
            raise ShapeError(f"pyramid implies source {base_h}x{base_w}, expected {image_size}")
        for s, fmap in self.levels.items():
            if fmap.shape[1] * s != base_h or fmap.shape[2] * s != base_w:
                raise ShapeError(
                    f"level {s} has shape {fmap.shape[1:]} inconsistent with source {base_h}x{base_w}"
                )
        return self

    @property
    def channels(self) -> int:
        return self.levels[4].shape[0]


class FPN(Module):
    """1x1 laterals to F channels, top-down 2x nearest + add, 3x3 smoothing."""

    def __init__(self, in_channels: dict[int, int], out_channels: int, rng: Rng):
        super().__init__()
        if sorted(in_channels) != list(PYRAMID_STRIDES):
            raise ConfigError(f"FPN needs input strides {PYRAMID_STRIDES}, got {sorted(in_channels)}")
        self.out_channels = out_channels
        self.laterals = ModuleList(
            Conv2dLayer(in_channels[s], out_channels, 1, rng.child(f"lateral{s}"), padding=0)
            for s in PYRAMID_STRIDES
        )
        self.outputs = ModuleList(
            Conv2dLayer(out_channels, out_channels, 3, rng.child(f"output{s}"))
            for s in PYRAMID_STRIDES
        )

    def __call__(self, maps: dict[int, Tensor]) -> FeaturePyramid:
        if sorted(maps) != list(PYRAMID_STRIDES):
            raise ShapeError(f"FPN input must carry strides {PYRAMID_STRIDES}, got {sorted(maps)}")
        for s in PYRAMID_STRIDES[:-1]:
            if maps[s].shape[1] != 2 * maps[2 * s].shape[1] or maps[s].shape[2] != 2 * maps[2 * s].shape[2]:
                raise ShapeError(
                    f"level sizes inconsistent: stride {s} is {maps[s].shape[1:]}, "
                    f"stride {2 * s} is {maps[2 * s].shape[1:]}"
                )
        lat = {
            s: conv(maps[s].reshape((1,) + maps[s].shape))
            for s, conv in zip(PYRAMID_STRIDES, self.laterals)
        }
        merged = {32: lat[32]}
        for s in (16, 8, 4):
            merged[s] = lat[s] + T.upsample_nearest2x(merged[2 * s])
        levels = {}
        for s, conv in zip(PYRAMID_STRIDES, self.outputs):
            out = conv(merged[s])
            levels[s] = out.reshape(out.shape[1:])
        return FeaturePyramid(levels).validate()


class _Deconv2x(Module):
    def __init__(self, channels: int, rng: Rng):
        super().__init__()
        self.kernel = Tensor(rng.normal((channels, channels, 2, 2), std=float(np.sqrt(2.0 / (channels * 4)))),
                             requires_grad=True)
        self.bias = T.zeros((channels,), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.kernel, self.bias, stride=2)


class SingleScalePyramidGenerator(Module):
    """Build strides 4/8/16/32 from one stride-`source_stride` map.

    Finer levels use stacked 2x transposed convolutions (norm + GELU
    between a stacked pair), the matching level is an identity, coarser
    levels max-pool; every branch ends in a 1x1 projection to the uniform
    width followed by a 3x3 smoothing convolution.
    """

    def __init__(self, in_dim: int, out_channels: int, rng: Rng, source_stride: int = 16):
        super().__init__()
        if source_stride not in PYRAMID_STRIDES:
            raise ConfigError(f"source stride must be one of {PYRAMID_STRIDES}, got {source_stride}")
        self.source_stride = source_stride
        self.in_dim = in_dim
        self.out_channels = out_channels
        self.deconvs: dict[int, list[_Deconv2x]] = {}
        self.norms: dict[int, tuple[Tensor, Tensor]] = {}
        deconv_list = ModuleList()
        for s in PYRAMID_STRIDES:
            n_up = int(np.log2(source_stride / s)) if s < source_stride else 0
            chain = [_Deconv2x(in_dim, rng.child(f"deconv{s}_{i}")) for i in range(n_up)]
            for m in chain:
                deconv_list.append(m)
            self.deconvs[s] = chain
            if n_up > 1:
                g = T.ones((in_dim,), requires_grad=True)
                b = T.zeros((in_dim,), requires_grad=True)
                setattr(self, f"upnorm{s}_g", g)
                setattr(self, f"upnorm{s}_b", b)
                self.norms[s] = (g, b)
        self.deconv_stack = deconv_list
        self.projections = ModuleList(
            Conv2dLayer(in_dim, out_channels, 1, rng.child(f"proj{s}"), padding=0)
            for s in PYRAMID_STRIDES
        )
        self.outputs = ModuleList(
            Conv2dLayer(out_channels, out_channels, 3, rng.child(f"out{s}"))
            for s in PYRAMID_STRIDES
        )

    def __call__(self, fmap: Tensor, source_stride: int | None = None) -> FeaturePyramid:
        if source_stride is not None and source_stride != self.source_stride:
            raise ConfigError(
                f"generator was built for source stride {self.source_stride}, got {source_stride}"
            )
        x = fmap.reshape((1,) + fmap.shape)
        levels = {}
        for idx, s in enumerate(PYRAMID_STRIDES):
            h = x
            if s < self.source_stride:
                chain = self.deconvs[s]
                for i, deconv in enumerate(chain):
                    h = deconv(h)
                    if i + 1 < len(chain):
                        g, b = self.norms[s]
                        h = T.gelu(channel_norm(h, g, b))
            elif s > self.source_stride:
                factor = s // self.source_stride
                while factor > 1:
                    h = T.max_pool2d(h, 2)
                    factor //= 2
            h = self.projections[idx](h)
            h = self.outputs[idx](h)
            levels[s] = h.reshape(h.shape[1:])
        return FeaturePyramid(levels).validate()


def load_pretrained_pyramid(generator: Module, checkpoint_dir, strict: bool = True,
                            prefix: str = "") -> dict:
    """Load generator weights from a checkpoint, optionally under `prefix`.

    Returns the load report: {"loaded": [...], "skipped": [...],
    "missing": [...]} (missing generator params stay at their
    initialization when strict is off).
    """
    loaded = load_checkpoint(checkpoint_dir)
    if prefix:
        loaded = {k[len(prefix):]: v for k, v in loaded.items() if k.startswith(prefix)}
    return load_into(generator.named_parameters(), loaded, strict=strict)
