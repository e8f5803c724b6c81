"""Minimal parameter containers for model assembly.

A Module is just a named bag of Tensors and child Modules; attribute
assignment registers them, and `named_parameters` walks the tree in
registration order to produce the stable names used by checkpoints and
optimizers.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, p in self._params.items():
            out[prefix + name] = p
        for name, child in self._children.items():
            out.update(child.named_parameters(prefix + name + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to_dtype(self, dtype) -> "Module":
        """Cast all parameters in place (e.g. float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        self._children[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    """Affine map on the last axis: y = x @ w + b.

    Default init is xavier-scaled truncated normal; pass `std` to pin a
    specific scale (e.g. near-zero output heads).
    """

    def __init__(self, in_features: int, out_features: int, rng, std: float | None = None,
                 zero_init: bool = False):
        super().__init__()
        from .tensor import zeros

        if zero_init:
            self.w = zeros((in_features, out_features), requires_grad=True)
        else:
            if std is None:
                std = float(np.sqrt(2.0 / (in_features + out_features)))
            self.w = Tensor(rng.trunc_normal((in_features, out_features), std=std), requires_grad=True)
        self.b = zeros((out_features,), requires_grad=True)

    def __call__(self, x):
        return x @ self.w + self.b
