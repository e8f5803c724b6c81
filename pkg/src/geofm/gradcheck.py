"""Finite-difference verification of reverse-mode gradients.

Central differences are taken at 64-bit precision regardless of the
model's storage dtype: the probed point is promoted to float64 and the
function re-evaluated, which keeps the comparison tolerance limited by
truncation error rather than float32 rounding.
"""
from __future__ import annotations

import numpy as np

from .errors import NumericError
from .rng import Rng
from .tensor import Tensor, no_grad


def grad_check(f, point, h: float = 1e-4, max_coords: int | None = None, rng: Rng | None = None,
               coord_strategy: str = "random") -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` maps one tensor (or a list of tensors) to a scalar Tensor. The
    relative error at a coordinate is |analytic - cd| / max(|analytic|,
    |cd|, 1e-8). When `max_coords` is given, a subset of coordinates per
    tensor is probed instead of all of them: chosen uniformly at random
    ("random"), or the largest-|gradient| coordinates ("largest") -- the
    right choice for deep composites, where central differences on
    near-zero-gradient coordinates measure only float64 roundoff.
    """
    multi = isinstance(point, (list, tuple))
    points = list(point) if multi else [point]
    probes = [Tensor(p.data.astype(np.float64), requires_grad=True) for p in points]

    def evaluate():
        out = f(probes if multi else probes[0])
        val = float(out.data.reshape(-1)[0])
        if not np.isfinite(val):
            raise NumericError("grad_check: function evaluated to a non-finite value")
        return val, out

    _, out = evaluate()
    out.backward(leaves=probes)
    analytic = [p.grad.copy() for p in probes]

    worst = 0.0
    with no_grad():
        for t_idx, probe in enumerate(probes):
            flat = probe.data.reshape(-1)
            n = flat.size
            if max_coords is not None and n > max_coords:
                if coord_strategy == "largest":
                    coords = np.argsort(-np.abs(analytic[t_idx].reshape(-1)))[:max_coords]
                else:
                    picker = rng if rng is not None else Rng(0, ("grad_check",))
                    coords = picker.child(f"coords{t_idx}").choice_without_replacement(n, max_coords)
            else:
                coords = range(n)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + h
                fp, _ = evaluate()
                flat[c] = orig - h
                fm, _ = evaluate()
                flat[c] = orig
                cd = (fp - fm) / (2.0 * h)
                a = float(analytic[t_idx].reshape(-1)[c])
                err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
                worst = max(worst, err)
    return worst
