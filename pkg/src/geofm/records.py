"""Shared detection/annotation record types."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in image pixel coordinates, x1 < x2 and y1 < y2."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise UsageError(f"degenerate box: ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass
class Detection:
    """One predicted instance: box, confidence, class, optional mask."""

    box: tuple[float, float, float, float]
    score: float
    class_id: int
    mask: np.ndarray | None = None  # full-image boolean mask after pasting

    def __post_init__(self):
        if not np.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise UsageError(f"detection score must be finite in [0, 1], got {self.score}")

    @property
    def box_area(self) -> float:
        x1, y1, x2, y2 = self.box
        return max(0.0, x2 - x1) * max(0.0, y2 - y1)


@dataclass
class InstanceAnnotation:
    """One ground-truth instance: tight box, class, binary mask."""

    box: tuple[float, float, float, float]
    class_id: int
    mask: np.ndarray  # (H, W) boolean

    @property
    def box_area(self) -> float:
        x1, y1, x2, y2 = self.box
        return (x2 - x1) * (y2 - y1)

    @property
    def mask_area(self) -> int:
        return int(self.mask.sum())
