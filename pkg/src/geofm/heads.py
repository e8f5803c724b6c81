"""Task-adaptation heads: anchors, RPN, RoI pooling, box and mask branches.

The flow mirrors the two-stage detection recipe: per-level anchors slide
over the pyramid, an RPN scores and regresses them into proposals,
RoI Align cuts quantization-free fixed-size patches per proposal, the box
branch classifies and refines, and (for instance segmentation only) the
mask branch predicts a per-class 28x28 probability grid that is pasted
back into image space.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError, ShapeError, UsageError
from .module import Linear, Module, ModuleList
from .encoder import Conv2dLayer
from .rng import Rng
from .tensor import Tensor

LOG_RATIO_CLAMP = float(np.log(1000.0 / 16.0))


# ------------------------------------------------------------------- anchors
@dataclass
class AnchorConfig:
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    scale: float = 4.0  # anchor side = scale * stride

    def validate(self) -> None:
        if not self.ratios:
            raise ConfigError("anchor ratios must be non-empty")

    @property
    def per_position(self) -> int:
        return len(self.ratios)


def generate_anchors(level_shapes: dict[int, tuple[int, int]], config: AnchorConfig) -> dict[int, np.ndarray]:
    """Per-level (H/s * W/s * len(ratios), 4) anchors.

    Anchors are centered at ((j+0.5)s, (i+0.5)s); the base size grows with
    stride (one scale per level) and each aspect ratio preserves area.
    """
    config.validate()
    out = {}
    for stride, (h, w) in sorted(level_shapes.items()):
        size = config.scale * stride
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        cx = (jj.reshape(-1) + 0.5) * stride
        cy = (ii.reshape(-1) + 0.5) * stride
        boxes = []
        for r in config.ratios:
            bw = size * np.sqrt(1.0 / r)
            bh = size * np.sqrt(r)
            boxes.append(np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=1))
        # position-major, ratio-minor: matches the head's output layout
        out[stride] = np.stack(boxes, axis=1).reshape(-1, 4).astype(np.float32)
    return out


# ----------------------------------------------------------------- box coding
def encode_boxes(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Regression targets: the inverse of decode_boxes."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2
    acy = anchors[:, 1] + ah / 2
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tcx = targets[:, 0] + tw / 2
    tcy = targets[:, 1] + th / 2
    return np.stack(
        [(tcx - acx) / aw, (tcy - acy) / ah, np.log(tw / aw), np.log(th / ah)], axis=1
    ).astype(np.float32)


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray, image_size: tuple[int, int] | None = None) -> np.ndarray:
    """cx' = cx + dx*w, cy' = cy + dy*h, w' = w*exp(dw), h' = h*exp(dh)."""
    if not np.all(np.isfinite(deltas)):
        raise NumericError("non-finite box deltas")
    if anchors.shape != deltas.shape:
        raise ShapeError(f"anchor/delta count mismatch: {anchors.shape} vs {deltas.shape}")
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2
    acy = anchors[:, 1] + ah / 2
    dw = np.minimum(deltas[:, 2], LOG_RATIO_CLAMP)
    dh = np.minimum(deltas[:, 3], LOG_RATIO_CLAMP)
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * np.exp(dw)
    h = ah * np.exp(dh)
    boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    if image_size is not None:
        height, width = image_size
        boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0, width)
        boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0, height)
    return boxes.astype(np.float32)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) boxes."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / union, 0.0)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy descending-score suppression; ties keep the lower input index."""
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise NumericError("non-finite scores in nms")
    if len(boxes) == 0:
        return np.empty(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    areas = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        if order.size == 1:
            break
        rest = order[1:]
        ix1 = np.maximum(x1[i], x1[rest])
        iy1 = np.maximum(y1[i], y1[rest])
        ix2 = np.minimum(x2[i], x2[rest])
        iy2 = np.minimum(y2[i], y2[rest])
        inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
        union = areas[i] + areas[rest] - inter
        iou = np.where(union > 0, inter / union, 0.0)
        order = rest[iou <= iou_threshold]
    return np.asarray(keep, dtype=np.int64)


# ------------------------------------------------------------------ RoI Align
def roi_align(fmap: Tensor, boxes: np.ndarray, stride: int, out_size: int, sampling: int = 2) -> Tensor:
    """Quantization-free bilinear pooling to (R, F, out_size, out_size).

    Each output cell averages sampling x sampling bilinear samples placed at
    regular sub-positions inside its bin. Feature values live at cell
    centers (continuous feature coordinate = pixel/stride - 0.5).
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise UsageError(f"boxes must be (R, 4), got {boxes.shape}")
    if np.any(boxes[:, 2] <= boxes[:, 0]) or np.any(boxes[:, 3] <= boxes[:, 1]):
        raise UsageError("empty RoI: every box needs positive area")
    F, H, W = fmap.shape
    R = len(boxes)
    fx1 = boxes[:, 0] / stride - 0.5
    fy1 = boxes[:, 1] / stride - 0.5
    bin_w = (boxes[:, 2] - boxes[:, 0]) / stride / out_size
    bin_h = (boxes[:, 3] - boxes[:, 1]) / stride / out_size
    # sample offsets inside one bin: (k + 0.5)/sampling for k < sampling
    offs = (np.arange(sampling) + 0.5) / sampling
    oy, ox = np.meshgrid(np.arange(out_size), np.arange(out_size), indexing="ij")
    # (R, oh, ow, s, s)
    ys = fy1[:, None, None, None, None] + (oy[None, :, :, None, None] + offs[None, None, None, :, None]) * bin_h[:, None, None, None, None]
    xs = fx1[:, None, None, None, None] + (ox[None, :, :, None, None] + offs[None, None, None, None, :]) * bin_w[:, None, None, None, None]
    ys = np.clip(ys, 0.0, H - 1.0)
    xs = np.clip(xs, 0.0, W - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy1 = ys - y0
    wx1 = xs - x0
    wy0 = 1.0 - wy1
    wx0 = 1.0 - wx1

    flat = fmap.transpose(1, 2, 0).reshape(H * W, F)
    S = R * out_size * out_size * sampling * sampling

    def gather(yi, xi, weight):
        idx = (yi * W + xi).reshape(-1)
        w = Tensor(weight.reshape(S, 1).astype(fmap.dtype))
        return T.take(flat, idx, axis=0) * w

    val = (
        gather(y0, x0, wy0 * wx0)
        + gather(y0, x1, wy0 * wx1)
        + gather(y1, x0, wy1 * wx0)
        + gather(y1, x1, wy1 * wx1)
    )
    val = val.reshape(R, out_size, out_size, sampling * sampling, F)
    return val.mean(axis=3).transpose(0, 3, 1, 2)


def assign_pyramid_levels(boxes: np.ndarray, available_strides: list[int], canonical_size: float) -> np.ndarray:
    """FPN level per box: k = floor(4 + log2(sqrt(area)/canonical)), clamped.

    `canonical_size` is the image extent that maps a full-image box onto
    stride 16 (224 at full scale, the train image size at desk scale).
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    area = np.clip(boxes[:, 2] - boxes[:, 0], 1e-6, None) * np.clip(boxes[:, 3] - boxes[:, 1], 1e-6, None)
    k = np.floor(4 + np.log2(np.sqrt(area) / canonical_size + 1e-12))
    strides = np.power(2.0, np.clip(k, 2, 5))
    avail = np.asarray(sorted(available_strides), dtype=np.float64)
    idx = np.abs(np.log2(strides)[:, None] - np.log2(avail)[None, :]).argmin(axis=1)
    return avail[idx].astype(np.int64)


# ------------------------------------------------------------------- modules
class RPNHead(Module):
    """Shared 3x3 conv trunk with 1x1 objectness and box-delta siblings."""

    def __init__(self, channels: int, anchors_per_position: int, rng: Rng):
        super().__init__()
        self.anchors_per_position = anchors_per_position
        self.trunk = Conv2dLayer(channels, channels, 3, rng.child("trunk"))
        self.objectness = Conv2dLayer(channels, anchors_per_position, 1, rng.child("objectness"),
                                      padding=0, std=0.01)
        self.deltas = Conv2dLayer(channels, 4 * anchors_per_position, 1, rng.child("deltas"),
                                  padding=0, std=0.01)

    def __call__(self, levels: dict[int, Tensor]) -> tuple[Tensor, Tensor]:
        """Concatenated (A_total,) objectness logits and (A_total, 4) deltas
        across levels in ascending-stride, position-major, ratio-minor order."""
        logits, deltas = [], []
        A = self.anchors_per_position
        for s in sorted(levels):
            fmap = levels[s]
            h = T.gelu(self.trunk(fmap.reshape((1,) + fmap.shape)))
            obj = self.objectness(h)  # (1, A, H, W)
            dlt = self.deltas(h)      # (1, 4A, H, W)
            _, _, hh, ww = obj.shape
            logits.append(obj.transpose(0, 2, 3, 1).reshape(hh * ww * A))
            deltas.append(dlt.reshape(A, 4, hh, ww).transpose(2, 3, 0, 1).reshape(hh * ww * A, 4))
        return T.concat(logits, axis=0), T.concat(deltas, axis=0)


class BoxHead(Module):
    """Two hidden layers, then class logits (background = 0) and
    class-agnostic box deltas."""

    def __init__(self, in_features: int, num_classes: int, rng: Rng, hidden: int = 256):
        super().__init__()
        self.num_classes = num_classes
        self.fc1 = Linear(in_features, hidden, rng.child("fc1"))
        self.fc2 = Linear(hidden, hidden, rng.child("fc2"))
        self.cls = Linear(hidden, num_classes + 1, rng.child("cls"), std=0.01)
        self.reg = Linear(hidden, 4, rng.child("reg"), std=0.001)

    def __call__(self, roi_features: Tensor) -> tuple[Tensor, Tensor]:
        R = roi_features.shape[0]
        h = roi_features.reshape(R, -1)
        h = T.gelu(self.fc1(h))
        h = T.gelu(self.fc2(h))
        return self.cls(h), self.reg(h)


class MaskHead(Module):
    """Four 3x3 convs, one 2x transposed conv, 1x1 per-class output."""

    def __init__(self, in_channels: int, num_classes: int, rng: Rng, width: int = 32):
        super().__init__()
        self.num_classes = num_classes
        self.convs = ModuleList(
            Conv2dLayer(in_channels if i == 0 else width, width, 3, rng.child(f"conv{i}"))
            for i in range(4)
        )
        self.deconv = _MaskDeconv(width, rng.child("deconv"))
        self.predictor = Conv2dLayer(width, num_classes, 1, rng.child("predictor"), padding=0, std=0.01)

    def __call__(self, roi_features: Tensor) -> Tensor:
        h = roi_features
        for conv in self.convs:
            h = T.gelu(conv(h))
        h = T.gelu(self.deconv(h))
        return self.predictor(h)  # (R, K, 28, 28) logits


class _MaskDeconv(Module):
    def __init__(self, channels: int, rng: Rng):
        super().__init__()
        self.kernel = Tensor(rng.normal((channels, channels, 2, 2), std=float(np.sqrt(2.0 / (channels * 4)))),
                             requires_grad=True)
        self.bias = T.zeros((channels,), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.kernel, self.bias, stride=2)


# -------------------------------------------------------------- assignment
def assign_targets_rpn(anchors: np.ndarray, gt_boxes: np.ndarray,
                       pos_iou: float = 0.7, neg_iou: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    """Labels in {1 pos, 0 neg, -1 ignore} and the matched gt index per anchor.

    Positive when IoU >= pos_iou or when the anchor is (one of) the best
    for some gt; negative below neg_iou; ignored in between. With zero gt
    boxes everything is negative.
    """
    n = len(anchors)
    if len(gt_boxes) == 0:
        return np.zeros(n, dtype=np.int64), np.full(n, -1, dtype=np.int64)
    ious = iou_matrix(anchors, gt_boxes)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels = np.full(n, -1, dtype=np.int64)
    labels[best_iou < neg_iou] = 0
    labels[best_iou >= pos_iou] = 1
    # argmax-for-a-gt anchors are positive regardless of threshold
    per_gt_best = ious.max(axis=0)
    for g in range(len(gt_boxes)):
        if per_gt_best[g] > 0:
            winners = np.nonzero(np.abs(ious[:, g] - per_gt_best[g]) < 1e-9)[0]
            labels[winners] = 1
            best_gt[winners] = g
    return labels, np.where(labels == 1, best_gt, -1)


def assign_targets_head(proposals: np.ndarray, gt_boxes: np.ndarray, gt_classes: np.ndarray,
                        pos_iou: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Labels in {0 background, 1+class} and matched gt index per proposal."""
    n = len(proposals)
    if len(gt_boxes) == 0:
        return np.zeros(n, dtype=np.int64), np.full(n, -1, dtype=np.int64)
    ious = iou_matrix(proposals, gt_boxes)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels = np.zeros(n, dtype=np.int64)
    pos = best_iou >= pos_iou
    labels[pos] = gt_classes[best_gt[pos]] + 1
    matched = np.where(pos, best_gt, -1)
    return labels, matched


def sample_balanced(labels: np.ndarray, num: int, pos_fraction: float, rng: Rng) -> np.ndarray:
    """Sample up to `num` indices with at most `pos_fraction` positives.

    For RPN labels {1, 0, -1} positives are label 1 and ignored (-1) are
    excluded; for head labels {0..K} positives are label > 0.
    """
    pos_idx = np.nonzero(labels >= 1)[0]
    neg_idx = np.nonzero(labels == 0)[0]
    n_pos = min(len(pos_idx), int(round(num * pos_fraction)))
    n_neg = min(len(neg_idx), num - n_pos)
    picked = []
    if len(pos_idx):
        sel = rng.child("pos").choice_without_replacement(len(pos_idx), n_pos) if n_pos < len(pos_idx) else np.arange(len(pos_idx))
        picked.append(pos_idx[np.sort(sel)])
    if len(neg_idx) and n_neg:
        sel = rng.child("neg").choice_without_replacement(len(neg_idx), n_neg) if n_neg < len(neg_idx) else np.arange(len(neg_idx))
        picked.append(neg_idx[np.sort(sel)])
    return np.concatenate(picked) if picked else np.empty(0, dtype=np.int64)


# ------------------------------------------------------------------- losses
def task_losses(parts: dict[str, Tensor], task: str) -> tuple[Tensor, dict[str, float]]:
    """Combine loss terms; the mask term exists only for instance segmentation."""
    if task not in ("detection", "instance_segmentation"):
        raise ConfigError(f"unknown task {task!r}")
    order = ["rpn_objectness", "rpn_box", "cls", "box"]
    if task == "instance_segmentation":
        order.append("mask")
    elif "mask" in parts:
        raise UsageError("detection task must not produce a mask loss term")
    total = None
    breakdown = {}
    for name in order:
        if name not in parts:
            continue
        term = parts[name]
        breakdown[name] = float(term.item())
        total = term if total is None else total + term
    return total, breakdown


# ---------------------------------------------------------------- mask paste
def paste_mask(grid: np.ndarray, box: tuple[float, float, float, float],
               image_size: tuple[int, int], threshold: float = 0.5) -> np.ndarray:
    """Bilinear-resize a per-RoI probability grid into its box, binarize."""
    height, width = image_size
    gh, gw = grid.shape
    x1, y1, x2, y2 = box
    out = np.zeros((height, width), dtype=bool)
    px1 = int(np.clip(np.floor(x1), 0, width))
    px2 = int(np.clip(np.ceil(x2), 0, width))
    py1 = int(np.clip(np.floor(y1), 0, height))
    py2 = int(np.clip(np.ceil(y2), 0, height))
    if px2 <= px1 or py2 <= py1:
        return out
    xs = (np.arange(px1, px2) + 0.5 - x1) / max(x2 - x1, 1e-6) * gw - 0.5
    ys = (np.arange(py1, py2) + 0.5 - y1) / max(y2 - y1, 1e-6) * gh - 0.5
    xs = np.clip(xs, 0, gw - 1)
    ys = np.clip(ys, 0, gh - 1)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1i = np.minimum(x0 + 1, gw - 1)
    y1i = np.minimum(y0 + 1, gh - 1)
    wx = xs - x0
    wy = ys - y0
    vals = (
        grid[np.ix_(y0, x0)] * np.outer(1 - wy, 1 - wx)
        + grid[np.ix_(y0, x1i)] * np.outer(1 - wy, wx)
        + grid[np.ix_(y1i, x0)] * np.outer(wy, 1 - wx)
        + grid[np.ix_(y1i, x1i)] * np.outer(wy, wx)
    )
    out[py1:py2, px1:px2] = vals >= threshold
    return out
