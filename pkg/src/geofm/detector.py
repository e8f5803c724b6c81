"""Full detection/instance-segmentation model assembly, training step, and
inference.

A backbone (transformer with global or windowed attention, or the small
hierarchical conv net) feeds a multi-scale construction (generated pyramid,
FPN, or a projected single-scale map); the RPN proposes regions over
per-level anchors, RoI Align cuts fixed-size patches, and the box branch
(plus the mask branch, for instance segmentation only) produces the final
detections.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .bands import (
    CHANNEL_DUPLICATION,
    NATIVE,
    RETRAINED_PATCH_EMBED,
    ZERO_PADDED,
    PatchEmbedLayer,
    adapt_input,
)
from .checkpoint import load_checkpoint, load_into
from .encoder import (
    GLOBAL_ATTENTION,
    WINDOWED_ATTENTION,
    Conv2dLayer,
    ConvBackbone,
    ConvBackboneConfig,
    EncoderConfig,
    ViTEncoder,
)
from .errors import ConfigError, NumericError, UsageError
from .heads import (
    AnchorConfig,
    BoxHead,
    MaskHead,
    RPNHead,
    assign_pyramid_levels,
    assign_targets_head,
    assign_targets_rpn,
    decode_boxes,
    encode_boxes,
    generate_anchors,
    nms,
    paste_mask,
    roi_align,
    sample_balanced,
    task_losses,
)
from .module import Module
from .optim import AdamW
from .pyramid import FPN, SingleScalePyramidGenerator
from .records import Detection, InstanceAnnotation
from .rng import Rng
from .tensor import Tensor

TASK_DETECTION = "detection"
TASK_INSTANCE_SEG = "instance_segmentation"

BACKBONE_GFM = "gfm_global_attn"
BACKBONE_VIT_WINDOWED = "vit_windowed"
BACKBONE_CONV = "conv_hierarchical"

PYRAMID_SINGLE = "single_scale"
PYRAMID_GENERATED = "generated_random_init"
PYRAMID_GENERATED_PRETRAINED = "generated_pretrained"
PYRAMID_FPN = "fpn"

TRANSFORMER_BACKBONES = (BACKBONE_GFM, BACKBONE_VIT_WINDOWED)

PAIRING_RULE = (
    "hierarchical conv backbones pair with FPN while single-scale transformer "
    "backbones pair with the generated pyramid"
)


@dataclass
class DetectorConfig:
    task: str = TASK_DETECTION
    backbone: str = BACKBONE_GFM
    adaptation: str = NATIVE
    pyramid: str = PYRAMID_GENERATED
    data_bands: int = 6
    num_classes: int = 2
    image_size: int = 64
    patch: int = 4
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    window_size: int = 2
    mlp_ratio: float = 2.0
    fpn_channels: int = 64
    conv_widths: tuple[int, int, int, int] = (32, 64, 96, 128)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    anchor_scale: float = 4.0
    rpn_pre_nms: int = 256
    rpn_post_nms: int = 64
    rpn_nms_threshold: float = 0.7
    rpn_batch: int = 64
    rpn_pos_fraction: float = 0.5
    roi_batch: int = 32
    roi_pos_fraction: float = 0.25
    mask_roi_cap: int = 16
    score_threshold: float = 0.05
    detections_per_image: int = 100
    test_nms_threshold: float = 0.5
    add_gt_proposals: bool = True
    input_mean: float = 0.3
    input_std: float = 0.3

    def validate(self) -> list[str]:
        problems = []
        if self.task not in (TASK_DETECTION, TASK_INSTANCE_SEG):
            problems.append(f"task: unknown task {self.task!r}")
        if self.backbone not in TRANSFORMER_BACKBONES + (BACKBONE_CONV,):
            problems.append(f"backbone: unknown backbone {self.backbone!r}")
        if self.pyramid not in (PYRAMID_SINGLE, PYRAMID_GENERATED, PYRAMID_GENERATED_PRETRAINED, PYRAMID_FPN):
            problems.append(f"pyramid: unknown pyramid mode {self.pyramid!r}")
        if self.pyramid == PYRAMID_FPN and self.backbone != BACKBONE_CONV:
            problems.append(f"pyramid: fpn requires the conv_hierarchical backbone ({PAIRING_RULE})")
        if self.pyramid in (PYRAMID_SINGLE, PYRAMID_GENERATED, PYRAMID_GENERATED_PRETRAINED) and self.backbone == BACKBONE_CONV:
            problems.append(f"pyramid: {self.pyramid} requires a single-scale transformer backbone ({PAIRING_RULE})")
        if self.adaptation in (ZERO_PADDED, CHANNEL_DUPLICATION) and self.data_bands != 3:
            problems.append(f"adaptation: {self.adaptation} expects 3-band data, got {self.data_bands}")
        if self.adaptation not in (NATIVE, ZERO_PADDED, CHANNEL_DUPLICATION, RETRAINED_PATCH_EMBED):
            problems.append(f"adaptation: unknown strategy {self.adaptation!r}")
        if self.image_size % 32:
            problems.append(f"image_size: {self.image_size} is not divisible by 32")
        if self.embed_dim % self.heads:
            problems.append(f"embed_dim: {self.embed_dim} not divisible by heads {self.heads}")
        return problems

    def require_valid(self) -> "DetectorConfig":
        problems = self.validate()
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    @property
    def embed_bands(self) -> int:
        if self.adaptation in (ZERO_PADDED, CHANNEL_DUPLICATION):
            return 6
        return self.data_bands


class Detector(Module):
    def __init__(self, config: DetectorConfig, rng: Rng):
        super().__init__()
        config.require_valid()
        self.cfg = config
        F = config.fpn_channels
        if config.backbone in TRANSFORMER_BACKBONES:
            self.embed = PatchEmbedLayer(in_bands=config.embed_bands, patch=(1, config.patch, config.patch),
                                         embed_dim=config.embed_dim, rng=rng.child("embed"))
            attention = GLOBAL_ATTENTION if config.backbone == BACKBONE_GFM else WINDOWED_ATTENTION
            self.encoder = ViTEncoder(
                EncoderConfig(depth=config.depth, heads=config.heads, embed_dim=config.embed_dim,
                              mlp_ratio=config.mlp_ratio, attention=attention,
                              window_size=config.window_size),
                rng.child("encoder"),
            )
            if config.pyramid == PYRAMID_SINGLE:
                self.single_proj = Conv2dLayer(config.embed_dim, F, 1, rng.child("single_proj"), padding=0)
            else:
                self.pyramid = SingleScalePyramidGenerator(config.embed_dim, F, rng.child("pyramid"),
                                                           source_stride=config.patch)
        else:
            self.backbone_net = ConvBackbone(
                ConvBackboneConfig(in_bands=config.data_bands, widths=config.conv_widths),
                rng.child("backbone"),
            )
            self.pyramid = FPN(self.backbone_net.out_channels, F, rng.child("pyramid"))
        self.rpn = RPNHead(F, len(config.anchor_ratios), rng.child("rpn"))
        self.box_head = BoxHead(F * 7 * 7, config.num_classes, rng.child("box_head"))
        if config.task == TASK_INSTANCE_SEG:
            self.mask_head = MaskHead(F, config.num_classes, rng.child("mask_head"))
        self._anchor_cfg = AnchorConfig(ratios=config.anchor_ratios, scale=config.anchor_scale)

    # ------------------------------------------------------------- plumbing
    def backbone_parameter_names(self) -> list[str]:
        names = []
        for name in self.named_parameters():
            if name.startswith(("embed.", "encoder.", "backbone_net.")):
                names.append(name)
        return names

    def _prepare_input(self, raster: np.ndarray) -> np.ndarray:
        x = np.asarray(raster, dtype=np.float32)
        if x.ndim == 3:
            x = x[:, None]
        if x.shape[0] != self.cfg.data_bands:
            raise UsageError(
                f"detector configured for {self.cfg.data_bands}-band data, got {x.shape[0]} bands"
            )
        # standardize first so zero-padded bands stay exact zeros in model space
        x = (x - self.cfg.input_mean) / self.cfg.input_std
        if self.cfg.backbone in TRANSFORMER_BACKBONES:
            return adapt_input(x, self.cfg.adaptation if self.cfg.adaptation != RETRAINED_PATCH_EMBED else NATIVE)
        return x

    def features(self, raster: np.ndarray) -> dict[int, Tensor]:
        x = self._prepare_input(raster)
        cfg = self.cfg
        if cfg.backbone in TRANSFORMER_BACKBONES:
            fmap = self.encoder.encode(x, self.embed)
            if cfg.pyramid == PYRAMID_SINGLE:
                out = self.single_proj(fmap.reshape((1,) + fmap.shape))
                return {cfg.patch: out.reshape(out.shape[1:])}
            return self.pyramid(fmap).levels
        maps = self.backbone_net(x)
        return self.pyramid(maps).levels

    def _anchors(self, levels: dict[int, Tensor]) -> tuple[np.ndarray, dict[int, np.ndarray]]:
        shapes = {s: (m.shape[1], m.shape[2]) for s, m in levels.items()}
        per_level = generate_anchors(shapes, self._anchor_cfg)
        stacked = np.concatenate([per_level[s] for s in sorted(per_level)], axis=0)
        return stacked, per_level

    def _proposals(self, anchors: np.ndarray, logits: np.ndarray, deltas: np.ndarray,
                   gt_boxes: np.ndarray | None = None) -> np.ndarray:
        cfg = self.cfg
        k = min(cfg.rpn_pre_nms, len(logits))
        top = np.argpartition(-logits, k - 1)[:k] if k < len(logits) else np.arange(len(logits))
        top = top[np.argsort(-logits[top], kind="stable")]
        boxes = decode_boxes(anchors[top], deltas[top], image_size=(cfg.image_size, cfg.image_size))
        wide = (boxes[:, 2] - boxes[:, 0] >= 1.0) & (boxes[:, 3] - boxes[:, 1] >= 1.0)
        boxes = boxes[wide]
        scores = logits[top][wide]
        keep = nms(boxes, scores, cfg.rpn_nms_threshold)[: cfg.rpn_post_nms]
        proposals = boxes[keep]
        if gt_boxes is not None and cfg.add_gt_proposals and len(gt_boxes):
            proposals = np.concatenate([proposals, gt_boxes.astype(np.float32)], axis=0)
        return proposals

    def _roi_features(self, levels: dict[int, Tensor], boxes: np.ndarray, out_size: int) -> Tensor:
        strides = assign_pyramid_levels(boxes, list(levels), canonical_size=float(self.cfg.image_size))
        pieces = []
        order = []
        for s in sorted(levels):
            idx = np.nonzero(strides == s)[0]
            if len(idx) == 0:
                continue
            pieces.append(roi_align(levels[s], boxes[idx], s, out_size))
            order.extend(idx.tolist())
        feats = T.concat(pieces, axis=0) if len(pieces) > 1 else pieces[0]
        inverse = np.argsort(np.asarray(order))
        return T.take(feats, inverse, axis=0)

    # ------------------------------------------------------------- training
    def loss_parts(self, raster: np.ndarray, annotations: list[InstanceAnnotation],
                   rng: Rng) -> dict[str, Tensor]:
        cfg = self.cfg
        gt_boxes = np.array([ann.box for ann in annotations], dtype=np.float32).reshape(-1, 4)
        gt_classes = np.array([ann.class_id for ann in annotations], dtype=np.int64)
        levels = self.features(raster)
        anchors, _ = self._anchors(levels)
        rpn_logits, rpn_deltas = self.rpn(levels)

        labels, matched = assign_targets_rpn(anchors, gt_boxes)
        sampled = sample_balanced(labels, cfg.rpn_batch, cfg.rpn_pos_fraction, rng.child("rpn_sample"))
        parts: dict[str, Tensor] = {}
        n_sampled = max(len(sampled), 1)
        if len(sampled):
            parts["rpn_objectness"] = T.bce_with_logits(
                T.take(rpn_logits, sampled, axis=0), labels[sampled].astype(np.float32), reduction="mean"
            )
        else:
            parts["rpn_objectness"] = T.zeros(())
        pos = sampled[labels[sampled] == 1]
        if len(pos):
            target = encode_boxes(anchors[pos], gt_boxes[matched[pos]])
            parts["rpn_box"] = T.smooth_l1(T.take(rpn_deltas, pos, axis=0), target, reduction="sum") * (
                1.0 / n_sampled
            )
        else:
            parts["rpn_box"] = T.zeros(())

        proposals = self._proposals(anchors, rpn_logits.data, rpn_deltas.data, gt_boxes)
        h_labels, h_matched = assign_targets_head(proposals, gt_boxes, gt_classes)
        h_sampled = sample_balanced(h_labels, cfg.roi_batch, cfg.roi_pos_fraction, rng.child("roi_sample"))
        if len(h_sampled) == 0:
            parts["cls"] = T.zeros(())
            parts["box"] = T.zeros(())
            return parts
        rois = proposals[h_sampled]
        roi_feats = self._roi_features(levels, rois, 7)
        cls_logits, box_deltas = self.box_head(roi_feats)
        parts["cls"] = T.cross_entropy(cls_logits, h_labels[h_sampled])
        pos_local = np.nonzero(h_labels[h_sampled] > 0)[0]
        if len(pos_local):
            pos_rois = rois[pos_local]
            pos_gt = gt_boxes[h_matched[h_sampled][pos_local]]
            target = encode_boxes(pos_rois, pos_gt)
            parts["box"] = T.smooth_l1(
                T.take(box_deltas, pos_local, axis=0), target, reduction="sum"
            ) * (1.0 / len(h_sampled))
        else:
            parts["box"] = T.zeros(())

        if cfg.task == TASK_INSTANCE_SEG:
            if len(pos_local):
                cap = pos_local[: cfg.mask_roi_cap]
                mask_rois = rois[cap]
                mask_gt_idx = h_matched[h_sampled][cap]
                mask_classes = h_labels[h_sampled][cap] - 1
                mask_feats = self._roi_features(levels, mask_rois, 14)
                mask_logits = self.mask_head(mask_feats)  # (R, K, 28, 28)
                targets = np.stack(
                    [
                        _mask_target(annotations[g].mask, roi, 28)
                        for g, roi in zip(mask_gt_idx, mask_rois)
                    ]
                )
                picked = T.take(
                    mask_logits.reshape(len(cap) * cfg.num_classes, 28, 28),
                    np.arange(len(cap)) * cfg.num_classes + mask_classes,
                    axis=0,
                )
                parts["mask"] = T.bce_with_logits(picked, targets, reduction="mean")
            else:
                parts["mask"] = T.zeros(())
        return parts

    def train_step(self, raster: np.ndarray, annotations: list[InstanceAnnotation],
                   optimizer: AdamW, rng: Rng) -> dict[str, float]:
        parts = self.loss_parts(raster, annotations, rng)
        total, breakdown = task_losses(parts, self.cfg.task)
        value = float(total.item())
        if not np.isfinite(value):
            raise NumericError(f"training loss is non-finite: {breakdown}")
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        breakdown["total"] = value
        return breakdown

    # ------------------------------------------------------------ inference
    def predict(self, raster: np.ndarray) -> list[Detection]:
        cfg = self.cfg
        with T.no_grad():
            levels = self.features(raster)
            anchors, _ = self._anchors(levels)
            rpn_logits, rpn_deltas = self.rpn(levels)
            proposals = self._proposals(anchors, rpn_logits.data, rpn_deltas.data)
            if len(proposals) == 0:
                return []
            roi_feats = self._roi_features(levels, proposals, 7)
            cls_logits, box_deltas = self.box_head(roi_feats)
            probs = T.softmax(cls_logits).data
            boxes = decode_boxes(proposals, box_deltas.data, image_size=(cfg.image_size, cfg.image_size))

            picked: list[tuple[float, int, np.ndarray, int]] = []
            for cls in range(cfg.num_classes):
                scores = probs[:, cls + 1]
                keep = scores >= cfg.score_threshold
                if not keep.any():
                    continue
                cand_boxes = boxes[keep]
                cand_scores = scores[keep]
                valid = (cand_boxes[:, 2] - cand_boxes[:, 0] >= 1.0) & (
                    cand_boxes[:, 3] - cand_boxes[:, 1] >= 1.0
                )
                cand_boxes = cand_boxes[valid]
                cand_scores = cand_scores[valid]
                if len(cand_boxes) == 0:
                    continue
                for idx in nms(cand_boxes, cand_scores, cfg.test_nms_threshold):
                    picked.append((float(cand_scores[idx]), cls, cand_boxes[idx], len(picked)))
            picked.sort(key=lambda item: (-item[0], item[3]))
            picked = picked[: cfg.detections_per_image]
            if not picked:
                return []

            detections = []
            if cfg.task == TASK_INSTANCE_SEG:
                final_boxes = np.stack([box for _, _, box, _ in picked])
                mask_feats = self._roi_features(levels, final_boxes, 14)
                mask_logits = self.mask_head(mask_feats)
                mask_probs = T.sigmoid(mask_logits).data
            for rank, (score, cls, box, _) in enumerate(picked):
                mask = None
                if cfg.task == TASK_INSTANCE_SEG:
                    mask = paste_mask(mask_probs[rank, cls], tuple(box),
                                      (cfg.image_size, cfg.image_size))
                detections.append(
                    Detection(box=tuple(float(v) for v in box), score=min(score, 1.0),
                              class_id=cls, mask=mask)
                )
            return detections


def _mask_target(gt_mask: np.ndarray, roi: np.ndarray, out: int) -> np.ndarray:
    """Nearest-sample the ground-truth mask on an out x out grid inside the RoI."""
    H, W = gt_mask.shape
    x1, y1, x2, y2 = roi
    xs = np.clip((x1 + (np.arange(out) + 0.5) * (x2 - x1) / out).astype(np.int64), 0, W - 1)
    ys = np.clip((y1 + (np.arange(out) + 0.5) * (y2 - y1) / out).astype(np.int64), 0, H - 1)
    return gt_mask[np.ix_(ys, xs)].astype(np.float32)


# ---------------------------------------------------------------- train loop
@dataclass
class TrainResult:
    loss_curve: list[float]
    seconds_per_iteration: float
    seed: int


def train_detector(detector: Detector, scenes: list, seed: int, epochs: int, lr: float = 1e-3,
                   weight_decay: float = 1e-4, trainable_names: list[str] | None = None) -> TrainResult:
    """Seeded epochs over (raster, annotations) pairs with AdamW.

    `trainable_names` restricts the optimizer (e.g. to non-backbone
    parameters when the backbone is frozen); excluded tensors are never
    touched.
    """
    import time

    if not scenes:
        raise UsageError("training needs a non-empty dataset")
    params = detector.named_parameters()
    if trainable_names is not None:
        params = {n: p for n, p in params.items() if n in set(trainable_names)}
    opt = AdamW(params, lr=lr, weight_decay=weight_decay)
    root = Rng(seed, ("finetune",))
    losses = []
    steps = 0
    t0 = time.perf_counter()
    for epoch in range(epochs):
        order = root.child(f"epoch{epoch}").permutation(len(scenes))
        total = 0.0
        for i, idx in enumerate(order):
            raster, anns = scenes[idx]
            breakdown = detector.train_step(raster, anns, opt, root.child(f"epoch{epoch}/step{i}"))
            total += breakdown["total"]
            steps += 1
        losses.append(total / len(order))
    per_step = (time.perf_counter() - t0) / max(steps, 1)
    return TrainResult(loss_curve=losses, seconds_per_iteration=per_step, seed=seed)


def load_backbone_from_checkpoint(detector: Detector, checkpoint_dir) -> dict:
    """Load pretrained embed/encoder weights into the detector's backbone.

    Under the retrained-patch-embed strategy the checkpoint kernel has a
    different band count: the fresh kernel keeps its initialization and
    only the bias (plus the encoder) is loaded.
    """
    loaded = load_checkpoint(checkpoint_dir)
    params = detector.named_parameters()
    subset = {}
    for name, value in loaded.items():
        if not name.startswith(("embed.", "encoder.")):
            continue
        if name not in params:
            continue
        if tuple(params[name].data.shape) != tuple(value.shape):
            if name == "embed.kernel" and detector.cfg.adaptation == RETRAINED_PATCH_EMBED:
                continue
            raise ConfigError(
                f"checkpoint tensor {name} has shape {tuple(value.shape)}, "
                f"detector expects {tuple(params[name].data.shape)}"
            )
        subset[name] = value
    return load_into(params, subset, strict=False)
