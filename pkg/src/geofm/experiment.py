"""Experiment configuration, run orchestration, and report emission.

One ExperimentConfig describes a complete run: the task, backbone,
adaptation strategy, pyramid mode, dataset (generated or loaded from
manifests), schedule, and seeds. Ablations execute the cartesian set of
one axis' values against every seed and emit a table shaped like the
corresponding study: band-adaptation rows, pyramid-mode rows, resolution
columns with percent-change formatting, or training-fraction rows.

Determinism contract: metrics.csv, loss_curve.csv, and ablation tables are
byte-identical for identical (config, seed); wall-clock timings live only
in report.json.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bands import CHANNEL_DUPLICATION, NATIVE, RETRAINED_PATCH_EMBED, ZERO_PADDED
from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .data import (
    DEGRADE_FACTORS,
    TRAIN_FRACTIONS,
    SceneConfig,
    degrade_annotations,
    degrade_resolution,
    expand_to_canvas,
    load_dataset,
    subsample_split,
    synth_scene,
    write_dataset,
)
from .detector import (
    BACKBONE_CONV,
    PYRAMID_GENERATED_PRETRAINED,
    TASK_DETECTION,
    TASK_INSTANCE_SEG,
    Detector,
    DetectorConfig,
    load_backbone_from_checkpoint,
    train_detector,
)
from .errors import ConfigError, GeofmError, UsageError
from .mae import MAEConfig, pretrain_loop
from .metrics import COCO_THRESHOLDS, EvalConfig, evaluate
from .pyramid import load_pretrained_pyramid
from .rng import Rng

BAND_STRATEGIES = (ZERO_PADDED, CHANNEL_DUPLICATION, RETRAINED_PATCH_EMBED)
PYRAMID_MODES_AXIS = ("single_scale", "generated_random_init", "generated_pretrained")
ABLATION_AXES = ("bands", "pyramid", "resolution", "fraction")

METRIC_KEYS = ("mAP50", "mAP", "mAP_S", "mAP_M", "mAP_L")


# ------------------------------------------------------------------- config
@dataclass
class DataSpec:
    train_manifest: str | None = None
    test_manifest: str | None = None
    bands: int = 6
    image_size: int = 64
    n_classes: int = 2
    count_range: tuple[int, int] = (2, 4)
    size_range: tuple[int, int] = (8, 24)
    noise_std: float = 0.05
    generator_seed: int = 100
    n_train: int = 200
    n_test: int = 50
    signatures: list | None = None
    background: list | None = None


@dataclass
class ModelSpec:
    patch: int = 4
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    window_size: int = 2
    mlp_ratio: float = 2.0
    fpn_channels: int = 64
    conv_widths: tuple[int, int, int, int] = (32, 64, 96, 128)
    anchor_scale: float = 4.0
    input_mean: float = 0.3
    input_std: float = 0.3


@dataclass
class MaeSpec:
    mask_ratio: float = 0.75
    decoder_dim: int = 32
    decoder_depth: int = 2
    epochs: int = 20
    lr: float = 1e-3


@dataclass
class ExperimentConfig:
    task: str = TASK_DETECTION
    backbone: str = "gfm_global_attn"
    adaptation: str = NATIVE
    pyramid: str = "generated_random_init"
    freeze_backbone: bool = False
    resolution_factor: int = 1
    train_fraction: float = 1.0
    seeds: tuple[int, ...] = (0,)
    epochs: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    subsample_seed: int = 0
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    mae: MaeSpec = field(default_factory=MaeSpec)
    backbone_checkpoint: str | None = None
    pyramid_checkpoint: str | None = None

    def validate(self) -> list[str]:
        """Field-path-tagged problems; empty list means valid."""
        problems = []
        if self.resolution_factor not in (1,) + DEGRADE_FACTORS:
            problems.append(f"resolution_factor: must be one of (1, 2, 4, 8), got {self.resolution_factor}")
        if self.train_fraction not in TRAIN_FRACTIONS:
            problems.append(f"train_fraction: must be one of {TRAIN_FRACTIONS}, got {self.train_fraction}")
        if not self.seeds:
            problems.append("seeds: at least one seed is required")
        if self.epochs < 1:
            problems.append(f"epochs: must be >= 1, got {self.epochs}")
        if not 0.0 <= self.mae.mask_ratio < 1.0:
            problems.append(f"mae.mask_ratio: must be in [0, 1), got {self.mae.mask_ratio}")
        if self.freeze_backbone and not self.backbone_checkpoint:
            problems.append("backbone_checkpoint: required when freeze_backbone is set")
        if self.pyramid == PYRAMID_GENERATED_PRETRAINED and not self.pyramid_checkpoint:
            problems.append("pyramid_checkpoint: required for the generated_pretrained pyramid")
        if self.data.bands not in (3, 6):
            problems.append(f"data.bands: must be 3 or 6, got {self.data.bands}")
        for problem in self.detector_config().validate():
            problems.append(problem)
        return problems

    def require_valid(self) -> "ExperimentConfig":
        problems = self.validate()
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def detector_config(self) -> DetectorConfig:
        m = self.model
        return DetectorConfig(
            task=self.task,
            backbone=self.backbone,
            adaptation=self.adaptation,
            pyramid=self.pyramid,
            data_bands=self.data.bands,
            num_classes=self.data.n_classes,
            image_size=self.data.image_size,
            patch=m.patch,
            embed_dim=m.embed_dim,
            depth=m.depth,
            heads=m.heads,
            window_size=m.window_size,
            mlp_ratio=m.mlp_ratio,
            fpn_channels=m.fpn_channels,
            conv_widths=tuple(m.conv_widths),
            anchor_scale=m.anchor_scale,
            input_mean=m.input_mean,
            input_std=m.input_std,
        )

    def mae_config(self) -> MAEConfig:
        m = self.model
        return MAEConfig(
            in_bands=6 if self.adaptation in (ZERO_PADDED, CHANNEL_DUPLICATION) else self.data.bands,
            patch=(1, m.patch, m.patch),
            embed_dim=m.embed_dim,
            depth=m.depth,
            heads=m.heads,
            decoder_dim=self.mae.decoder_dim,
            decoder_depth=self.mae.decoder_depth,
            mask_ratio=self.mae.mask_ratio,
            mlp_ratio=m.mlp_ratio,
            adaptation=self.adaptation,
            input_mean=m.input_mean,
            input_std=m.input_std,
        )

    def scene_config(self) -> SceneConfig:
        d = self.data
        return SceneConfig(
            bands=d.bands,
            image_size=d.image_size,
            n_classes=d.n_classes,
            count_range=tuple(d.count_range),
            size_range=tuple(d.size_range),
            noise_std=d.noise_std,
            seed=d.generator_seed,
            signatures=d.signatures,
            background=d.background,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def config_from_dict(raw: dict) -> ExperimentConfig:
    def build(cls, payload, path):
        if not isinstance(payload, dict):
            raise ConfigError(f"{path or 'config'}: expected an object, got {type(payload).__name__}")
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(payload) - set(known)
        if unknown:
            raise ConfigError(f"{path or 'config'}: unknown fields {sorted(unknown)}")
        kwargs = {}
        for name, value in payload.items():
            f = known[name]
            sub = {"data": DataSpec, "model": ModelSpec, "mae": MaeSpec}.get(name)
            if sub is not None:
                kwargs[name] = build(sub, value, f"{path}{name}." if path else f"{name}.")
            elif isinstance(value, list) and name in ("seeds", "count_range", "size_range", "conv_widths"):
                kwargs[name] = tuple(value)
            else:
                kwargs[name] = value
        return cls(**kwargs)

    return build(ExperimentConfig, raw, "")


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply `dotted.path=json_value` strings onto a config dict."""
    out = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form path=value")
        path, value = item.split("=", 1)
        keys = path.split(".")
        node = out
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {path!r} crosses a non-object at {key!r}")
        try:
            node[keys[-1]] = json.loads(value)
        except json.JSONDecodeError:
            node[keys[-1]] = value
    return out


def config_hash(cfg: ExperimentConfig | dict) -> str:
    raw = cfg.to_dict() if isinstance(cfg, ExperimentConfig) else cfg
    return hashlib.sha256(json.dumps(raw, sort_keys=True).encode()).hexdigest()[:16]


# ------------------------------------------------------------------ datasets
def build_datasets(cfg: ExperimentConfig, seed: int):
    """(train, test) lists of (raster, annotations).

    Generated in memory unless manifests are configured. The training
    fraction keeps a nested seeded prefix; a resolution factor > 1
    degrades both splits and re-expands them to the original canvas.
    """
    d = cfg.data
    if d.train_manifest:
        train, _ = load_dataset(d.train_manifest)
        test, _ = load_dataset(d.test_manifest) if d.test_manifest else ([], None)
    else:
        scene_cfg = cfg.scene_config()
        train = [synth_scene(scene_cfg, i) for i in range(d.n_train)]
        test = [synth_scene(scene_cfg, 10_000 + i) for i in range(d.n_test)]
    if cfg.train_fraction < 1.0:
        names = list(range(len(train)))
        picked = subsample_split([str(i) for i in names], cfg.train_fraction, cfg.subsample_seed)
        train = [train[int(i)] for i in picked]
    if cfg.resolution_factor > 1:
        train = [apply_resolution(r, a, cfg.resolution_factor) for r, a in train]
        test = [apply_resolution(r, a, cfg.resolution_factor) for r, a in test]
    return train, test


def apply_resolution(raster, annotations, factor: int):
    """Degrade to 1/factor resolution, then re-expand to the original
    canvas (coarser ground sampling at a fixed model input size)."""
    down = degrade_resolution(raster, factor)
    down_anns = degrade_annotations(annotations, factor)
    return expand_to_canvas(down, down_anns, factor)


# ----------------------------------------------------------------- reporting
@dataclass
class RunReport:
    config_hash: str
    seed: int
    metrics: dict
    loss_curve: list[float]
    timing: dict
    provenance: dict


def _metrics_rows(config_digest: str, seed: int, metrics: dict) -> list[str]:
    rows = []
    for kind in sorted(metrics):
        for key in METRIC_KEYS:
            value = metrics[kind][key]
            rows.append(
                f"{config_digest},{seed},{kind},{key},{'N/A' if value is None else f'{value:.6f}'}"
            )
    return rows


def write_run_report(out_dir: Path, report: RunReport) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["config_hash,seed,kind,metric,value"]
    lines += _metrics_rows(report.config_hash, report.seed, report.metrics)
    (out_dir / "metrics.csv").write_text("\n".join(lines) + "\n")
    md = ["| kind | " + " | ".join(METRIC_KEYS) + " |", "|" + "---|" * (len(METRIC_KEYS) + 1)]
    for kind in sorted(report.metrics):
        cells = [
            "N/A" if report.metrics[kind][k] is None else f"{report.metrics[kind][k]:.4f}"
            for k in METRIC_KEYS
        ]
        md.append(f"| {kind} | " + " | ".join(cells) + " |")
    (out_dir / "metrics.md").write_text("\n".join(md) + "\n")
    curve = ["config_hash,seed,epoch,loss"]
    curve += [
        f"{report.config_hash},{report.seed},{e},{v:.8f}" for e, v in enumerate(report.loss_curve)
    ]
    (out_dir / "loss_curve.csv").write_text("\n".join(curve) + "\n")
    payload = dataclasses.asdict(report)
    (out_dir / "report.json").write_text(json.dumps(payload, indent=1))


def _provenance(cfg: ExperimentConfig, seed: int) -> dict:
    return {
        "package_version": __version__,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "seeds": list(cfg.seeds),
    }


# ----------------------------------------------------------------- pretrain
def run_pretrain(cfg: ExperimentConfig, seed: int, out_dir) -> RunReport:
    cfg.require_valid()
    out_dir = Path(out_dir)
    train, _ = build_datasets(cfg, seed)
    scenes = [raster for raster, _ in train]
    model, result = pretrain_loop(scenes, cfg.mae_config(), seed=seed,
                                  epochs=cfg.mae.epochs, lr=cfg.mae.lr)
    save_checkpoint(out_dir / "checkpoint", model.named_parameters())
    report = RunReport(
        config_hash=config_hash(cfg),
        seed=seed,
        metrics={"pretrain": dict.fromkeys(METRIC_KEYS)},
        loss_curve=result.epoch_losses,
        timing={"train_seconds_per_iteration": result.seconds_per_step},
        provenance=_provenance(cfg, seed),
    )
    write_run_report(out_dir, report)
    return report


# ----------------------------------------------------------------- finetune
def evaluate_detector(detector: Detector, test_scenes, workers: int = 1) -> tuple[dict, float]:
    """(metrics-by-kind, inference seconds per image) on (raster, anns) pairs."""
    gts_by_image = {f"img{i:04d}": anns for i, (_, anns) in enumerate(test_scenes)}
    t0 = time.perf_counter()
    if workers <= 1:
        preds = [detector.predict(raster) for raster, _ in test_scenes]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = list(pool.map(lambda pair: detector.predict(pair[0]), test_scenes))
    seconds = (time.perf_counter() - t0) / max(len(test_scenes), 1)
    dets_by_image = {f"img{i:04d}": dets for i, dets in enumerate(preds)}
    metrics = {"box": evaluate(dets_by_image, gts_by_image, EvalConfig(iou_kind="box"))}
    if detector.cfg.task == TASK_INSTANCE_SEG:
        metrics["mask"] = evaluate(dets_by_image, gts_by_image, EvalConfig(iou_kind="mask"))
    return metrics, seconds


def run_finetune(cfg: ExperimentConfig, seed: int, out_dir) -> RunReport:
    cfg.require_valid()
    out_dir = Path(out_dir)
    train, test = build_datasets(cfg, seed)
    detector = Detector(cfg.detector_config(), Rng(seed, ("detector_init",)))
    if cfg.backbone_checkpoint:
        load_backbone_from_checkpoint(detector, cfg.backbone_checkpoint)
    if cfg.pyramid == PYRAMID_GENERATED_PRETRAINED:
        load_pretrained_pyramid(detector.pyramid, cfg.pyramid_checkpoint, strict=False,
                                prefix="pyramid.")
    trainable = None
    frozen_names: list[str] = []
    if cfg.freeze_backbone:
        frozen_names = detector.backbone_parameter_names()
        trainable = [n for n in detector.named_parameters() if n not in set(frozen_names)]
    frozen_before = {n: detector.named_parameters()[n].data.copy() for n in frozen_names}
    result = train_detector(detector, train, seed=seed, epochs=cfg.epochs, lr=cfg.lr,
                            weight_decay=cfg.weight_decay, trainable_names=trainable)
    frozen_ok = all(
        np.array_equal(frozen_before[n], detector.named_parameters()[n].data) for n in frozen_names
    )
    metrics, sec_per_image = evaluate_detector(detector, test)
    save_checkpoint(out_dir / "checkpoint", detector.named_parameters())
    (out_dir / "checkpoint" / "detector_config.json").write_text(
        json.dumps(dataclasses.asdict(cfg.detector_config()), indent=1)
    )
    provenance = _provenance(cfg, seed)
    if cfg.freeze_backbone:
        provenance["frozen_backbone_bit_identical"] = frozen_ok
    report = RunReport(
        config_hash=config_hash(cfg),
        seed=seed,
        metrics=metrics,
        loss_curve=result.loss_curve,
        timing={
            "train_seconds_per_iteration": result.seconds_per_iteration,
            "inference_seconds_per_image": sec_per_image,
        },
        provenance=provenance,
    )
    write_run_report(out_dir, report)
    return report


def load_detector_checkpoint(checkpoint_dir) -> Detector:
    checkpoint_dir = Path(checkpoint_dir)
    config_path = checkpoint_dir / "detector_config.json"
    if not config_path.exists():
        raise UsageError(f"checkpoint {checkpoint_dir} lacks detector_config.json")
    det_cfg = DetectorConfig(**{
        k: tuple(v) if isinstance(v, list) else v
        for k, v in json.loads(config_path.read_text()).items()
    })
    detector = Detector(det_cfg, Rng(0, ("load",)))
    load_into(detector.named_parameters(), load_checkpoint(checkpoint_dir), strict=True)
    return detector


# ------------------------------------------------------------------ ablation
def _percent_delta(value: float | None, base: float | None) -> str:
    if value is None or base is None or base == 0:
        return "N/A"
    return f"{(value - base) / base * 100:+.2f}%"


def run_ablation(cfg: ExperimentConfig, axis: str, out_dir) -> dict:
    """Cartesian sweep of one axis against cfg.seeds.

    Returns {"axis", "rows": [{value, per_seed, mean, failed}], ...} and
    writes ablation.csv / ablation.md. Per-run failures mark the cell
    FAILED and are reported, not raised.
    """
    if axis not in ABLATION_AXES:
        raise ConfigError(f"axis: must be one of {ABLATION_AXES}, got {axis!r}")
    cfg.require_valid()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if axis == "bands":
        values = list(BAND_STRATEGIES)
        runner = _ablate_value_bands
    elif axis == "pyramid":
        values = [m for m in PYRAMID_MODES_AXIS if m != PYRAMID_GENERATED_PRETRAINED or cfg.pyramid_checkpoint]
        runner = _ablate_value_pyramid
    elif axis == "resolution":
        values = [1] + list(DEGRADE_FACTORS)
        runner = None  # handled specially: train once per seed, evaluate per factor
    else:
        values = list(TRAIN_FRACTIONS)
        runner = _ablate_value_fraction

    rows: list[dict] = []
    failures = 0
    if axis == "resolution":
        per_seed_maps: dict[int, dict[int, float | None]] = {}
        for seed in cfg.seeds:
            try:
                per_seed_maps[seed] = _resolution_sweep(cfg, seed)
            except GeofmError as exc:
                per_seed_maps[seed] = {v: None for v in values}
                per_seed_maps[seed]["error"] = str(exc)
                failures += 1
        for value in values:
            per_seed = {}
            for seed in cfg.seeds:
                per_seed[seed] = per_seed_maps[seed].get(value)
            rows.append(_make_row(value, per_seed))
    else:
        for value in values:
            per_seed = {}
            for seed in cfg.seeds:
                try:
                    report = runner(cfg, value, seed, out_dir / f"{axis}_{value}_seed{seed}")
                    per_seed[seed] = report.metrics["box"]["mAP50"]
                except GeofmError as exc:
                    per_seed[seed] = None
                    failures += 1
                    (out_dir / f"{axis}_{value}_seed{seed}_FAILED.txt").write_text(str(exc))
            rows.append(_make_row(value, per_seed))

    base_mean = rows[0]["mean"]
    for row in rows:
        row["pct_change"] = _percent_delta(row["mean"], base_mean) if axis == "resolution" else ""

    table = _format_ablation_table(axis, cfg, rows)
    (out_dir / "ablation.csv").write_text(table["csv"])
    (out_dir / "ablation.md").write_text(table["md"])
    summary = {"axis": axis, "rows": rows, "failures": failures, "config_hash": config_hash(cfg)}
    (out_dir / "ablation.json").write_text(json.dumps(summary, indent=1, default=str))
    return summary


def _make_row(value, per_seed: dict) -> dict:
    present = [v for v in per_seed.values() if v is not None]
    return {
        "value": value,
        "per_seed": per_seed,
        "mean": float(np.mean(present)) if present else None,
        "failed": len(present) < len(per_seed),
    }


def _ablate_value_bands(cfg: ExperimentConfig, strategy: str, seed: int, out_dir) -> RunReport:
    sub = dataclasses.replace(cfg, adaptation=strategy, seeds=(seed,))
    return run_finetune(sub, seed, out_dir)


def _ablate_value_pyramid(cfg: ExperimentConfig, mode: str, seed: int, out_dir) -> RunReport:
    sub = dataclasses.replace(cfg, pyramid=mode, seeds=(seed,))
    return run_finetune(sub, seed, out_dir)


def _ablate_value_fraction(cfg: ExperimentConfig, fraction: float, seed: int, out_dir) -> RunReport:
    sub = dataclasses.replace(cfg, train_fraction=fraction, seeds=(seed,))
    return run_finetune(sub, seed, out_dir)


def _resolution_sweep(cfg: ExperimentConfig, seed: int) -> dict[int, float | None]:
    """Train once at native resolution, evaluate per degradation factor."""
    base = dataclasses.replace(cfg, resolution_factor=1, seeds=(seed,))
    train, test = build_datasets(base, seed)
    detector = Detector(base.detector_config(), Rng(seed, ("detector_init",)))
    if base.backbone_checkpoint:
        load_backbone_from_checkpoint(detector, base.backbone_checkpoint)
    train_detector(detector, train, seed=seed, epochs=base.epochs, lr=base.lr,
                   weight_decay=base.weight_decay)
    out: dict[int, float | None] = {}
    for factor in (1,) + DEGRADE_FACTORS:
        if factor == 1:
            eval_scenes = test
        else:
            eval_scenes = [apply_resolution(r, a, factor) for r, a in test]
        metrics, _ = evaluate_detector(detector, eval_scenes)
        out[factor] = metrics["box"]["mAP50"]
    return out


def _format_ablation_table(axis: str, cfg: ExperimentConfig, rows: list[dict]) -> dict:
    digest = config_hash(cfg)
    seeds = list(cfg.seeds)
    header = ["config_hash", "axis", "value"] + [f"seed{s}" for s in seeds] + ["mean"]
    if axis == "resolution":
        header.append("pct_change")
    csv_lines = [",".join(header)]
    for row in rows:
        cells = [digest, axis, str(row["value"])]
        for s in seeds:
            v = row["per_seed"].get(s)
            cells.append("FAILED" if v is None else f"{v:.6f}")
        cells.append("FAILED" if row["mean"] is None else f"{row['mean']:.6f}")
        if axis == "resolution":
            cells.append(row["pct_change"])
        csv_lines.append(",".join(cells))
    csv_text = "\n".join(csv_lines) + "\n"

    md_lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for line in csv_lines[1:]:
        md_lines.append("| " + " | ".join(line.split(",")) + " |")
    return {"csv": csv_text, "md": "\n".join(md_lines) + "\n"}


# ------------------------------------------------------------------ gen-data
def run_gen_data(cfg: ExperimentConfig, out_dir) -> dict:
    cfg.require_valid()
    out_dir = Path(out_dir)
    scene_cfg = cfg.scene_config()
    train_manifest = write_dataset(out_dir / "train", scene_cfg, cfg.data.n_train, "train")
    test_manifest = write_dataset(out_dir / "test", scene_cfg, cfg.data.n_test, "test",
                                  index_offset=10_000)
    return {"train_manifest": str(train_manifest), "test_manifest": str(test_manifest)}
