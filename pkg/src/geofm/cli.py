"""Command-line entry points: gen-data | pretrain | finetune | eval | ablate.

Configs are JSON documents validated against the ExperimentConfig schema;
`--set dotted.path=value` overrides individual fields. The default seed
comes from `--seed`, else the GFM_SEED environment variable, else the
config's own seed list. Exit codes: 0 success, 2 configuration error,
3 runtime/numeric error, 4 ablation finished with failed cells.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .bands import ADAPTATION_STRATEGIES
from .data import load_dataset, rle_to_mask
from .errors import ConfigError, GeofmError, UsageError
from .experiment import (
    ExperimentConfig,
    RunReport,
    apply_overrides,
    config_from_dict,
    config_hash,
    evaluate_detector,
    load_detector_checkpoint,
    run_ablation,
    run_finetune,
    run_gen_data,
    run_pretrain,
    write_run_report,
)
from .metrics import EvalConfig, evaluate
from .records import Detection

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_PARTIAL = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geofm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=False, help="experiment config JSON")
        p.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                       help="override a config field via dotted path")
        p.add_argument("--seed", type=int, default=None,
                       help="run seed (default: GFM_SEED env var, else config seeds)")
        p.add_argument("--out", required=True, help="output directory")

    common(sub.add_parser("gen-data", help="generate a synthetic dataset"))
    common(sub.add_parser("pretrain", help="masked-autoencoder pretraining"))
    common(sub.add_parser("finetune", help="train the detection pipeline"))
    ablate = sub.add_parser("ablate", help="run one ablation axis")
    common(ablate)
    ablate.add_argument("--axis", required=True, choices=("bands", "pyramid", "resolution", "fraction"))
    evalp = sub.add_parser("eval", help="evaluate a checkpoint or injected predictions")
    evalp.add_argument("--checkpoint", help="detector checkpoint directory")
    evalp.add_argument("--dataset", required=True, help="dataset manifest JSON")
    evalp.add_argument("--predictions", help="JSON file of detections to evaluate directly")
    evalp.add_argument("--workers", type=int, default=1)
    evalp.add_argument("--out", required=True)
    evalp.add_argument("--seed", type=int, default=None)
    return parser


def load_config(args) -> ExperimentConfig:
    raw = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    raw = apply_overrides(raw, args.set)
    cfg = config_from_dict(raw)
    seed = resolve_seed(args)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seeds=(seed,))
    problems = cfg.validate()
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg


def resolve_seed(args) -> int | None:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("GFM_SEED")
    return int(env) if env else None


def _load_predictions(path, gts_by_image) -> dict:
    records = json.loads(Path(path).read_text())
    if not isinstance(records, list):
        raise UsageError(f"predictions file {path} must hold a JSON list")
    seen_ids = set()
    dets_by_image: dict[str, list[Detection]] = {name: [] for name in gts_by_image}
    for i, rec in enumerate(records):
        rec_id = rec.get("id", i)
        if rec_id in seen_ids:
            raise UsageError(f"duplicate detection id {rec_id!r} in predictions file")
        seen_ids.add(rec_id)
        name = rec["image"]
        if name not in dets_by_image:
            raise UsageError(f"prediction {rec_id!r} references unknown image {name!r}")
        x, y, w, h = rec["bbox"]
        mask = rle_to_mask(rec["segmentation"]) if "segmentation" in rec else None
        dets_by_image[name].append(
            Detection(box=(x, y, x + w, y + h), score=rec["score"],
                      class_id=rec["category_id"] - 1, mask=mask)
        )
    return dets_by_image


def cmd_eval(args) -> int:
    out_dir = Path(args.out)
    scenes, manifest = load_dataset(args.dataset)
    # load_dataset returns scenes aligned with manifest["scenes"]
    gts_by_image = {name: anns for name, (_, anns) in zip(manifest["scenes"], scenes)}
    t0 = time.perf_counter()
    if args.predictions:
        dets_by_image = _load_predictions(args.predictions, gts_by_image)
        metrics = {"box": evaluate(dets_by_image, gts_by_image, EvalConfig(iou_kind="box"))}
        if any(d.mask is not None for dets in dets_by_image.values() for d in dets):
            metrics["mask"] = evaluate(dets_by_image, gts_by_image, EvalConfig(iou_kind="mask"))
        seconds = (time.perf_counter() - t0) / max(len(scenes), 1)
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --predictions")
        detector = load_detector_checkpoint(args.checkpoint)
        data_bands = scenes[0][0].shape[0] if scenes else detector.cfg.data_bands
        if data_bands != detector.cfg.data_bands:
            raise UsageError(
                f"dataset has {data_bands} bands but the model expects {detector.cfg.data_bands}; "
                f"configure a band-adaptation strategy ({', '.join(ADAPTATION_STRATEGIES[:3])})"
            )
        pairs = [(raster, anns) for raster, anns in scenes]
        metrics, seconds = evaluate_detector(detector, pairs, workers=args.workers)
    digest = manifest.get("config_hash", "dataset")
    seed = resolve_seed(args) or 0
    report = RunReport(
        config_hash=digest,
        seed=seed,
        metrics=metrics,
        loss_curve=[],
        timing={"inference_seconds_per_image": max(seconds, 1e-9)},
        provenance={"dataset": str(args.dataset), "seed": seed, "config_hash": digest},
    )
    write_run_report(out_dir, report)
    lines = ["kind metric value"]
    for kind in sorted(metrics):
        for key, value in metrics[kind].items():
            lines.append(f"{kind} {key} {'N/A' if value is None else f'{value:.4f}'}")
    print("\n".join(lines))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "eval":
            return cmd_eval(args)
        cfg = load_config(args)
        seed = cfg.seeds[0]
        out_dir = Path(args.out)
        if args.command == "gen-data":
            paths = run_gen_data(cfg, out_dir)
            print(json.dumps(paths))
            return EXIT_OK
        if args.command == "pretrain":
            report = run_pretrain(cfg, seed, out_dir)
            print(f"pretrain done: final epoch loss {report.loss_curve[-1]:.6f}")
            return EXIT_OK
        if args.command == "finetune":
            report = run_finetune(cfg, seed, out_dir)
            shown = {k: v for k, v in report.metrics["box"].items() if v is not None}
            print(f"finetune done: {shown}")
            return EXIT_OK
        if args.command == "ablate":
            summary = run_ablation(cfg, args.axis, out_dir)
            print((out_dir / "ablation.md").read_text())
            return EXIT_PARTIAL if summary["failures"] else EXIT_OK
        raise UsageError(f"unknown command {args.command!r}")
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GeofmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
