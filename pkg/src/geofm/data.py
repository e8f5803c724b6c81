"""Synthetic multi-band scene generation, dataset files, and transforms.

Scenes are (C, T, H, W) float rasters: a noisy background plus non-
overlapping ellipse/blob objects whose per-band reflectance signature
identifies their class (signatures are separated by at least three noise
sigmas, so classes are learnable by construction). Each object carries an
exact binary mask and its tight bounding box. Dataset files are a simple
JSON-header + raw-float payload pair per scene plus one COCO-shaped
annotation file; resolution degradation (average pooling) and nested
training-fraction subsampling implement the ablation transforms.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, GenerationError, UsageError
from .records import InstanceAnnotation
from .rng import Rng

DEGRADE_FACTORS = (2, 4, 8)
TRAIN_FRACTIONS = (1.0, 0.75, 0.5, 0.25)


# ------------------------------------------------------------------ config
@dataclass
class SceneConfig:
    bands: int = 6
    image_size: int = 64
    time_steps: int = 1
    n_classes: int = 2
    count_range: tuple[int, int] = (2, 5)
    size_range: tuple[int, int] = (8, 24)
    shapes: tuple[str, ...] = ("ellipse", "blob")
    signatures: list | None = None  # (n_classes, bands) mean reflectance
    background: list | None = None  # (bands,)
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.bands not in (3, 6):
            raise ConfigError(f"scene bands must be 3 or 6, got {self.bands}")
        lo, hi = self.count_range
        if not (1 <= lo <= hi):
            raise ConfigError(f"bad object count range: {self.count_range}")
        slo, shi = self.size_range
        if not (2 <= slo <= shi <= self.image_size):
            raise ConfigError(f"object size range {self.size_range} exceeds image {self.image_size}")
        for s in self.shapes:
            if s not in ("ellipse", "blob"):
                raise ConfigError(f"unknown shape family {s!r}")
        if self.background is None:
            self.background = [0.15] * self.bands
        if self.signatures is None:
            self.signatures = default_signatures(
                self.n_classes, self.bands, Rng(self.seed, ("signatures",)), 3.0 * self.noise_std
            ).tolist()
        sig = np.asarray(self.signatures, dtype=np.float32)
        if sig.shape != (self.n_classes, self.bands):
            raise ConfigError(f"signatures must be ({self.n_classes}, {self.bands}), got {sig.shape}")
        if self.noise_std > 0:
            for a in range(self.n_classes):
                for b in range(a + 1, self.n_classes):
                    gap = float(np.max(np.abs(sig[a] - sig[b])))
                    if gap < 3.0 * self.noise_std:
                        raise ConfigError(
                            f"class signatures {a} and {b} differ by {gap:.3f} < 3 x noise std"
                        )

    def signature_array(self) -> np.ndarray:
        return np.asarray(self.signatures, dtype=np.float32)

    def background_array(self) -> np.ndarray:
        return np.asarray(self.background, dtype=np.float32)


def default_signatures(n_classes: int, bands: int, rng: Rng, min_gap: float) -> np.ndarray:
    """Random reflectance signatures with pairwise L-inf gap >= min_gap."""
    for attempt in range(200):
        sig = rng.child(f"try{attempt}").uniform((n_classes, bands), 0.35, 0.95)
        ok = all(
            np.max(np.abs(sig[a] - sig[b])) >= min_gap
            for a in range(n_classes)
            for b in range(a + 1, n_classes)
        )
        if ok:
            return sig.astype(np.float32)
    raise GenerationError("could not draw separated class signatures")


# --------------------------------------------------------------- rasterizers
def _ellipse_mask(size: int, cx, cy, a, b, theta) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    x = (xx + 0.5) - cx
    y = (yy + 0.5) - cy
    ct, st = np.cos(theta), np.sin(theta)
    u = (x * ct + y * st) / a
    v = (-x * st + y * ct) / b
    return (u * u + v * v) <= 1.0


def _polygon_mask(size: int, verts: np.ndarray) -> np.ndarray:
    """Even-odd rasterization of a closed polygon at pixel centers."""
    yy, xx = np.mgrid[0:size, 0:size]
    px = xx + 0.5
    py = yy + 0.5
    inside = np.zeros((size, size), dtype=bool)
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        crosses = (y1 <= py) != (y2 <= py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < x_at)
    return inside


def _blob_vertices(rng: Rng, cx: float, cy: float, radius: float) -> np.ndarray:
    n = int(rng.child("n").integers(5, 10))
    angles = np.sort(rng.child("ang").uniform((n,), 0, 2 * np.pi))
    radii = rng.child("rad").uniform((n,), 0.55 * radius, radius)
    return np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)


def _tight_box(mask: np.ndarray) -> tuple[float, float, float, float]:
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    return float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1)


# ------------------------------------------------------------------- scenes
def synth_scene(config: SceneConfig, index: int) -> tuple[np.ndarray, list[InstanceAnnotation]]:
    """Render scene `index`: deterministic per (config.seed, index)."""
    rng = Rng(config.seed, ("scene", str(index)))
    size = config.image_size
    count = int(rng.child("count").integers(config.count_range[0], config.count_range[1] + 1))
    occupied = np.zeros((size, size), dtype=bool)
    annotations: list[InstanceAnnotation] = []
    object_layer = np.zeros((config.bands, size, size), dtype=np.float32)
    signatures = config.signature_array()

    for obj in range(count):
        placed = False
        for attempt in range(200):
            r = rng.child(f"obj{obj}/try{attempt}")
            extent = float(r.child("size").uniform((), config.size_range[0], config.size_range[1]))
            half = extent / 2.0
            cx = float(r.child("cx").uniform((), half, size - half))
            cy = float(r.child("cy").uniform((), half, size - half))
            shape = config.shapes[int(r.child("shape").integers(0, len(config.shapes)))]
            if shape == "ellipse":
                aspect = float(r.child("aspect").uniform((), 0.6, 1.0))
                theta = float(r.child("theta").uniform((), 0, np.pi))
                mask = _ellipse_mask(size, cx, cy, half, half * aspect, theta)
            else:
                mask = _polygon_mask(size, _blob_vertices(r.child("blob"), cx, cy, half))
            if not mask.any() or (mask & occupied).any():
                continue
            cls = int(r.child("class").integers(0, config.n_classes))
            occupied |= mask
            object_layer[:, mask] = signatures[cls][:, None]
            annotations.append(InstanceAnnotation(box=_tight_box(mask), class_id=cls, mask=mask))
            placed = True
            break
        if not placed:
            raise GenerationError(
                f"scene {index}: could not place object {obj} after 200 attempts"
            )

    background = config.background_array()[:, None, None]
    base = np.where(occupied[None], object_layer, background).astype(np.float32)
    raster = np.empty((config.bands, config.time_steps, size, size), dtype=np.float32)
    for t in range(config.time_steps):
        noise = rng.child(f"noise{t}").normal((config.bands, size, size), std=config.noise_std)
        raster[:, t] = base + noise
    return raster, annotations


# ---------------------------------------------------------------- transforms
def degrade_resolution(raster: np.ndarray, factor: int) -> np.ndarray:
    """Non-overlapping average pooling of each band/time slice."""
    if factor not in DEGRADE_FACTORS:
        raise ConfigError(f"degradation factor must be one of {DEGRADE_FACTORS}, got {factor}")
    C, Tt, H, W = raster.shape
    if H % factor or W % factor:
        raise ConfigError(f"image {H}x{W} is not divisible by factor {factor}")
    blocks = raster.reshape(C, Tt, H // factor, factor, W // factor, factor)
    return blocks.mean(axis=(3, 5), dtype=np.float64).astype(raster.dtype)


def degrade_annotations(annotations: list[InstanceAnnotation], factor: int) -> list[InstanceAnnotation]:
    """Boxes scaled by 1/factor; masks max-pooled."""
    out = []
    for ann in annotations:
        h, w = ann.mask.shape
        if h % factor or w % factor:
            raise ConfigError(f"mask {h}x{w} is not divisible by factor {factor}")
        pooled = ann.mask.reshape(h // factor, factor, w // factor, factor).any(axis=(1, 3))
        box = tuple(v / factor for v in ann.box)
        out.append(InstanceAnnotation(box=box, class_id=ann.class_id, mask=pooled))
    return out


def expand_to_canvas(raster: np.ndarray, annotations: list[InstanceAnnotation], factor: int):
    """Nearest-neighbor re-expansion of a degraded scene to its original
    canvas (models coarser ground sampling at a fixed input size). Boxes
    are recomputed tight around the blockified masks."""
    up = np.repeat(np.repeat(raster, factor, axis=2), factor, axis=3)
    anns = []
    for ann in annotations:
        mask = np.repeat(np.repeat(ann.mask, factor, axis=0), factor, axis=1)
        anns.append(InstanceAnnotation(box=_tight_box(mask), class_id=ann.class_id, mask=mask))
    return up, anns


def subsample_split(scene_names: list[str], fraction: float, seed: int) -> list[str]:
    """Seeded prefix of one shuffled order: smaller fractions nest in larger."""
    if fraction not in TRAIN_FRACTIONS:
        raise ConfigError(f"train fraction must be one of {TRAIN_FRACTIONS}, got {fraction}")
    if not scene_names:
        raise ConfigError("cannot subsample an empty scene list")
    order = Rng(seed, ("subsample",)).permutation(len(scene_names))
    keep = max(1, int(round(fraction * len(scene_names))))
    picked = sorted(order[:keep].tolist())
    return [scene_names[i] for i in picked]


# ------------------------------------------------------------------ scene IO
def write_scene(path_base, raster: np.ndarray, band_order: list[str]) -> None:
    path_base = Path(path_base)
    C, Tt, H, W = raster.shape
    header = {
        "bands": int(C),
        "time": int(Tt),
        "height": int(H),
        "width": int(W),
        "dtype": "f32",
        "band_order": list(band_order),
    }
    path_base.with_suffix(".json").write_text(json.dumps(header, indent=1))
    path_base.with_suffix(".bin").write_bytes(np.ascontiguousarray(raster, dtype="<f4").tobytes())


def read_scene(path_base) -> tuple[np.ndarray, dict]:
    path_base = Path(path_base)
    header_path = path_base.with_suffix(".json")
    payload_path = path_base.with_suffix(".bin")
    try:
        header = json.loads(header_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt scene header {header_path}: {exc}") from exc
    for key in ("bands", "time", "height", "width", "dtype"):
        if key not in header:
            raise FormatError(f"scene header {header_path} is missing {key!r}")
    if header["dtype"] != "f32":
        raise FormatError(f"unsupported scene dtype {header['dtype']!r} in {header_path}")
    shape = (header["bands"], header["time"], header["height"], header["width"])
    expected = int(np.prod(shape)) * 4
    raw = payload_path.read_bytes()
    if len(raw) != expected:
        raise FormatError(
            f"scene payload {payload_path} length mismatch at byte {min(len(raw), expected)}: "
            f"expected {expected} bytes, found {len(raw)}"
        )
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy(), header


# ----------------------------------------------------------- COCO-shaped JSON
def mask_to_rle(mask: np.ndarray) -> dict:
    """Uncompressed row-major run-length counts starting with the zero run."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    changes = np.nonzero(np.diff(flat))[0] + 1
    boundaries = np.concatenate([[0], changes, [flat.size]])
    runs = np.diff(boundaries).tolist()
    counts = ([0] if flat[0] else []) + [int(r) for r in runs]
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": counts}


def rle_to_mask(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for run in rle["counts"]:
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    if pos != h * w:
        raise FormatError(f"RLE counts cover {pos} pixels, mask has {h * w}")
    return flat.reshape(h, w)


def annotations_to_coco(per_scene: dict[str, list[InstanceAnnotation]], image_size: int,
                        n_classes: int) -> dict:
    images = []
    annotations = []
    ann_id = 1
    for image_id, name in enumerate(sorted(per_scene)):
        images.append({"id": image_id, "file_name": name, "height": image_size, "width": image_size})
        for ann in per_scene[name]:
            x1, y1, x2, y2 = ann.box
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": image_id,
                    "category_id": ann.class_id + 1,
                    "bbox": [x1, y1, x2 - x1, y2 - y1],
                    "area": int(ann.mask.sum()),
                    "segmentation": mask_to_rle(ann.mask),
                    "iscrowd": 0,
                }
            )
            ann_id += 1
    categories = [{"id": k + 1, "name": f"class{k}"} for k in range(n_classes)]
    return {"images": images, "annotations": annotations, "categories": categories}


def coco_to_annotations(coco: dict) -> dict[str, list[InstanceAnnotation]]:
    by_id = {img["id"]: img["file_name"] for img in coco["images"]}
    out: dict[str, list[InstanceAnnotation]] = {name: [] for name in by_id.values()}
    for ann in coco["annotations"]:
        x, y, w, h = ann["bbox"]
        mask = rle_to_mask(ann["segmentation"])
        out[by_id[ann["image_id"]]].append(
            InstanceAnnotation(box=(x, y, x + w, y + h), class_id=ann["category_id"] - 1, mask=mask)
        )
    return out


# ------------------------------------------------------------------ datasets
def config_hash(config: SceneConfig) -> str:
    return hashlib.sha256(json.dumps(asdict(config), sort_keys=True).encode()).hexdigest()[:16]


def write_dataset(out_dir, config: SceneConfig, n_scenes: int, split: str,
                  index_offset: int = 0) -> Path:
    """Generate `n_scenes` scenes plus annotations and a manifest; returns
    the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    band_order = _band_names(config.bands)
    per_scene: dict[str, list[InstanceAnnotation]] = {}
    names = []
    for i in range(n_scenes):
        raster, anns = synth_scene(config, index_offset + i)
        name = f"scene_{index_offset + i:04d}"
        write_scene(out_dir / name, raster, band_order)
        per_scene[name] = anns
        names.append(name)
    ann_path = out_dir / f"annotations_{split}.json"
    ann_path.write_text(json.dumps(annotations_to_coco(per_scene, config.image_size, config.n_classes)))
    manifest = {
        "split": split,
        "scenes": names,
        "annotation_file": ann_path.name,
        "config_hash": config_hash(config),
        "generator": asdict(config),
    }
    manifest_path = out_dir / f"manifest_{split}.json"
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return manifest_path


def load_dataset(manifest_path) -> tuple[list[tuple[np.ndarray, list[InstanceAnnotation]]], dict]:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    coco = json.loads((root / manifest["annotation_file"]).read_text())
    anns = coco_to_annotations(coco)
    scenes = []
    for name in manifest["scenes"]:
        if name not in anns:
            raise FormatError(f"manifest scene {name!r} missing from annotation file")
        raster, _ = read_scene(root / name)
        scenes.append((raster, anns[name]))
    return scenes, manifest


def _band_names(bands: int) -> list[str]:
    from .bands import BAND_ORDER_DEFAULT

    if bands == 6:
        return list(BAND_ORDER_DEFAULT)
    return list(BAND_ORDER_DEFAULT[:bands])
