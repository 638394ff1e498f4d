"""Deterministic synthetic road scenes, normalization, and dataset I/O.

Every sample is a pure function of (scene seed, sample index) through a
Philox counter-based generator, so datasets regenerate bit-identically
across runs and platforms.  Scenes are composited back-to-front: sky
fill, buildings standing on the horizon, ground fill (sidewalk), tree
ellipses near the horizon, road trapezoid, vehicle boxes on the road.
Later layers occlude earlier ones; the top image rows always stay sky and
the road is never fully covered, so each scene contains at least two
classes by construction.

On-disk layout: images/<id>.png (8-bit RGB), labels/<id>.png (8-bit
grayscale, class id == pixel value, 255 = ignore), manifest.csv with
header id,split.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .config import SceneConfig
from .errors import DataError
from .tensor import default_dtype

IGNORE_VALUE = 255
VAL_INDEX_BASE = 10 ** 6

CLASS_NAMES = ("sky", "road", "sidewalk", "building", "vegetation", "vehicle",
               "pole", "sign", "fence", "person", "rider", "truck", "bus",
               "train", "wall", "terrain", "light", "motorcycle", "bicycle")

# Base palette (RGB in [0,1]) for the core classes; extras cycle hues.
_PALETTE = np.array([
    [0.55, 0.71, 0.95],   # sky
    [0.33, 0.33, 0.36],   # road
    [0.62, 0.60, 0.58],   # sidewalk
    [0.55, 0.35, 0.30],   # building
    [0.18, 0.52, 0.24],   # vegetation
    [0.75, 0.15, 0.15],   # vehicle
])

# Per-class palette drift directions for the domain-shift knob.
_SHIFT_DIRS = np.array([
    [0.3, -0.1, -0.3], [-0.2, 0.2, 0.2], [0.2, 0.1, -0.2],
    [-0.3, 0.1, 0.3], [0.3, -0.2, 0.2], [-0.2, 0.3, 0.3],
])


def class_palette(num_classes, palette_shift=0.0):
    colors = np.zeros((num_classes, 3))
    for c in range(num_classes):
        base = _PALETTE[c % len(_PALETTE)]
        if c >= len(_PALETTE):
            # rotate channels so extra classes stay distinguishable
            base = np.roll(base, c // len(_PALETTE)) * 0.85
        drift = _SHIFT_DIRS[c % len(_SHIFT_DIRS)]
        colors[c] = np.clip(base + palette_shift * drift, 0.0, 1.0)
    return colors


@dataclass
class SceneSample:
    image: np.ndarray      # (H, W, 3) float32 in [0, 1]
    labels: np.ndarray     # (H, W) uint8, values in [0, C) plus 255
    id: str


def sample_id(index):
    return f"scene_{index:08d}"


def _scene_rng(seed, index):
    key = np.array([np.uint64(seed), np.uint64(index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def generate_scene(config: SceneConfig, index) -> SceneSample:
    """Composite one labelled scene; pure function of (config, index)."""
    config.validate()
    rng = _scene_rng(config.seed, index)
    h, w, nc = config.height, config.width, config.num_classes
    labels = np.zeros((h, w), dtype=np.uint8)                 # sky everywhere

    horizon = int(round(h * rng.uniform(config.sky_frac_min, config.sky_frac_max)))
    horizon = max(4, min(h - 8, horizon))

    # buildings stand on the horizon; capped height keeps the top rows sky
    n_buildings = rng.integers(config.building_count_min, config.building_count_max + 1)
    for _ in range(n_buildings):
        bw = int(rng.uniform(0.15, 0.35) * w)
        bh = int(rng.uniform(0.35, 0.8) * horizon)
        x0 = int(rng.uniform(0, max(1, w - bw)))
        if 3 < nc:
            labels[horizon - bh:horizon, x0:x0 + bw] = 3

    labels[horizon:, :] = 2                                   # ground = sidewalk

    n_veg = rng.integers(config.vegetation_count_min, config.vegetation_count_max + 1)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(n_veg):
        cy = rng.uniform(horizon - 0.04 * h, horizon + 0.08 * h)
        cx = rng.uniform(0, w)
        ry = min(rng.uniform(0.05, 0.11) * h, max(2.0, cy - 0.03 * h))
        rx = rng.uniform(0.06, 0.14) * w
        blob = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        if 4 < nc:
            labels[blob] = 4

    # extra small-object classes for configurations beyond the core six
    for c in range(6, nc):
        for _ in range(rng.integers(1, 3)):
            ow = max(3, int(rng.uniform(0.04, 0.08) * w))
            oh = max(3, int(rng.uniform(0.04, 0.08) * h))
            x0 = int(rng.uniform(0, w - ow))
            y0 = int(rng.uniform(horizon, h - oh))
            labels[y0:y0 + oh, x0:x0 + ow] = c

    # road trapezoid, bottom-wide, converging toward the horizon
    cx_bottom = w / 2 + rng.uniform(-0.12, 0.12) * w
    cx_top = cx_bottom + rng.uniform(-0.08, 0.08) * w
    hw_bottom = rng.uniform(config.road_half_width_min, config.road_half_width_max) * w
    hw_top = max(2.0, 0.18 * hw_bottom)
    span = max(1, h - 1 - horizon)
    for y in range(horizon, h):
        t = (y - horizon) / span
        cx = cx_top + (cx_bottom - cx_top) * t
        hw = hw_top + (hw_bottom - hw_top) * t
        x0, x1 = int(round(cx - hw)), int(round(cx + hw))
        labels[y, max(0, x0):min(w, x1 + 1)] = 1

    # vehicles sit on the road, small enough to never cover it fully
    n_vehicles = rng.integers(config.vehicle_count_min, config.vehicle_count_max + 1)
    for _ in range(n_vehicles):
        t = rng.uniform(0.35, 0.9)
        y1 = int(horizon + t * span)
        vw = max(4, int(rng.uniform(0.5, 0.9) * (hw_top + (hw_bottom - hw_top) * t)))
        vh = max(3, int(0.7 * vw))
        cx = cx_top + (cx_bottom - cx_top) * t + rng.uniform(-0.3, 0.3) * vw
        x0 = int(cx - vw / 2)
        if 5 < nc:
            labels[max(horizon, y1 - vh):y1, max(0, x0):min(w, x0 + vw)] = 5

    palette = class_palette(nc, config.palette_shift)
    image = palette[labels]
    image = image + rng.normal(0.0, config.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SceneSample(image=image, labels=labels, id=sample_id(index))


# ImageNet channel statistics used for input normalization.
NORM_MEAN = np.array([0.485, 0.456, 0.406])
NORM_STD = np.array([0.229, 0.224, 0.225])


def normalize(image, debug=False):
    """(H,W,3) floats in [0,1] -> channel-first standardized (3,H,W)."""
    image = np.asarray(image, dtype=np.float64)
    if debug and (image.min() < 0.0 or image.max() > 1.0):
        raise ValueError("normalize expects values in [0, 1]")
    out = (image - NORM_MEAN) / NORM_STD
    return out.transpose(2, 0, 1).astype(default_dtype())


def save_image_png(path, image):
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image_png(path):
    with Image.open(path) as img:
        if img.mode != "RGB":
            raise DataError(f"{path}: expected an RGB image, got mode {img.mode}")
        return np.asarray(img, dtype=np.float32) / 255.0


def save_label_png(path, labels):
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise DataError("labels must fit in 8 bits")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


def load_label_png(path):
    with Image.open(path) as img:
        if img.mode != "L":
            raise DataError(f"{path}: labels must be single-channel 8-bit, got mode {img.mode}")
        return np.asarray(img, dtype=np.uint8)


def make_splits(config, n_train, n_val):
    """Structurally disjoint index lists; sweep subsets are prefixes of the
    train list and the val list never changes with the sweep size."""
    train = list(range(n_train))
    val = list(range(VAL_INDEX_BASE, VAL_INDEX_BASE + n_val))
    return train, val


def synth_split(config, indices):
    return [generate_scene(config, i) for i in indices]


def write_dataset(out_dir, config, n_train, n_val):
    """Generate and persist a dataset in the standard directory layout."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    train_idx, val_idx = make_splits(config, n_train, n_val)
    rows = []
    for split, indices in (("train", train_idx), ("val", val_idx)):
        for i in indices:
            sample = generate_scene(config, i)
            save_image_png(os.path.join(out_dir, "images", f"{sample.id}.png"), sample.image)
            save_label_png(os.path.join(out_dir, "labels", f"{sample.id}.png"), sample.labels)
            rows.append((sample.id, split))
    with open(os.path.join(out_dir, "manifest.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "split"])
        writer.writerows(rows)
    return rows


def read_manifest(data_dir):
    path = os.path.join(data_dir, "manifest.csv")
    if not os.path.exists(path):
        raise DataError(f"missing manifest {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "split"]:
            raise DataError(f"{path}: expected header id,split")
        return [(row[0], row[1]) for row in reader if row]


def load_sample(data_dir, sample_id_):
    image = load_image_png(os.path.join(data_dir, "images", f"{sample_id_}.png"))
    labels = load_label_png(os.path.join(data_dir, "labels", f"{sample_id_}.png"))
    if image.shape[:2] != labels.shape:
        raise DataError(f"{sample_id_}: image/label extents disagree")
    return SceneSample(image=image, labels=labels, id=sample_id_)


def load_split(data_dir, split):
    ids = [sid for sid, s in read_manifest(data_dir) if s == split]
    if not ids:
        raise DataError(f"no '{split}' samples in {data_dir}")
    return [load_sample(data_dir, sid) for sid in ids]
