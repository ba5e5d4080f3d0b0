"""Segment datasets: synthetic generation, mask/manifest I/O, CV folds.

Masks are 8-bit grayscale images (degree = value / 255) so fuzzy masks load
unchanged; the manifest is line-oriented JSON, one record per image.  The
synthetic generator lays out 9 elliptical organs in a fixed anatomical
arrangement (left organs on the image left) with seeded jitter, which is
asymmetric enough for directional relations alone to discriminate every
label.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .fuzzy import ScalarField
from .relations import Segment, SegmentSet

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA = "segment-manifest"

ORGAN_LABELS = (
    "liver", "spleen", "bladder",
    "right_kidney", "left_kidney",
    "right_lung", "left_lung",
    "right_psoas", "left_psoas",
)

# (cx, cy, semi_x, semi_y) as fractions of the image size, y growing downward.
_CANONICAL_LAYOUT = {
    "left_lung":    (0.30, 0.16, 0.095, 0.075),
    "right_lung":   (0.70, 0.16, 0.095, 0.075),
    "spleen":       (0.24, 0.40, 0.055, 0.045),
    "liver":        (0.72, 0.40, 0.130, 0.095),
    "left_kidney":  (0.30, 0.60, 0.055, 0.075),
    "right_kidney": (0.70, 0.60, 0.055, 0.075),
    "left_psoas":   (0.42, 0.79, 0.035, 0.075),
    "right_psoas":  (0.58, 0.79, 0.035, 0.075),
    "bladder":      (0.50, 0.92, 0.110, 0.035),
}


@dataclass
class SyntheticLayoutConfig:
    image_size: int = 96
    layout: dict = field(default_factory=lambda: dict(_CANONICAL_LAYOUT))
    center_jitter: float = 0.02   # fraction of image size
    axis_jitter: float = 0.10     # relative scale of the semi-axes
    angle_jitter: float = 0.12    # radians
    seed: int = 0
    max_attempts: int = 100


def _ellipse_mask(size, cx, cy, semi_x, semi_y, angle):
    ys, xs = np.mgrid[0:size, 0:size]
    dx = xs - cx
    dy = ys - cy
    ca, sa = math.cos(angle), math.sin(angle)
    u = (dx * ca + dy * sa) / semi_x
    v = (-dx * sa + dy * ca) / semi_y
    return (u * u + v * v) <= 1.0


def synthesize(config: SyntheticLayoutConfig, n: int):
    """Generate n images of 9 disjoint elliptical organ masks; deterministic
    per seed, regenerated on placement collisions."""
    if n < 1:
        raise ValueError(f"need at least one image, got {n}")
    rng = np.random.default_rng(config.seed)
    size = config.image_size
    images = []
    for i in range(n):
        for _ in range(config.max_attempts):
            masks = {}
            occupancy = np.zeros((size, size), dtype=np.int32)
            for label in ORGAN_LABELS:
                fx, fy, fa, fb = config.layout[label]
                cx = (fx + config.center_jitter * rng.uniform(-1, 1)) * size
                cy = (fy + config.center_jitter * rng.uniform(-1, 1)) * size
                semi_x = fa * size * (1 + config.axis_jitter * rng.uniform(-1, 1))
                semi_y = fb * size * (1 + config.axis_jitter * rng.uniform(-1, 1))
                angle = config.angle_jitter * rng.uniform(-1, 1)
                mask = _ellipse_mask(size, cx, cy, semi_x, semi_y, angle)
                masks[label] = mask
                occupancy += mask
            if occupancy.max() <= 1:
                break
        else:
            raise ValueError(
                "collision-free placement failed after "
                f"{config.max_attempts} attempts; reduce the jitter"
            )
        order = rng.permutation(len(ORGAN_LABELS))
        segments = [
            Segment(int(order[k]) + 1, ScalarField(masks[label].astype(np.float64)),
                    label)
            for k, label in enumerate(ORGAN_LABELS)
        ]
        images.append(SegmentSet(f"synth{i:03d}", segments))
    return images


def write_dataset(images, out_dir, kind: str = "synthetic") -> str:
    """Write per-organ mask PNGs and the manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    labels = sorted({s.label for image in images for s in image.segments})
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": MANIFEST_SCHEMA, "version": 1,
                             "labels": labels}) + "\n")
        for image in images:
            image_dir = os.path.join(out_dir, image.image_id)
            os.makedirs(image_dir, exist_ok=True)
            segment_records = []
            for segment in image.segments:
                rel_path = os.path.join(image.image_id, f"{segment.label}.png")
                data = np.rint(segment.mask.data * 255).astype(np.uint8)
                Image.fromarray(data, mode="L").save(os.path.join(out_dir, rel_path))
                segment_records.append(
                    {"id": segment.id, "label": segment.label, "mask": rel_path}
                )
            fh.write(json.dumps({"image": image.image_id, "kind": kind,
                                 "segments": segment_records},
                                sort_keys=True) + "\n")
    return manifest_path


def load_dataset(manifest_path):
    """Load every complete image from a manifest; incomplete images are
    skipped with a warning."""
    with open(manifest_path, "r", encoding="utf-8") as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise ValueError(f"empty manifest {manifest_path}")
    header = json.loads(lines[0])
    if header.get("schema") != MANIFEST_SCHEMA:
        raise ValueError(
            f"{manifest_path} is not a manifest (schema {header.get('schema')!r})"
        )
    required = set(header["labels"])
    base_dir = os.path.dirname(os.path.abspath(manifest_path))
    images = []
    for line in lines[1:]:
        record = json.loads(line)
        image_id = record["image"]
        seen = set()
        segments = []
        shape = None
        for seg_record in record["segments"]:
            label = seg_record["label"]
            if label in seen:
                raise ValueError(f"image {image_id!r} lists label {label!r} twice")
            seen.add(label)
            mask_path = os.path.join(base_dir, seg_record["mask"])
            try:
                with Image.open(mask_path) as im:
                    arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            except OSError as exc:
                raise ValueError(f"unreadable mask file {mask_path}: {exc}") from exc
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise ValueError(
                    f"mask {mask_path} has dimensions {arr.shape[::-1]}, "
                    f"expected {shape[::-1]}"
                )
            segments.append(Segment(seg_record["id"], ScalarField(arr), label))
        if seen != required:
            missing = sorted(required - seen)
            logger.warning("skipping incomplete image %r (missing %s)",
                           image_id, ", ".join(missing))
            continue
        images.append(SegmentSet(image_id, segments))
    return images


@dataclass(frozen=True)
class OuterFold:
    """One outer CV fold: its test images, training images, and the inner
    partition of the training images into validation folds."""

    test: tuple
    train: tuple
    inner: tuple


def nested_folds(image_ids, outer_k: int, inner_k: int, seed: int):
    """Seeded nested cross-validation plan over image ids.

    Outer folds partition the dataset with sizes differing by at most one;
    each outer training set is itself partitioned into inner_k validation
    folds.  Deterministic per seed.
    """
    ids = list(image_ids)
    if len(ids) < outer_k:
        raise ValueError(f"{len(ids)} images cannot form {outer_k} outer folds")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    outer_chunks = [list(chunk) for chunk in np.array_split(np.arange(len(order)),
                                                            outer_k)]
    folds = []
    for chunk in outer_chunks:
        test = tuple(order[i] for i in chunk)
        train = tuple(x for x in order if x not in test)
        if len(train) < inner_k:
            raise ValueError(
                f"outer-train of {len(train)} images cannot form {inner_k} inner folds"
            )
        inner_order = [train[i] for i in rng.permutation(len(train))]
        inner = tuple(
            tuple(inner_order[i] for i in chunk2)
            for chunk2 in np.array_split(np.arange(len(inner_order)), inner_k)
        )
        folds.append(OuterFold(test, train, inner))
    return folds
