"""Fuzzy spatial relations between segment masks.

Directional and distance relations are fuzzy landscapes: the morphological
dilation of a reference object by a structuring element whose shape encodes
the relation.  A landscape is matched against a target object with the degree
of intersection.  Symmetry is a search for the mirror line maximizing a fuzzy
Jaccard overlap, run with the downhill simplex method.  "Stretched" is a
unary elongation property from weighted PCA of the support.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from string import Formatter
from typing import Optional

import numpy as np
from scipy import ndimage, optimize

from .fuzzy import ScalarField, clamp_degree

logger = logging.getLogger(__name__)

DIRECTIONAL = "directional"
DISTANCE = "distance"
SYMMETRY = "symmetry"
STRETCHED = "stretched"
KINDS = (DIRECTIONAL, DISTANCE, SYMMETRY, STRETCHED)

# References larger than this are reduced to (at most) this many boundary
# pixels before the brute-force dilation.
MAX_REFERENCE_PIXELS = 256

VOCABULARY_SCHEMA = "relation-vocabulary"


@dataclass(frozen=True)
class RelationDescriptor:
    """One named relation of the vocabulary.

    ``parameters`` is kind-specific: a direction ``angle`` in radians for
    directional relations (image coordinates: +x right, +y down, so "above"
    points toward decreasing y), ``near_frac``/``far_frac`` fractions of the
    image diagonal for distance relations.  ``template`` is the linguistic
    pattern with one numbered slot per argument.
    """

    id: str
    name: str
    kind: str
    arity: int
    parameters: dict
    template: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown relation kind {self.kind!r}")
        expected_arity = 1 if self.kind == STRETCHED else 2
        if self.arity != expected_arity:
            raise ValueError(
                f"{self.kind} relation {self.id!r} must have arity {expected_arity}"
            )
        slots = {f for _, f, _, _ in Formatter().parse(self.template) if f is not None}
        if slots != {str(i) for i in range(self.arity)}:
            raise ValueError(
                f"template {self.template!r} must use exactly the slots "
                f"{{0}}..{{{self.arity - 1}}}"
            )


class Vocabulary:
    """Ordered catalogue of candidate relations with unique ids."""

    def __init__(self, relations):
        rels = tuple(relations)
        ids = [r.id for r in rels]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate relation ids in vocabulary")
        self.relations = rels
        self.by_id = {r.id: r for r in rels}

    def __iter__(self):
        return iter(self.relations)

    def __len__(self):
        return len(self.relations)

    def __eq__(self, other):
        if not isinstance(other, Vocabulary):
            return NotImplemented
        return self.relations == other.relations


def default_vocabulary() -> Vocabulary:
    """The built-in catalogue: 4 directional, close-to, symmetry, stretched."""
    return Vocabulary(
        [
            RelationDescriptor("left_of", "to the left of", DIRECTIONAL, 2,
                               {"angle": math.pi}, "{0} is to the left of {1}"),
            RelationDescriptor("right_of", "to the right of", DIRECTIONAL, 2,
                               {"angle": 0.0}, "{0} is to the right of {1}"),
            RelationDescriptor("below", "below", DIRECTIONAL, 2,
                               {"angle": math.pi / 2}, "{0} is below {1}"),
            RelationDescriptor("above", "above", DIRECTIONAL, 2,
                               {"angle": -math.pi / 2}, "{0} is above {1}"),
            RelationDescriptor("close_to", "close to", DISTANCE, 2,
                               {"near_frac": 0.05, "far_frac": 0.25},
                               "{0} is close to {1}"),
            RelationDescriptor("symmetrical_to", "symmetrical to", SYMMETRY, 2,
                               {}, "{0} is symmetrical to {1}"),
            RelationDescriptor("stretched", "stretched", STRETCHED, 1,
                               {}, "{0} is stretched"),
        ]
    )


def directional_vocabulary() -> Vocabulary:
    """Ablation catalogue containing only the 4 directional relations."""
    full = default_vocabulary()
    return Vocabulary([r for r in full if r.kind == DIRECTIONAL])


def save_vocabulary(vocab: Vocabulary, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": VOCABULARY_SCHEMA, "version": 1}) + "\n")
        for r in vocab:
            record = {
                "id": r.id,
                "name": r.name,
                "kind": r.kind,
                "arity": r.arity,
                "parameters": r.parameters,
                "template": r.template,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_vocabulary(path) -> Vocabulary:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise ValueError(f"empty vocabulary file {path}")
    header = json.loads(lines[0])
    if header.get("schema") != VOCABULARY_SCHEMA:
        raise ValueError(f"{path} is not a vocabulary file (schema {header.get('schema')!r})")
    relations = []
    for line in lines[1:]:
        rec = json.loads(line)
        relations.append(
            RelationDescriptor(rec["id"], rec["name"], rec["kind"], rec["arity"],
                               rec["parameters"], rec["template"])
        )
    return Vocabulary(relations)


@dataclass(frozen=True)
class Segment:
    id: int
    mask: ScalarField
    label: Optional[str] = None


class SegmentSet:
    """The segments of one image, sorted by id, masks sharing dimensions."""

    def __init__(self, image_id: str, segments):
        segs = tuple(sorted(segments, key=lambda s: s.id))
        if not segs:
            raise ValueError(f"image {image_id!r} has no segments")
        ids = [s.id for s in segs]
        if len(set(ids)) != len(ids):
            raise ValueError(f"image {image_id!r} has duplicate segment ids")
        shape = segs[0].mask.data.shape
        for s in segs:
            if s.mask.data.shape != shape:
                raise ValueError(
                    f"segment {s.id} of image {image_id!r} has mismatched dimensions"
                )
            if not (s.mask.data > 0).any():
                raise ValueError(f"segment {s.id} of image {image_id!r} has empty mask")
        self.image_id = image_id
        self.segments = segs

    def labels(self) -> dict:
        return {s.id: s.label for s in self.segments}

    def __len__(self):
        return len(self.segments)


@dataclass
class EvaluationTable:
    """Degrees of every evaluated (relation, ordered segment tuple) pair."""

    image_id: str
    entries: dict

    def degree(self, relation_id, segment_ids) -> float:
        return self.entries[(relation_id, tuple(segment_ids))]

    def restricted_to(self, relation_ids) -> "EvaluationTable":
        wanted = set(relation_ids)
        return EvaluationTable(
            self.image_id,
            {k: v for k, v in self.entries.items() if k[0] in wanted},
        )


def expected_entry_count(n_segments: int, vocab: Vocabulary) -> int:
    """Number of evaluations for one image: sum over relations of K!/(K-arity)!."""
    return sum(math.perm(n_segments, r.arity) for r in vocab)


def _support_coords(field: ScalarField) -> np.ndarray:
    """(x, y) pixel coordinates of strictly positive entries, row-major order."""
    ys, xs = np.nonzero(field.data > 0)
    return np.column_stack([xs, ys]).astype(np.float64)


def _reference_pixels(support: np.ndarray, cap: int) -> np.ndarray:
    """Reference (x, y) points for dilation, reduced to boundary pixels when large."""
    ys, xs = np.nonzero(support)
    if xs.size <= cap:
        return np.column_stack([xs, ys]).astype(np.float64)
    cross = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    eroded = ndimage.binary_erosion(support, structure=cross, border_value=0)
    boundary = support & ~eroded
    ys, xs = np.nonzero(boundary)
    pts = np.column_stack([xs, ys]).astype(np.float64)
    if pts.shape[0] > cap:
        idx = np.unique(np.linspace(0, pts.shape[0] - 1, cap).round().astype(int))
        pts = pts[idx]
    return pts


def directional_landscape(reference: ScalarField, direction_angle: float,
                          max_reference_pixels: int = MAX_REFERENCE_PIXELS) -> ScalarField:
    """Landscape of "in direction `direction_angle` from `reference`".

    A pixel x outside the reference support scores
    max(0, 1 - 2*theta/pi) for the smallest angle theta between (x - a) and
    the direction's unit vector over reference pixels a; the support itself
    scores 1 (the dilation includes the origin of the structuring element).
    """
    support = reference.data > 0
    if not support.any():
        raise ValueError("empty reference object")
    pts = _reference_pixels(support, max_reference_pixels)
    h, w = reference.data.shape
    u = np.array([math.cos(direction_angle), math.sin(direction_angle)])
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    pixels = np.column_stack([xs.ravel(), ys.ravel()])
    out = np.empty(h * w)
    chunk = 4096
    for start in range(0, pixels.shape[0], chunk):
        p = pixels[start:start + chunk]
        diff = p[:, None, :] - pts[None, :, :]
        dot = diff @ u
        norm = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        cos = np.divide(dot, norm, out=np.ones_like(dot), where=norm > 0)
        theta = np.arccos(np.clip(cos, -1.0, 1.0))
        out[start:start + chunk] = np.maximum(0.0, 1.0 - 2.0 * theta / math.pi).max(axis=1)
    grid = out.reshape(h, w)
    grid[support] = 1.0
    return ScalarField(grid)


def distance_landscape(reference: ScalarField, near_radius: float,
                       far_radius: float) -> ScalarField:
    """Landscape of "close to `reference`": 1 within near_radius of the
    support, decreasing linearly to 0 at far_radius."""
    if not (0 <= near_radius < far_radius):
        raise ValueError(
            f"invalid radii: near {near_radius!r} must be >= 0 and < far {far_radius!r}"
        )
    support = reference.data > 0
    if not support.any():
        raise ValueError("empty reference object")
    dist = ndimage.distance_transform_edt(~support)
    grid = np.clip((far_radius - dist) / (far_radius - near_radius), 0.0, 1.0)
    return ScalarField(grid)


def degree_of_intersection(landscape: ScalarField, target: ScalarField) -> float:
    """Normalized fuzzy overlap: sum of pointwise min over the smaller field sum."""
    if landscape.data.shape != target.data.shape:
        raise ValueError("degree_of_intersection requires equal dimensions")
    sum_l = float(landscape.data.sum())
    sum_t = float(target.data.sum())
    if sum_l == 0.0 or sum_t == 0.0:
        raise ValueError("degenerate intersection: a field is all-zero")
    overlap = float(np.minimum(landscape.data, target.data).sum())
    return clamp_degree(overlap / min(sum_l, sum_t))


def _line_normal(theta: float) -> np.ndarray:
    return np.array([math.cos(theta), math.sin(theta)])


def _image_center(shape) -> np.ndarray:
    h, w = shape
    return np.array([(w - 1) / 2.0, (h - 1) / 2.0])


def _mirror_points(points: np.ndarray, rho: float, theta: float,
                   center: np.ndarray) -> np.ndarray:
    n = _line_normal(theta)
    off = (points - center) @ n - rho
    return points - 2.0 * off[:, None] * n[None, :]


def reflect_field(field: ScalarField, line) -> ScalarField:
    """Mirror the field across a line.

    The line is (rho, theta): rho is the signed distance of the line from the
    image center along the normal (cos theta, sin theta).  Nearest-neighbor
    resampling; pixels whose mirror image falls outside the grid drop to 0.
    """
    rho, theta = line
    h, w = field.data.shape
    center = _image_center((h, w))
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    pts = np.stack([xs, ys], axis=-1).reshape(-1, 2)
    mirrored = _mirror_points(pts, rho, theta, center)
    ix = np.rint(mirrored[:, 0]).astype(np.int64)
    iy = np.rint(mirrored[:, 1]).astype(np.int64)
    inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    out = np.zeros(h * w)
    out[inside] = field.data[iy[inside], ix[inside]]
    return ScalarField(out.reshape(h, w))


def canonical_line(rho: float, theta: float):
    """Fold (rho, theta) into theta in [0, pi); rho flips sign with the normal."""
    t = math.fmod(theta, math.pi)
    if t < 0:
        t += math.pi
    k = round((theta - t) / math.pi)
    if k % 2 != 0:
        rho = -rho
    return rho, t


def line_difference(line_a, line_b):
    """(angle difference in radians, rho difference in pixels) between two
    lines, accounting for the sign ambiguity of the normal."""
    ra, ta = canonical_line(*line_a)
    rb, tb = canonical_line(*line_b)
    dt = abs(ta - tb)
    if dt <= math.pi / 2:
        return dt, abs(ra - rb)
    # Near-opposite normals: the angle wraps and one rho changes sign.
    return math.pi - dt, abs(ra + rb)


class _ReflectionOverlap:
    """Fuzzy Jaccard between reflect(a, line) and b, evaluated on supports only.

    Agrees exactly with the full-grid reflect_field computation: pointwise
    minima can be nonzero only on b's support, and the reflected field's
    support is covered by the 8-neighborhood of the forward-mirrored support
    of a (nearest-neighbor rounding moves a point by at most half a pixel).
    """

    _NEIGHBORHOOD = np.array([[dx, dy] for dx in (-1, 0, 1) for dy in (-1, 0, 1)],
                             dtype=np.int64)

    def __init__(self, a: ScalarField, b: ScalarField):
        self.a_data = a.data
        self.shape = a.data.shape
        self.center = _image_center(self.shape)
        self.a_support = _support_coords(a)
        ys, xs = np.nonzero(b.data > 0)
        self.b_coords = np.column_stack([xs, ys]).astype(np.float64)
        self.b_values = b.data[ys, xs]
        self.b_sum = float(b.data.sum())

    def _lookup(self, points: np.ndarray) -> np.ndarray:
        """Nearest-neighbor values of a at mirrored points; 0 outside the grid."""
        h, w = self.shape
        ix = np.rint(points[:, 0]).astype(np.int64)
        iy = np.rint(points[:, 1]).astype(np.int64)
        inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        vals = np.zeros(points.shape[0])
        vals[inside] = self.a_data[iy[inside], ix[inside]]
        return vals

    def jaccard(self, rho: float, theta: float) -> float:
        h, w = self.shape
        # Candidate pixels of the reflected field's support.
        fwd = _mirror_points(self.a_support, rho, theta, self.center)
        fwd_px = np.rint(fwd).astype(np.int64)
        cand = (fwd_px[:, None, :] + self._NEIGHBORHOOD[None, :, :]).reshape(-1, 2)
        keep = (cand[:, 0] >= 0) & (cand[:, 0] < w) & (cand[:, 1] >= 0) & (cand[:, 1] < h)
        cand = cand[keep]
        flat = np.unique(cand[:, 1] * w + cand[:, 0])
        cand_pts = np.column_stack([flat % w, flat // w]).astype(np.float64)
        refl_sum = float(
            self._lookup(_mirror_points(cand_pts, rho, theta, self.center)).sum()
        )
        refl_at_b = self._lookup(_mirror_points(self.b_coords, rho, theta, self.center))
        overlap = float(np.minimum(refl_at_b, self.b_values).sum())
        union = refl_sum + self.b_sum - overlap
        if union <= 0:
            return 0.0
        return overlap / union


def _weighted_centroid(field: ScalarField) -> np.ndarray:
    coords = _support_coords(field)
    weights = field.data[field.data > 0]
    return (coords * weights[:, None]).sum(axis=0) / weights.sum()


def symmetry_degree(a: ScalarField, b: ScalarField, max_iterations: int = 200,
                    tolerance: float = 1e-4):
    """Best mirror line between a and b and the overlap it attains.

    Maximizes the fuzzy Jaccard between reflect(a, line) and b over
    (rho, theta) with Nelder-Mead, starting from the perpendicular bisector
    of the two centroids, with restarts at +/-15 degrees.  Returns
    (degree, (rho, theta)) with the line in canonical form.
    """
    if a.data.shape != b.data.shape:
        raise ValueError("symmetry_degree requires equal dimensions")
    if not (a.data > 0).any() or not (b.data > 0).any():
        raise ValueError("empty field in symmetry search")
    overlap = _ReflectionOverlap(a, b)
    center = _image_center(a.data.shape)
    ca = _weighted_centroid(a)
    cb = _weighted_centroid(b)
    midpoint = (ca + cb) / 2.0
    delta = cb - ca
    if np.hypot(*delta) < 1e-9:
        base_theta = 0.0
    else:
        base_theta = math.atan2(delta[1], delta[0])

    def objective(params):
        return -overlap.jaccard(params[0], params[1])

    best_val = -math.inf
    best_line = None
    for offset in (0.0, math.radians(15.0), math.radians(-15.0)):
        theta0 = base_theta + offset
        rho0 = float((midpoint - center) @ _line_normal(theta0))
        x0 = np.array([rho0, theta0])
        simplex = np.array([x0, x0 + [5.0, 0.0], x0 + [0.0, math.radians(5.0)]])
        result = optimize.minimize(
            objective, x0, method="Nelder-Mead",
            options={"maxiter": max_iterations, "fatol": tolerance,
                     "xatol": 1e-3, "initial_simplex": simplex},
        )
        if -result.fun > best_val:
            best_val = -result.fun
            best_line = result.x
    rho, theta = canonical_line(float(best_line[0]), float(best_line[1]))
    return clamp_degree(best_val), (rho, theta)


def stretched_degree(mask: ScalarField) -> float:
    """Elongation in [0, 1]: one minus the minor/major extent ratio of the
    support projected on its two (degree-weighted) principal axes."""
    coords = _support_coords(mask)
    if coords.shape[0] < 2:
        raise ValueError("degenerate shape: support has fewer than 2 pixels")
    weights = mask.data[mask.data > 0]
    mean = (coords * weights[:, None]).sum(axis=0) / weights.sum()
    centered = coords - mean
    cov = (centered * weights[:, None]).T @ centered / weights.sum()
    _, eigvecs = np.linalg.eigh(cov)
    projections = centered @ eigvecs
    extents = projections.max(axis=0) - projections.min(axis=0)
    e_major = float(extents.max())
    e_minor = float(extents.min())
    if e_major <= 0:
        raise ValueError("degenerate shape: support pixels coincide")
    return clamp_degree(1.0 - e_minor / e_major)


def evaluate_vocabulary(segments: SegmentSet, vocab: Vocabulary) -> EvaluationTable:
    """Evaluate every relation of the vocabulary on every ordered tuple of
    distinct segments.

    Landscapes are shared across targets with the same reference, and the
    symmetry measure (symmetric by construction) is computed once per
    unordered pair.  A single failed evaluation records degree 0 with a
    warning instead of aborting the table.
    """
    segs = segments.segments
    h, w = segs[0].mask.data.shape
    diagonal = math.hypot(w, h)
    entries = {}
    landscapes = {}
    symmetry_cache = {}

    def guarded(key, compute):
        try:
            return compute()
        except Exception as exc:
            logger.warning("evaluation of %s failed (%s); recording degree 0", key, exc)
            return 0.0

    def landscape_for(rel, reference):
        cache_key = (rel.id, reference.id)
        if cache_key not in landscapes:
            if rel.kind == DIRECTIONAL:
                landscapes[cache_key] = directional_landscape(
                    reference.mask, rel.parameters["angle"])
            else:
                landscapes[cache_key] = distance_landscape(
                    reference.mask,
                    rel.parameters["near_frac"] * diagonal,
                    rel.parameters["far_frac"] * diagonal)
        return landscapes[cache_key]

    for rel in vocab:
        if rel.arity == 1:
            for seg in segs:
                key = (rel.id, (seg.id,))
                entries[key] = guarded(key, lambda s=seg: stretched_degree(s.mask))
            continue
        for subject in segs:
            for reference in segs:
                if subject.id == reference.id:
                    continue
                key = (rel.id, (subject.id, reference.id))
                if rel.kind in (DIRECTIONAL, DISTANCE):
                    entries[key] = guarded(
                        key,
                        lambda r=rel, s=subject, o=reference: degree_of_intersection(
                            landscape_for(r, o), s.mask),
                    )
                elif rel.kind == SYMMETRY:
                    pair = (min(subject.id, reference.id), max(subject.id, reference.id))
                    if pair not in symmetry_cache:
                        lo = next(s for s in segs if s.id == pair[0])
                        hi = next(s for s in segs if s.id == pair[1])
                        symmetry_cache[pair] = guarded(
                            (rel.id, pair),
                            lambda: symmetry_degree(lo.mask, hi.mask)[0],
                        )
                    entries[key] = symmetry_cache[pair]
                else:
                    raise ValueError(f"relation {rel.id!r} has arity 2 but kind {rel.kind!r}")
    return EvaluationTable(segments.image_id, entries)
