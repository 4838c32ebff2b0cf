"""Overlap enumeration and Siamese training-pair construction."""

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptyDatasetError, ParseError
from .geometry import OverlapLabel, overlap_fraction

PAIR_HEADER = ["query_id", "ref_id", "overlap", "polarity", "flip_h", "flip_v", "rotation_rad"]
REF_AUG_HEADER = ["ref_flip_h", "ref_flip_v", "ref_rotation_rad"]
MAX_ROTATION = math.pi / 4


@dataclass(frozen=True)
class AugmentSpec:
    flip_h: bool = False
    flip_v: bool = False
    rotation: float = 0.0

    def __post_init__(self):
        if abs(self.rotation) > MAX_ROTATION + 1e-12:
            raise ValueError(f"rotation {self.rotation} outside +-pi/4")

    @property
    def is_identity(self):
        return not self.flip_h and not self.flip_v and self.rotation == 0.0

    @classmethod
    def random(cls, rng):
        return cls(bool(rng.integers(2)), bool(rng.integers(2)),
                   float(rng.uniform(-MAX_ROTATION, MAX_ROTATION)))


@dataclass(frozen=True)
class PairSample:
    query_id: str
    ref_id: str
    overlap: float
    polarity: str
    augmentation: AugmentSpec = AugmentSpec()
    # set only when the two images are augmented independently
    ref_augmentation: AugmentSpec = None

    def __post_init__(self):
        if self.polarity == "positive" and self.overlap < 0.2 - 1e-12:
            # the floor can be raised by callers but never lowered below 20%
            raise ValueError(f"positive pair with overlap {self.overlap}")
        if self.polarity == "negative" and self.overlap != 0.0:
            raise ValueError(f"negative pair with overlap {self.overlap}")
        if self.polarity not in ("positive", "negative"):
            raise ValueError(f"unknown polarity {self.polarity!r}")

    @property
    def ref_spec(self):
        return self.ref_augmentation if self.ref_augmentation is not None else self.augmentation


def _centers(images):
    return np.array([[im.pose.x, im.pose.y] for im in images]).reshape(-1, 2)


def enumerate_overlaps(mapset, min_overlap=0.0):
    """Labelled (query, reference) pairs with overlap >= ``min_overlap``.

    With ``min_overlap == 0`` every pair is returned, pre-filtered pairs
    carrying an exact 0.0 label.
    """
    refs = mapset.references
    ref_fps = [r.footprint for r in refs]
    centers = _centers(refs)
    labels = []
    for q in mapset.queries:
        qfp = q.footprint
        if len(refs):
            reach = 0.5 * (qfp.diagonal + np.array([fp.diagonal for fp in ref_fps]))
            near = np.hypot(centers[:, 0] - q.pose.x, centers[:, 1] - q.pose.y) < reach
        for j, r in enumerate(refs):
            o = overlap_fraction(qfp, ref_fps[j]) if near[j] else 0.0
            if o >= min_overlap:
                labels.append(OverlapLabel(q.id, r.id, o))
    return labels


def overlap_table(mapset):
    """{query_id: {ref_id: overlap}} restricted to strictly positive overlaps."""
    table = {q.id: {} for q in mapset.queries}
    for lab in enumerate_overlaps(mapset, min_overlap=1e-12):
        table[lab.query_id][lab.ref_id] = lab.overlap
    return table


def build_training_pairs(mapset, min_pos_overlap=0.20, augment_factor=1, seed=0,
                         independent_augment=False):
    """Shuffled positives (>= min_pos_overlap, augmented) plus equal-count negatives."""
    labels = enumerate_overlaps(mapset, min_overlap=0.0)
    positives = [lab for lab in labels if lab.overlap >= min_pos_overlap]
    zeros = [lab for lab in labels if lab.overlap == 0.0]
    if not positives:
        raise EmptyDatasetError(f"no query-reference pair reaches {min_pos_overlap:.0%} overlap")
    if not zeros:
        raise EmptyDatasetError("no non-overlapping pair available for negatives")
    rng = np.random.default_rng([seed, 3])

    def draw():
        spec = AugmentSpec.random(rng)
        return spec, (AugmentSpec.random(rng) if independent_augment else None)

    samples = []
    for lab in positives:
        for _ in range(augment_factor):
            spec, ref_spec = draw()
            samples.append(PairSample(lab.query_id, lab.ref_id, lab.overlap, "positive", spec, ref_spec))
    n_pos = len(samples)
    replace = len(zeros) < n_pos
    picks = rng.choice(len(zeros), size=n_pos, replace=replace)
    for idx in picks:
        lab = zeros[idx]
        spec, ref_spec = draw()
        samples.append(PairSample(lab.query_id, lab.ref_id, 0.0, "negative", spec, ref_spec))
    order = rng.permutation(len(samples))
    return [samples[i] for i in order]


def apply_augmentation(image, spec):
    """Flip, then rotate about the raster center with reflected borders."""
    pixels = image.pixels if hasattr(image, "pixels") else np.asarray(image)
    if spec.is_identity:
        return pixels.copy()
    out = pixels
    if spec.flip_h:
        out = out[:, ::-1]
    if spec.flip_v:
        out = out[::-1, :]
    if spec.rotation != 0.0:
        h, w = out.shape
        rr, cc = np.indices((h, w), dtype=float)
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        c, s = math.cos(spec.rotation), math.sin(spec.rotation)
        # inverse mapping: output pixel looks up the source at R(-rot)
        src_c = c * (cc - cx) + s * (rr - cy) + cx
        src_r = -s * (cc - cx) + c * (rr - cy) + cy
        rotated = ndimage.map_coordinates(out.astype(np.float64), [src_r, src_c], order=1, mode="reflect")
        if pixels.dtype == np.uint8:
            return np.clip(np.rint(rotated), 0, 255).astype(np.uint8)
        return rotated.astype(pixels.dtype)
    return np.ascontiguousarray(out)


def write_pairs(samples, path):
    independent = any(s.ref_augmentation is not None for s in samples)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PAIR_HEADER + (REF_AUG_HEADER if independent else []))
        for s in samples:
            a = s.augmentation
            row = [s.query_id, s.ref_id, repr(s.overlap), s.polarity, int(a.flip_h), int(a.flip_v), repr(a.rotation)]
            if independent:
                r = s.ref_spec
                row += [int(r.flip_h), int(r.flip_v), repr(r.rotation)]
            writer.writerow(row)


def read_pairs(path):
    samples = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header not in (PAIR_HEADER, PAIR_HEADER + REF_AUG_HEADER):
            raise ParseError(f"{path}:1: unexpected pair-list header")
        for lineno, row in enumerate(reader, start=2):
            try:
                spec = AugmentSpec(row[4] == "1", row[5] == "1", float(row[6]))
                ref_spec = None
                if len(header) > len(PAIR_HEADER):
                    ref_spec = AugmentSpec(row[7] == "1", row[8] == "1", float(row[9]))
                samples.append(PairSample(row[0], row[1], float(row[2]), row[3], spec, ref_spec))
            except (IndexError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    return samples
