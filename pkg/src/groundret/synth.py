"""Procedural ground textures, posed patch rendering and map sets.

A canvas is a large grayscale raster standing in for a floor. Every style
combines a fine texture, which carries the local keypoints, with smooth
random fields that vary contrast, scale and tone across the floor the way
wear, stains and material batches do on real surfaces.
"""

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage, signal

from .errors import InvalidArgument, OutOfBoundsError, ParseError, ResourceLimitError
from .geometry import Pose2D, footprint_from_pose, overlap_fraction

STYLES = ("blob", "fiber", "speckle", "crack", "grid", "grain")
MANIFEST_HEADER = ["id", "path", "x_m", "y_m", "theta_rad", "width_m", "height_m", "role"]
DEFAULT_MAX_PIXELS = 64_000_000


@dataclass
class TextureCanvas:
    pixels: np.ndarray
    resolution: float
    seed: int
    style: str

    @property
    def extent(self):
        h, w = self.pixels.shape
        return (w / self.resolution, h / self.resolution)


@dataclass
class GroundImage:
    id: str
    pixels: np.ndarray
    pose: Pose2D
    width: float
    height: float

    @property
    def footprint(self):
        return footprint_from_pose(self.pose, self.width, self.height)

    @property
    def meters_per_px(self):
        return self.width / self.pixels.shape[1]


@dataclass
class MapSet:
    references: list
    queries: list
    canvas_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ref_ids = [r.id for r in self.references]
        q_ids = [q.id for q in self.queries]
        if len(set(ref_ids)) != len(ref_ids):
            raise InvalidArgument("duplicate reference id")
        if len(set(q_ids)) != len(q_ids):
            raise InvalidArgument("duplicate query id")
        if set(ref_ids) & set(q_ids):
            raise InvalidArgument("query ids overlap reference ids")

    def image(self, image_id):
        if not hasattr(self, "_lookup"):
            self._lookup = {im.id: im for im in self.references + self.queries}
        return self._lookup[image_id]


@dataclass(frozen=True)
class NoiseSpec:
    """Appearance perturbations applied to query renders.

    Each query draws its own brightness offset in +-``brightness``, contrast
    factor in 1 +- ``contrast``, up to ``occluders`` blobs and a motion blur
    of up to ``blur_px`` pixels.
    """

    pixel_sigma: float = 0.0
    brightness: float = 0.0
    contrast: float = 0.0
    occluders: int = 0
    occluder_radius: tuple = (0.008, 0.02)
    blur_px: float = 0.0

    @property
    def is_zero(self):
        return (self.pixel_sigma == 0 and self.brightness == 0 and self.contrast == 0
                and self.occluders == 0 and self.blur_px == 0)


# ---------------------------------------------------------------------------
# canvas generation


def _smooth_field(rng, shape, corr_px):
    """Zero-mean, unit-std random field with correlation length ~corr_px."""
    step = max(corr_px / 2.0, 1.0)
    ch = int(math.ceil(shape[0] / step)) + 4
    cw = int(math.ceil(shape[1] / step)) + 4
    coarse = ndimage.gaussian_filter(rng.standard_normal((ch, cw)), 0.8, mode="wrap")
    rows = np.arange(shape[0]) / step + 2.0
    cols = np.arange(shape[1]) / step + 2.0
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    out = ndimage.map_coordinates(coarse, [rr, cc], order=3, mode="nearest")
    out -= out.mean()
    return out / (out.std() + 1e-12)


def _bandpass(rng, shape, sigma):
    noise = rng.standard_normal(shape)
    out = ndimage.gaussian_filter(noise, sigma) - ndimage.gaussian_filter(noise, 2.0 * sigma)
    return out / (out.std() + 1e-12)


def _splat(shape, rows, cols, amps, sigma):
    img = np.zeros(shape)
    r = np.clip(np.rint(rows).astype(int), 0, shape[0] - 1)
    c = np.clip(np.rint(cols).astype(int), 0, shape[1] - 1)
    np.add.at(img, (r, c), amps)
    return ndimage.gaussian_filter(img, sigma) * (2.0 * math.pi * sigma * sigma)


def _sparsify(t, power):
    out = np.sign(t) * np.abs(t) ** power
    return out / (out.std() + 1e-12)


def _mix(a, b, weight):
    return (1.0 - weight) * a + weight * b


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _style_speckle(rng, shape, res, fields):
    return _mix(_bandpass(rng, shape, 1.3), _bandpass(rng, shape, 3.5), _sigmoid(1.8 * fields[1]))


def _style_blob(rng, shape, res, fields):
    area_m2 = shape[0] * shape[1] / res**2
    img = np.zeros(shape)
    density = _sigmoid(2.0 * fields[0])
    size_bias = _sigmoid(2.0 * fields[1])
    for i, (sigma, per_m2) in enumerate(((1.6, 9000.0), (3.0, 2500.0), (5.5, 800.0))):
        n = rng.poisson(per_m2 * area_m2)
        rows = rng.uniform(0, shape[0], n)
        cols = rng.uniform(0, shape[1], n)
        ri, ci = rows.astype(int), cols.astype(int)
        p_keep = density[ri, ci] * (size_bias[ri, ci] if i else 1.0 - 0.7 * size_bias[ri, ci])
        keep = rng.uniform(size=n) < p_keep
        amps = rng.choice([-1.0, 1.0], size=n) * rng.uniform(0.5, 1.0, n)
        img += _splat(shape, rows[keep], cols[keep], amps[keep], sigma)
    return img + 0.1 * _bandpass(rng, shape, 1.0)


def _oriented_kernel(theta, along, across):
    half = int(math.ceil(3 * along))
    y, x = np.mgrid[-half:half + 1, -half:half + 1].astype(float)
    u = x * math.cos(theta) + y * math.sin(theta)
    v = -x * math.sin(theta) + y * math.cos(theta)
    k = np.exp(-0.5 * (u / along) ** 2 - 0.5 * (v / across) ** 2)
    return k / k.sum()


def _style_fiber(rng, shape, res, fields):
    noise = rng.standard_normal(shape)
    n_orient = 8
    orient = math.pi * _smooth_field(rng, shape, 0.2 * res)
    out = np.zeros(shape)
    weight = np.zeros(shape)
    for i in range(n_orient):
        theta = math.pi * i / n_orient
        resp = signal.fftconvolve(noise, _oriented_kernel(theta, 5.0, 0.9), mode="same")
        w = np.cos(orient - theta) ** 8
        out += w * resp
        weight += w
    out /= weight
    out = out - ndimage.gaussian_filter(out, 6.0)
    out /= out.std() + 1e-12
    return _mix(out, _bandpass(rng, shape, 1.5), 0.8 * _sigmoid(2.0 * fields[1]))


def _draw_paths(rng, shape, n_paths, steps, step_len):
    pts_r, pts_c = [], []
    for _ in range(n_paths):
        r, c = rng.uniform(0, shape[0]), rng.uniform(0, shape[1])
        heading = rng.uniform(0, 2 * math.pi)
        for _ in range(steps):
            heading += rng.normal(0, 0.25)
            for t in np.linspace(0, step_len, int(step_len * 2) + 1):
                pts_r.append(r + t * math.sin(heading))
                pts_c.append(c + t * math.cos(heading))
            r += step_len * math.sin(heading)
            c += step_len * math.cos(heading)
    pts_r, pts_c = np.array(pts_r), np.array(pts_c)
    inside = (pts_r >= 0) & (pts_r < shape[0]) & (pts_c >= 0) & (pts_c < shape[1])
    img = np.zeros(shape)
    np.add.at(img, (pts_r[inside].astype(int), pts_c[inside].astype(int)), 1.0)
    return np.minimum(ndimage.gaussian_filter(img, 0.9), 0.25) / 0.25


def _style_crack(rng, shape, res, fields):
    area_m2 = shape[0] * shape[1] / res**2
    base = _mix(_bandpass(rng, shape, 1.5), _bandpass(rng, shape, 5.0), _sigmoid(2.0 * fields[1]))
    cracks = _draw_paths(rng, shape, int(18 * area_m2), 12, 0.025 * res)
    n = rng.poisson(2500 * area_m2)
    rows, cols = rng.uniform(0, shape[0], n), rng.uniform(0, shape[1], n)
    density = _sigmoid(2.5 * fields[0])
    keep = rng.uniform(size=n) < density[rows.astype(int), cols.astype(int)]
    pores = _splat(shape, rows[keep], cols[keep], -rng.uniform(0.6, 1.2, keep.sum()), 2.0)
    return 0.5 * base - 3.0 * cracks + 1.5 * pores


def _style_grid(rng, shape, res, fields):
    tile = int(round(0.1 * res))
    n_r, n_c = shape[0] // tile + 2, shape[1] // tile + 2
    tone = rng.uniform(-0.6, 0.6, (n_r, n_c))
    rr, cc = np.indices(shape)
    ti, tj = rr // tile, cc // tile
    tex = _mix(_bandpass(rng, shape, 1.2), _bandpass(rng, shape, 3.0), _sigmoid(2.0 * fields[1]))
    img = tone[ti, tj] + 0.6 * tex
    grout = ((rr % tile) < 2) | ((cc % tile) < 2)
    img[grout] = -2.0
    return ndimage.gaussian_filter(img, 0.7)


def _style_grain(rng, shape, res, fields):
    plank = int(round(0.12 * res))
    rr, cc = np.indices(shape, dtype=float)
    idx = (rr // plank).astype(int)
    n_planks = idx.max() + 1
    period = (10.0 + 14.0 * _sigmoid(2.0 * fields[1])) * rng.uniform(0.85, 1.15, n_planks)[idx]
    phase = rng.uniform(0, 2 * math.pi, n_planks)[idx]
    offset = rng.uniform(0, 4000, n_planks)[idx]
    warp = 25.0 * _smooth_field(rng, shape, 0.08 * res)
    rings = np.sin(2 * math.pi * (rr + warp + 0.02 * (cc + offset)) / period + phase)
    img = 0.8 * rings + 0.3 * _bandpass(rng, shape, 1.2)
    img += 0.5 * rng.uniform(-1, 1, n_planks)[idx]
    img[(rr % plank) < 2] = -2.0
    return ndimage.gaussian_filter(img, 0.8)


_STYLE_FUNCS = {
    "speckle": _style_speckle,
    "blob": _style_blob,
    "fiber": _style_fiber,
    "crack": _style_crack,
    "grid": _style_grid,
    "grain": _style_grain,
}


def generate_canvas(style, extent, resolution, seed, max_pixels=DEFAULT_MAX_PIXELS, field_scale=0.8,
                    field_strength=1.0):
    """Render a seeded texture canvas covering ``extent`` = (width_m, height_m)."""
    if style not in _STYLE_FUNCS:
        raise InvalidArgument(f"unknown style {style!r}; expected one of {STYLES}")
    w_m, h_m = extent
    if w_m <= 0 or h_m <= 0 or resolution <= 0:
        raise InvalidArgument("extent and resolution must be positive")
    shape = (int(math.ceil(h_m * resolution)), int(math.ceil(w_m * resolution)))
    if shape[0] * shape[1] > max_pixels:
        raise ResourceLimitError(
            f"canvas of {shape[1]}x{shape[0]} px exceeds budget of {max_pixels} px")
    rng = np.random.default_rng([seed, STYLES.index(style)])
    # slow fields: feature sparsity, feature scale, cloudiness, contrast
    fields = [field_strength * _smooth_field(rng, shape, field_scale * resolution) for _ in range(4)]
    tex = _STYLE_FUNCS[style](rng, shape, resolution, fields)
    tex = (tex - tex.mean()) / (tex.std() + 1e-12)
    tex = _mix(tex, _sparsify(tex, 1.8), _sigmoid(2.0 * fields[0]))
    cloud = _smooth_field(rng, shape, 0.05 * resolution)
    tex = tex + 1.2 * _sigmoid(2.0 * fields[2]) * cloud
    tex = (tex - tex.mean()) / (tex.std() + 1e-12)
    img = 128.0 + 38.0 * np.exp(0.3 * fields[3]) * tex
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return TextureCanvas(pixels=pixels, resolution=float(resolution), seed=seed, style=style)


# ---------------------------------------------------------------------------
# rendering


def _sample_grid(pose, width, height, out_shape):
    rows, cols = out_shape
    lx = (np.arange(cols) + 0.5 - cols / 2.0) * (width / cols)
    ly = (np.arange(rows) + 0.5 - rows / 2.0) * (height / rows)
    gx, gy = np.meshgrid(lx, ly)
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    return c * gx - s * gy + pose.x, s * gx + c * gy + pose.y


def footprint_inside(pose, width, height, extent):
    fp = footprint_from_pose(pose, width, height)
    return all(0.0 <= x <= extent[0] and 0.0 <= y <= extent[1] for x, y in fp.corners)


def render_float(canvas, pose, width, height, out_shape=(96, 128)):
    if not footprint_inside(pose, width, height, canvas.extent):
        raise OutOfBoundsError(f"footprint at {pose} leaves canvas extent {canvas.extent}")
    wx, wy = _sample_grid(pose, width, height, out_shape)
    cols = wx * canvas.resolution - 0.5
    rows = wy * canvas.resolution - 0.5
    return ndimage.map_coordinates(canvas.pixels.astype(np.float32), [rows, cols],
                                   order=1, mode="nearest")


def _quantize(img):
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def render_patch(canvas, pose, width=0.2, height=0.15, out_shape=(96, 128), image_id=""):
    """Bilinearly sample the canvas under the rotated footprint of ``pose``."""
    if not isinstance(pose, Pose2D):
        pose = Pose2D(*pose)
    pixels = _quantize(render_float(canvas, pose, width, height, out_shape))
    return GroundImage(id=image_id, pixels=pixels, pose=pose, width=width, height=height)


def perturb(img, noise, rng, meters_per_px):
    """Apply one random draw of ``noise`` to a float raster."""
    if noise.is_zero:
        return img
    out = img.astype(np.float64)
    if noise.blur_px > 0:
        length = rng.uniform(0.0, noise.blur_px)
        if length >= 1.0:
            angle = rng.uniform(0.0, math.pi)
            half = int(math.ceil(length / 2.0))
            ky, kx = np.mgrid[-half:half + 1, -half:half + 1].astype(float)
            dist_along = kx * math.cos(angle) + ky * math.sin(angle)
            dist_across = -kx * math.sin(angle) + ky * math.cos(angle)
            kernel = ((np.abs(dist_along) <= length / 2.0) & (np.abs(dist_across) <= 0.5)).astype(float)
            out = ndimage.convolve(out, kernel / kernel.sum(), mode="reflect")
    if noise.contrast > 0 or noise.brightness > 0:
        gain = 1.0 + rng.uniform(-noise.contrast, noise.contrast)
        offset = rng.uniform(-noise.brightness, noise.brightness)
        out = (out - 128.0) * gain + 128.0 + offset
    if noise.occluders > 0:
        rows, cols = np.indices(out.shape)
        for _ in range(rng.integers(0, noise.occluders + 1)):
            radius = rng.uniform(*noise.occluder_radius) / meters_per_px
            cr, cc = rng.uniform(0, out.shape[0]), rng.uniform(0, out.shape[1])
            aspect = rng.uniform(0.5, 1.0)
            mask = ((rows - cr) / (radius * aspect)) ** 2 + ((cols - cc) / radius) ** 2 <= 1.0
            out[mask] = rng.uniform(20, 235)
    if noise.pixel_sigma > 0:
        out = out + rng.normal(0.0, noise.pixel_sigma, out.shape)
    return out


# ---------------------------------------------------------------------------
# map sets


def generate_mapset(canvas, grid_spacing=0.12, jitter=0.01, n_queries=0, query_noise=NoiseSpec(),
                    seed=0, width=0.2, height=0.15, out_shape=(96, 128),
                    ref_heading_range=(-math.pi, math.pi), query_heading_range=(-math.pi, math.pi),
                    id_prefix=""):
    """Reference patches on a jittered grid plus independently posed queries."""
    if grid_spacing <= 0 or grid_spacing >= min(width, height):
        raise InvalidArgument(
            f"grid spacing {grid_spacing} must be positive and below the patch size {min(width, height)}")
    if n_queries < 0:
        raise InvalidArgument("n_queries must be >= 0")
    ext_w, ext_h = canvas.extent
    margin = 0.5 * math.hypot(width, height) + 1e-6
    if ext_w <= 2 * margin or ext_h <= 2 * margin:
        raise InvalidArgument("canvas too small for a single footprint")
    rng = np.random.default_rng([seed, 17])
    mpp = width / out_shape[1]

    xs = np.arange(margin, ext_w - margin + 1e-9, grid_spacing)
    ys = np.arange(margin, ext_h - margin + 1e-9, grid_spacing)
    refs = []
    for y in ys:
        for x in xs:
            px = float(np.clip(x + rng.uniform(-jitter, jitter), margin, ext_w - margin))
            py = float(np.clip(y + rng.uniform(-jitter, jitter), margin, ext_h - margin))
            theta = float(rng.uniform(*ref_heading_range)) if ref_heading_range[1] > ref_heading_range[0] \
                else float(ref_heading_range[0])
            pose = Pose2D(px, py, theta)
            refs.append(render_patch(canvas, pose, width, height, out_shape,
                                     image_id=f"{id_prefix}r{len(refs):04d}"))

    queries = []
    for i in range(n_queries):
        px = float(rng.uniform(margin, ext_w - margin))
        py = float(rng.uniform(margin, ext_h - margin))
        theta = float(rng.uniform(*query_heading_range)) if query_heading_range[1] > query_heading_range[0] \
            else float(query_heading_range[0])
        pose = Pose2D(px, py, theta)
        img = render_float(canvas, pose, width, height, out_shape)
        noise_rng = np.random.default_rng([seed, 29, i])
        pixels = _quantize(perturb(img, query_noise, noise_rng, mpp))
        queries.append(GroundImage(f"{id_prefix}q{i:04d}", pixels, pose, width, height))

    meta = {"seed": seed, "style": canvas.style, "extent_m": [ext_w, ext_h],
            "resolution": canvas.resolution, "canvas_seed": canvas.seed}
    return MapSet(references=refs, queries=queries, canvas_meta=meta)


def query_coverage(mapset, min_overlap=0.2):
    """Fraction of queries with at least one reference overlapping >= min_overlap."""
    if not mapset.queries:
        return 1.0
    hits = 0
    ref_fps = [(r, r.footprint) for r in mapset.references]
    for q in mapset.queries:
        qfp = q.footprint
        if any(overlap_fraction(qfp, rfp) >= min_overlap for _, rfp in ref_fps):
            hits += 1
    return hits / len(mapset.queries)


# ---------------------------------------------------------------------------
# manifest IO


def _load_raster(path):
    with Image.open(path) as im:
        return np.array(im.convert("L"), dtype=np.uint8)


def ingest_mapset(manifest_path):
    """Load a posed image set from a CSV manifest."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    refs, queries, seen = [], [], set()
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise ParseError(f"{manifest_path}:1: expected header {','.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ParseError(f"{manifest_path}:{lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
            image_id, rel_path, *nums, role = [cell.strip() for cell in row]
            try:
                x, y, theta, w, h = (float(v) for v in nums)
            except ValueError as exc:
                raise ParseError(f"{manifest_path}:{lineno}: row {image_id!r}: {exc}") from None
            if not all(math.isfinite(v) for v in (x, y, theta, w, h)):
                raise ParseError(f"{manifest_path}:{lineno}: row {image_id!r} has a non-finite value")
            if w <= 0 or h <= 0:
                raise ParseError(f"{manifest_path}:{lineno}: row {image_id!r} has non-positive size")
            if role not in ("reference", "query"):
                raise ParseError(f"{manifest_path}:{lineno}: unknown role {role!r}")
            if image_id in seen:
                raise ParseError(f"{manifest_path}:{lineno}: duplicate id {image_id!r}")
            seen.add(image_id)
            path = rel_path if os.path.isabs(rel_path) else os.path.join(base, rel_path)
            if not os.path.exists(path):
                raise FileNotFoundError(f"{manifest_path}:{lineno}: missing image file {path}")
            pixels = _load_raster(path)
            if abs(pixels.shape[1] / pixels.shape[0] - w / h) * pixels.shape[0] > 1.0:
                raise ParseError(f"{manifest_path}:{lineno}: raster aspect does not match {w}x{h} m")
            img = GroundImage(image_id, pixels, Pose2D(x, y, theta), w, h)
            (refs if role == "reference" else queries).append(img)
    return MapSet(references=refs, queries=queries, canvas_meta={"manifest": os.path.abspath(manifest_path)})


def save_mapset(mapset, out_dir, image_format="png"):
    """Write images plus ``manifest.csv``; returns the manifest path."""
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for role, images in (("reference", mapset.references), ("query", mapset.queries)):
            for im in images:
                rel = f"images/{im.id.replace('/', '_')}.{image_format}"
                Image.fromarray(im.pixels).save(os.path.join(out_dir, rel))
                writer.writerow([im.id, rel, repr(im.pose.x), repr(im.pose.y), repr(im.pose.theta),
                                 repr(im.width), repr(im.height), role])
    return manifest
