"""Difference-of-Gaussians keypoints with gradient-histogram descriptors.

A compact SIFT-like pair: extrema of a single-resolution DoG stack with an
edge-response filter, one dominant orientation per keypoint, and a 4x4x8
descriptor sampled on a rotated grid.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

SIGMA0 = 1.0
LEVELS_PER_OCTAVE = 3
N_LEVELS = 8
CONTRAST_THRESHOLD = 1.0
EDGE_RATIO = 10.0
DESC_CELLS = 4
DESC_BINS = 8
DESC_SAMPLES = 16


@dataclass
class LocalFeatures:
    """Keypoints as parallel arrays; ``xy`` is (col, row) in pixels."""

    xy: np.ndarray
    scale: np.ndarray
    response: np.ndarray
    orientation: np.ndarray
    descriptors: np.ndarray

    def __len__(self):
        return len(self.response)

    def head(self, n):
        return LocalFeatures(self.xy[:n], self.scale[:n], self.response[:n],
                             self.orientation[:n], self.descriptors[:n])

    @classmethod
    def empty(cls, dim=DESC_CELLS * DESC_CELLS * DESC_BINS):
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros(0), np.zeros(0), np.zeros((0, dim)))


def _scale_space(img):
    k = 2.0 ** (1.0 / LEVELS_PER_OCTAVE)
    sigmas = [SIGMA0 * k ** i for i in range(N_LEVELS + 1)]
    gauss = np.stack([ndimage.gaussian_filter(img, s, mode="reflect") for s in sigmas])
    return np.array(sigmas), gauss, gauss[1:] - gauss[:-1]


def _subpixel(d, idx_r, idx_c, lvl):
    # independent parabola fits along each image axis
    c0 = d[lvl, idx_r, idx_c]
    dr = 0.5 * (d[lvl, idx_r + 1, idx_c] - d[lvl, idx_r - 1, idx_c])
    drr = d[lvl, idx_r + 1, idx_c] - 2 * c0 + d[lvl, idx_r - 1, idx_c]
    dc = 0.5 * (d[lvl, idx_r, idx_c + 1] - d[lvl, idx_r, idx_c - 1])
    dcc = d[lvl, idx_r, idx_c + 1] - 2 * c0 + d[lvl, idx_r, idx_c - 1]
    off_r = np.where(np.abs(drr) > 1e-12, -dr / np.where(np.abs(drr) > 1e-12, drr, 1.0), 0.0)
    off_c = np.where(np.abs(dcc) > 1e-12, -dc / np.where(np.abs(dcc) > 1e-12, dcc, 1.0), 0.0)
    return np.clip(off_r, -0.5, 0.5), np.clip(off_c, -0.5, 0.5), drr, dcc


def _orientations(gy, gx, rows, cols, sigma):
    """Dominant gradient direction in a Gaussian-weighted window."""
    n = len(rows)
    radius = 3
    offs = np.arange(-radius, radius + 1)
    orr, occ = np.meshgrid(offs, offs, indexing="ij")
    scale = sigma[:, None, None]
    sr = rows[:, None, None] + orr[None] * scale
    sc = cols[:, None, None] + occ[None] * scale
    vx = ndimage.map_coordinates(gx, [sr, sc], order=1, mode="nearest")
    vy = ndimage.map_coordinates(gy, [sr, sc], order=1, mode="nearest")
    mag = np.hypot(vx, vy) * np.exp(-(orr**2 + occ**2) / (2 * (0.5 * radius) ** 2))[None]
    ang = np.arctan2(vy, vx)
    bins = ((ang + math.pi) / (2 * math.pi) * 36).astype(int) % 36
    hist = np.zeros((n, 36))
    np.add.at(hist, (np.repeat(np.arange(n), mag[0].size), bins.reshape(-1)), mag.reshape(-1))
    hist = (np.roll(hist, 1, axis=1) + 2 * hist + np.roll(hist, -1, axis=1)) / 4.0
    peak = hist.argmax(axis=1)
    left = hist[np.arange(n), (peak - 1) % 36]
    mid = hist[np.arange(n), peak]
    right = hist[np.arange(n), (peak + 1) % 36]
    denom = left - 2 * mid + right
    off = np.where(np.abs(denom) > 1e-12, 0.5 * (left - right) / np.where(np.abs(denom) > 1e-12, denom, 1.0), 0.0)
    return (peak + 0.5 + off) * (2 * math.pi / 36) - math.pi


def _descriptors(gy, gx, rows, cols, sigma, theta):
    n = len(rows)
    cell = 3.0 * sigma
    half = DESC_CELLS * cell / 2.0
    # sample centres on a DESC_SAMPLES^2 grid over the rotated window
    u = (np.arange(DESC_SAMPLES) + 0.5) / DESC_SAMPLES * 2.0 - 1.0
    uu, vv = np.meshgrid(u, u, indexing="xy")
    ct, st = np.cos(theta)[:, None, None], np.sin(theta)[:, None, None]
    lx = uu[None] * half[:, None, None]
    ly = vv[None] * half[:, None, None]
    sc = cols[:, None, None] + ct * lx - st * ly
    sr = rows[:, None, None] + st * lx + ct * ly
    vx = ndimage.map_coordinates(gx, [sr, sc], order=1, mode="nearest")
    vy = ndimage.map_coordinates(gy, [sr, sc], order=1, mode="nearest")
    mag = np.hypot(vx, vy) * np.exp(-(uu**2 + vv**2) / 2.0)[None]
    rel = (np.arctan2(vy, vx) - theta[:, None, None]) % (2 * math.pi)
    fb = rel / (2 * math.pi) * DESC_BINS
    b0 = np.floor(fb).astype(int) % DESC_BINS
    w1 = fb - np.floor(fb)
    per_cell = DESC_SAMPLES // DESC_CELLS
    cell_r = np.arange(DESC_SAMPLES) // per_cell
    cell_id = (cell_r[:, None] * DESC_CELLS + cell_r[None, :])[None].repeat(n, axis=0)
    key = np.arange(n)[:, None, None] * (DESC_CELLS * DESC_CELLS) + cell_id
    hist = np.zeros((n * DESC_CELLS * DESC_CELLS, DESC_BINS))
    np.add.at(hist, (key.reshape(-1), b0.reshape(-1)), (mag * (1 - w1)).reshape(-1))
    np.add.at(hist, (key.reshape(-1), ((b0 + 1) % DESC_BINS).reshape(-1)), (mag * w1).reshape(-1))
    desc = hist.reshape(n, -1)
    norm = np.linalg.norm(desc, axis=1, keepdims=True)
    desc = desc / np.maximum(norm, 1e-12)
    desc = np.minimum(desc, 0.2)
    norm = np.linalg.norm(desc, axis=1, keepdims=True)
    return desc / np.maximum(norm, 1e-12), norm[:, 0] > 1e-12


def detect_and_describe(raster, n):
    """Top-``n`` keypoints by DoG response, with descriptors, sorted descending."""
    if n < 1:
        raise ValueError("n must be >= 1")
    img = np.asarray(raster, dtype=np.float64) / 255.0
    if img.std() < 1e-9:
        return LocalFeatures.empty()
    sigmas, gauss, dog = _scale_space(img)
    # per-level standardisation keeps extrema comparable across scales on
    # textures whose power decays quickly with scale
    spread = dog.std(axis=(1, 2), keepdims=True)
    dog = dog / np.maximum(spread, 1e-12)
    mx = ndimage.maximum_filter(dog, size=3, mode="nearest")
    mn = ndimage.minimum_filter(dog, size=3, mode="nearest")
    extrema = ((dog == mx) | (dog == mn)) & (np.abs(dog) > CONTRAST_THRESHOLD)
    extrema[0] = extrema[-1] = False
    border = 4
    extrema[:, :border] = extrema[:, -border:] = False
    extrema[:, :, :border] = extrema[:, :, -border:] = False
    lvl, r, c = np.nonzero(extrema)
    if len(lvl) == 0:
        return LocalFeatures.empty()
    off_r, off_c, drr, dcc = _subpixel(dog, r, c, lvl)
    drc = 0.25 * (dog[lvl, r + 1, c + 1] - dog[lvl, r + 1, c - 1] - dog[lvl, r - 1, c + 1] + dog[lvl, r - 1, c - 1])
    tr, det = drr + dcc, drr * dcc - drc**2
    edge_ok = (det > 0) & (tr**2 * EDGE_RATIO < (EDGE_RATIO + 1) ** 2 * det)
    lvl, r, c, off_r, off_c = lvl[edge_ok], r[edge_ok], c[edge_ok], off_r[edge_ok], off_c[edge_ok]
    response = np.abs(dog[lvl, r, c])
    order = np.lexsort((c, r, lvl, -response))[: 2 * n]
    lvl, r, c, off_r, off_c, response = lvl[order], r[order], c[order], off_r[order], off_c[order], response[order]
    rows, cols = r + off_r, c + off_c
    sigma = sigmas[lvl]
    theta = np.zeros(len(lvl))
    desc = np.zeros((len(lvl), DESC_CELLS * DESC_CELLS * DESC_BINS))
    valid = np.zeros(len(lvl), dtype=bool)
    for level in np.unique(lvl):
        sel = lvl == level
        g = gauss[level]
        gy, gx = np.gradient(g)
        theta[sel] = _orientations(gy, gx, rows[sel], cols[sel], sigma[sel])
        desc[sel], valid[sel] = _descriptors(gy, gx, rows[sel], cols[sel], sigma[sel], theta[sel])
    keep = np.nonzero(valid)[0][:n]
    return LocalFeatures(np.stack([cols[keep], rows[keep]], axis=1), sigma[keep], response[keep],
                         theta[keep], desc[keep])
