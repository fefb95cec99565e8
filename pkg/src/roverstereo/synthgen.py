"""Synthetic triangulation datasets drawn through the CAHV oracle.

Each sample is a left/right pixel pair ``(x1, y1, x2, y2)`` plus the world
point that produced it. Depth is drawn uniformly in ``[z_min, z_max]`` and the
left pixel uniformly over the image, so points are uniform across the image
footprint at each depth. Points that fall outside either image (before or
after noise) are redrawn, never clamped.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import camgeo
from .errors import (
    BadHeader,
    EmptyFrustumIntersection,
    InsufficientSamples,
    RaggedRow,
    ValidationError,
)

CSV_HEADER = ["x1", "y1", "x2", "y2", "X", "Y", "Z"]


@dataclass(frozen=True)
class TriangulationSample:
    x1: float
    y1: float
    x2: float
    y2: float
    truth: tuple[float, float, float]


@dataclass(frozen=True)
class SceneConfig:
    z_min: float = 1.0
    z_max: float = 10.0
    n: int = 1000
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.z_min < self.z_max:
            raise ValidationError(f"need 0 < z_min < z_max, got {self.z_min}, {self.z_max}")
        if self.n <= 0:
            raise ValidationError(f"n must be positive, got {self.n}")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")


class TriangulationSet:
    """Column-oriented container: ``pixels`` is (n, 4), ``points`` is (n, 3)."""

    def __init__(self, pixels, points):
        self.pixels = np.ascontiguousarray(pixels, dtype=np.float64).reshape(-1, 4)
        self.points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        if len(self.pixels) != len(self.points):
            raise ValidationError("pixels and points differ in length")

    def __len__(self):
        return len(self.pixels)

    def __getitem__(self, i) -> TriangulationSample:
        x1, y1, x2, y2 = (float(t) for t in self.pixels[i])
        return TriangulationSample(x1, y1, x2, y2, tuple(float(t) for t in self.points[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __eq__(self, other):
        if not isinstance(other, TriangulationSet):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels) and np.array_equal(self.points, other.points)

    def take(self, idx) -> "TriangulationSet":
        return TriangulationSet(self.pixels[idx], self.points[idx])


def _in_bounds(px: np.ndarray, width: int, height: int) -> np.ndarray:
    ok = np.isfinite(px).all(axis=1)
    with np.errstate(invalid="ignore"):
        ok &= (px[:, 0] >= 0) & (px[:, 0] < width) & (px[:, 1] >= 0) & (px[:, 1] < height)
    return ok


def generate_dataset(rig: camgeo.StereoRig, cfg: SceneConfig) -> TriangulationSet:
    rng = np.random.default_rng(cfg.seed)
    w, h = rig.image_width, rig.image_height
    budget = 1000 * cfg.n
    chunk = max(256, min(cfg.n, 65536))
    pix_out, pts_out = [], []
    have = drawn = 0
    while have < cfg.n:
        if drawn >= budget:
            raise EmptyFrustumIntersection(
                f"only {have} of {cfg.n} samples found in {drawn} draws")
        m = min(chunk, budget - drawn)
        drawn += m
        z = rng.uniform(cfg.z_min, cfg.z_max, m)
        xs = rng.uniform(0.0, w, m)
        ys = rng.uniform(0.0, h, m)
        dirs = camgeo.pixel_rays(rig.left, xs, ys)
        with np.errstate(invalid="ignore"):
            pts = rig.left.c + dirs * (z / (dirs @ rig.left.a))[:, None]
        left = camgeo.project_many(rig.left, pts)
        right = camgeo.project_many(rig.right, pts)
        pix = np.hstack([left, right])
        if cfg.noise_sigma > 0:
            pix = pix + rng.normal(0.0, cfg.noise_sigma, pix.shape)
        ok = _in_bounds(pix[:, :2], w, h) & _in_bounds(pix[:, 2:], w, h)
        pix, pts = pix[ok], pts[ok]
        take = min(len(pix), cfg.n - have)
        pix_out.append(pix[:take])
        pts_out.append(pts[:take])
        have += take
    return TriangulationSet(np.vstack(pix_out), np.vstack(pts_out))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(samples: TriangulationSet, train_frac: float, val_frac: float,
                  seed: int = 0) -> tuple[TriangulationSet, TriangulationSet, TriangulationSet]:
    """Shuffle once by ``seed`` and cut into train/val/test; test takes the rest."""
    if not (0 < train_frac < 1 and 0 < val_frac < 1 and train_frac + val_frac < 1):
        raise ValidationError("fractions must lie in (0, 1) and sum to < 1")
    n = len(samples)
    n_train = _round_half_up(n * train_frac)
    n_val = _round_half_up(n * val_frac)
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise InsufficientSamples(
            f"{n} samples cannot fill a {train_frac}/{val_frac} split")
    order = np.random.default_rng(seed).permutation(n)
    return (samples.take(order[:n_train]),
            samples.take(order[n_train:n_train + n_val]),
            samples.take(order[n_train + n_val:]))


def write_csv(samples: TriangulationSet, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(CSV_HEADER)
        for pix, pt in zip(samples.pixels, samples.points):
            out.writerow([repr(float(t)) for t in pix] + [repr(float(t)) for t in pt])


def read_csv(path) -> TriangulationSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != CSV_HEADER:
        raise BadHeader(f"{path}: expected header {','.join(CSV_HEADER)}")
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 7:
            raise RaggedRow(f"{path}:{lineno}: expected 7 columns, got {len(row)}")
        try:
            data.append([float(t) for t in row])
        except ValueError as exc:
            raise RaggedRow(f"{path}:{lineno}: {exc}") from exc
    arr = np.array(data, dtype=np.float64).reshape(-1, 7)
    return TriangulationSet(arr[:, :4], arr[:, 4:])


def write_splits(splits, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for name, part in zip(("train", "val", "test"), splits):
        p = out_dir / f"{name}.csv"
        write_csv(part, p)
        paths.append(p)
    return paths
