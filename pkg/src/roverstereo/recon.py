"""Offline reconstruction from an externally produced monocular depth map.

The depth map is brought to metric scale with an affine fit ``z = s*d + t``
against per-object distances from the ranging pipeline, then every valid
pixel is pushed out along its camera ray and written as an intensity-tagged
point cloud.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import camgeo, imageproc
from .errors import (
    BadMagic,
    DimensionMismatch,
    InputFileError,
    MalformedHeader,
    NoValidAnchors,
    Truncated,
    ValidationError,
    VertexCountMismatch,
)

log = logging.getLogger(__name__)

ANCHOR_WINDOW = 5


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Row-major depth values, shape (height, width); values <= 0 or NaN are holes."""

    depth: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.depth, dtype=np.float64)
        if arr.ndim != 2:
            raise ValidationError(f"depth map must be 2-D, got shape {arr.shape}")
        object.__setattr__(self, "depth", arr)

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def valid(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.isfinite(self.depth) & (self.depth > 0)


@dataclass(frozen=True)
class MetricAlignment:
    scale: float = 1.0
    shift: float = 0.0
    degenerate: bool = False

    def apply(self, d):
        return self.scale * np.asarray(d) + self.shift


@dataclass(eq=False)
class PointCloud:
    points: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.intensity = np.asarray(self.intensity, dtype=np.uint8).reshape(-1)
        if len(self.points) != len(self.intensity):
            raise ValidationError("points and intensities differ in length")
        if not np.all(np.isfinite(self.points)):
            raise ValidationError("point cloud contains non-finite coordinates")

    def __len__(self):
        return len(self.points)


def _read_pfm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    lines = []
    pos = 0
    for _ in range(3):
        eol = blob.find(b"\n", pos)
        if eol < 0:
            raise Truncated(f"{path}: incomplete PFM header")
        lines.append(blob[pos:eol].strip())
        pos = eol + 1
    if lines[0] != b"Pf":
        raise BadMagic(f"{path}: expected single-channel PFM magic 'Pf', got {lines[0]!r}")
    try:
        width, height = (int(t) for t in lines[1].split())
        scale = float(lines[2])
    except ValueError as exc:
        raise InputFileError(f"{path}: bad PFM header: {exc}") from exc
    dtype = "<f4" if scale < 0 else ">f4"
    need = 4 * width * height
    if len(blob) - pos < need:
        raise Truncated(f"{path}: PFM payload shorter than {need} bytes")
    data = np.frombuffer(blob[pos:pos + need], dtype=dtype).reshape(height, width)
    # PFM stores the bottom row first
    return data[::-1].astype(np.float64)


def write_pfm(depth, path) -> None:
    arr = np.asarray(depth, dtype="<f4")
    h, w = arr.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(arr[::-1]).tobytes())


def _sidecar_scale(path) -> float:
    side = Path(str(path) + ".scale")
    if not side.exists():
        raise InputFileError(f"{path}: 16-bit depth needs a scale factor ({side} not found)")
    try:
        return float(side.read_text().split()[0])
    except (ValueError, IndexError) as exc:
        raise InputFileError(f"{side}: {exc}") from exc


def load_depth(path, expected_dims=None, scale: float | None = None) -> DepthMap:
    """Read a PFM or 16-bit PGM depth map.

    PGM values are multiplied by ``scale`` or, when not given, by the number
    stored in the sidecar file ``<path>.scale``. ``expected_dims`` is
    ``(width, height)`` of the companion image.
    """
    head = Path(path).read_bytes()[:2]
    if head in (b"Pf", b"PF"):
        depth = _read_pfm(path)
    elif head == b"P5":
        raw = imageproc.load_pgm16(path)
        depth = raw * (_sidecar_scale(path) if scale is None else scale)
    else:
        raise BadMagic(f"{path}: not a PFM or binary PGM file (magic {head!r})")
    dm = DepthMap(depth)
    if expected_dims is not None and (dm.width, dm.height) != tuple(expected_dims):
        raise DimensionMismatch(
            f"{path}: depth map is {dm.width}x{dm.height}, image is {expected_dims[0]}x{expected_dims[1]}")
    return dm


def anchor_depth(depth: DepthMap, px) -> float | None:
    """Median of valid depths in the 5x5 window around ``px``; None if there are none."""
    x, y = int(round(px[0])), int(round(px[1]))
    if not (0 <= x < depth.width and 0 <= y < depth.height):
        return None
    r = ANCHOR_WINDOW // 2
    win = depth.depth[max(0, y - r):y + r + 1, max(0, x - r):x + r + 1]
    ok = depth.valid[max(0, y - r):y + r + 1, max(0, x - r):x + r + 1]
    if not ok.any():
        return None
    return float(np.median(win[ok]))


def fit_alignment(depth: DepthMap, anchors) -> MetricAlignment:
    """Least-squares ``(s, t)`` mapping model depth to metric distance.

    ``anchors`` are ``(pixel, distance_cm)`` pairs. A single anchor fixes the
    scale only. When several anchors share one depth the scale cannot be
    resolved; the fit then keeps ``s = 1`` and takes the mean residual as
    shift, with ``degenerate=True``.
    """
    d, z = [], []
    for px, dist_cm in anchors:
        ad = anchor_depth(depth, px)
        if ad is None:
            log.warning("anchor at %s has no valid depth, ignored", px)
            continue
        d.append(ad)
        z.append(dist_cm / 100.0)
    if not d:
        raise NoValidAnchors("no anchor lands on valid depth")
    d = np.array(d)
    z = np.array(z)
    if len(d) == 1:
        return MetricAlignment(float(z[0] / d[0]), 0.0)
    dc = d - d.mean()
    var = dc @ dc
    if var <= 1e-12 * max(d.mean() ** 2, 1e-300) * len(d):
        log.warning("all anchor depths are equal; falling back to a pure shift")
        return MetricAlignment(1.0, float(np.mean(z - d)), degenerate=True)
    s = float(dc @ (z - z.mean()) / var)
    t = float(z.mean() - s * d.mean())
    if s <= 0:
        log.warning("fitted scale %.4g is not positive; falling back to a pure shift", s)
        return MetricAlignment(1.0, float(np.mean(z - d)), degenerate=True)
    return MetricAlignment(s, t)


def backproject(depth: DepthMap, align: MetricAlignment, cam: camgeo.CahvCamera,
                img: imageproc.GrayImage | None = None, stride: int = 1,
                depth_mode: str = "range") -> PointCloud:
    """Dense cloud from every valid pixel on a ``stride`` grid, row-major order.

    ``depth_mode="range"`` treats aligned depth as distance along the pixel
    ray; ``"z"`` treats it as depth along the optical axis.
    """
    if stride < 1:
        raise ValidationError("stride must be >= 1")
    if img is not None and (img.width, img.height) != (depth.width, depth.height):
        raise DimensionMismatch("image and depth map sizes differ")
    ys, xs = np.mgrid[0:depth.height:stride, 0:depth.width:stride]
    ys, xs = ys.ravel(), xs.ravel()
    metric = align.apply(depth.depth[ys, xs])
    keep = depth.valid[ys, xs] & np.isfinite(metric) & (metric > 0)
    ys, xs, metric = ys[keep], xs[keep], metric[keep]
    dirs = camgeo.pixel_rays(cam, xs, ys)
    ok = np.isfinite(dirs).all(axis=1)
    ys, xs, metric, dirs = ys[ok], xs[ok], metric[ok], dirs[ok]
    if depth_mode == "range":
        reach = metric
    elif depth_mode == "z":
        reach = metric / (dirs @ cam.a)
    else:
        raise ValidationError(f"unknown depth mode {depth_mode!r}")
    pts = cam.c + dirs * reach[:, None]
    inten = img.data[ys, xs] if img is not None else np.full(len(pts), 255, np.uint8)
    return PointCloud(pts, inten)


_PLY_HEADER = ["ply", "format ascii 1.0", None, "property float x", "property float y",
               "property float z", "property uchar gray", "end_header"]


def write_ply(cloud: PointCloud, path) -> None:
    pts = cloud.points.astype(np.float32)
    with open(path, "w") as fh:
        for line in _PLY_HEADER:
            fh.write((line or f"element vertex {len(cloud)}") + "\n")
        for (x, y, z), g in zip(pts.tolist(), cloud.intensity.tolist()):
            fh.write(f"{x:.9g} {y:.9g} {z:.9g} {g}\n")


def read_ply(path) -> PointCloud:
    with open(path) as fh:
        lines = fh.read().splitlines()
    header = [ln.strip() for ln in lines[:len(_PLY_HEADER)]]
    if len(header) < len(_PLY_HEADER):
        raise MalformedHeader(f"{path}: incomplete PLY header")
    count = None
    for want, got in zip(_PLY_HEADER, header):
        if want is None:
            parts = got.split()
            if len(parts) != 3 or parts[:2] != ["element", "vertex"] or not parts[2].isdigit():
                raise MalformedHeader(f"{path}: bad element line {got!r}")
            count = int(parts[2])
        elif got != want:
            raise MalformedHeader(f"{path}: expected {want!r}, got {got!r}")
    body = [ln for ln in lines[len(_PLY_HEADER):] if ln.strip()]
    if len(body) != count:
        raise VertexCountMismatch(f"{path}: header declares {count} vertices, found {len(body)}")
    pts = np.zeros((count, 3), dtype=np.float32)
    gray = np.zeros(count, dtype=np.uint8)
    for k, ln in enumerate(body):
        parts = ln.split()
        if len(parts) != 4:
            raise VertexCountMismatch(f"{path}: vertex {k} has {len(parts)} fields")
        pts[k] = [float(v) for v in parts[:3]]
        g = int(parts[3])
        if not 0 <= g <= 255:
            raise MalformedHeader(f"{path}: vertex {k} gray value {g} out of range")
        gray[k] = g
    return PointCloud(pts.astype(np.float64), gray)


def anchors_from_table(rows, far_threshold_m: float | None = None):
    """Anchors (left-box centre, distance cm) from rows of an object table.

    Far-flagged rows carry a clamped distance and are left out.
    """
    out = []
    for r in rows:
        if int(r["far_flag"]):
            continue
        dist = float(r["median_distance_cm"])
        if far_threshold_m is not None and dist > far_threshold_m * 100.0:
            continue
        cx = 0.5 * (float(r["x_min"]) + float(r["x_max"]))
        cy = 0.5 * (float(r["y_min"]) + float(r["y_max"]))
        out.append(((cx, cy), dist))
    return out


def render_plane_depth(cam: camgeo.CahvCamera, normal, offset: float, width: int, height: int,
                       depth_mode: str = "range") -> np.ndarray:
    """Depth map of the plane ``normal . p = offset`` as seen by ``cam`` (NaN where missed)."""
    n = np.asarray(normal, dtype=np.float64)
    ys, xs = np.mgrid[0:height, 0:width]
    dirs = camgeo.pixel_rays(cam, xs.ravel(), ys.ravel())
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (offset - n @ cam.c) / (dirs @ n)
        if depth_mode == "z":
            t = t * (dirs @ cam.a)
    t[~(t > 0)] = math.nan
    return t.reshape(height, width)
