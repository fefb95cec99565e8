"""CAHV camera geometry: projection, pixel rays and two-view triangulation.

A CAHV camera is four 3-vectors. ``c`` is the camera centre, ``a`` the unit
optical axis, and ``h``/``v`` fold focal length and principal point together so
that a world point ``P`` lands on pixel::

    x = ((P - C) . H) / ((P - C) . A)
    y = ((P - C) . V) / ((P - C) . A)

The world frame is anchored at the left camera centre with the left axis as +Z.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateRay,
    InputFileError,
    InvalidCamera,
    InvalidFov,
    NegativeDepth,
    PointBehindCamera,
    RankDeficient,
    ValidationError,
)

# NavCam rig constants.
DEFAULT_BASELINE_M = 0.24
DEFAULT_FOV_DEG = 39.0
DEFAULT_IMAGE_SIZE = (1024, 1024)

RANK_TOL = 1e-10
_BEHIND_TOL = 1e-12


def _vec3(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise InvalidCamera(f"{name} must have 3 components, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidCamera(f"{name} has non-finite components")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CahvCamera:
    c: np.ndarray
    a: np.ndarray
    h: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        for name in ("c", "a", "h", "v"):
            object.__setattr__(self, name, _vec3(getattr(self, name), name))
        if abs(np.linalg.norm(self.a) - 1.0) > 1e-9:
            raise InvalidCamera(f"|a| must be 1, got {np.linalg.norm(self.a):.12g}")
        if self.f_h <= 0 or self.f_v <= 0:
            raise InvalidCamera("h and v must have a component orthogonal to a")

    @property
    def f_h(self) -> float:
        """Horizontal focal length in pixels."""
        return float(np.linalg.norm(self.h - (self.h @ self.a) * self.a))

    @property
    def f_v(self) -> float:
        return float(np.linalg.norm(self.v - (self.v @ self.a) * self.a))

    @property
    def principal_point(self) -> tuple[float, float]:
        return float(self.h @ self.a), float(self.v @ self.a)

    def __eq__(self, other):
        if not isinstance(other, CahvCamera):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in "cahv")

    def __hash__(self):
        return hash(tuple(np.concatenate([self.c, self.a, self.h, self.v])))


@dataclass(frozen=True, eq=False)
class StereoRig:
    left: CahvCamera
    right: CahvCamera
    image_width: int = DEFAULT_IMAGE_SIZE[0]
    image_height: int = DEFAULT_IMAGE_SIZE[1]

    def __post_init__(self):
        if self.baseline <= 0:
            raise InvalidCamera("left and right camera centres coincide")

    @property
    def baseline(self) -> float:
        return float(np.linalg.norm(self.left.c - self.right.c))

    @property
    def focal(self) -> float:
        return self.left.f_h

    def __eq__(self, other):
        if not isinstance(other, StereoRig):
            return NotImplemented
        return (self.left == other.left and self.right == other.right
                and self.image_width == other.image_width
                and self.image_height == other.image_height)

    def __hash__(self):
        return hash((self.left, self.right, self.image_width, self.image_height))


def project(cam: CahvCamera, p) -> tuple[float, float]:
    """Project a world point to ``(x, y)`` pixel coordinates."""
    d = np.asarray(p, dtype=np.float64) - cam.c
    depth = d @ cam.a
    if depth <= _BEHIND_TOL:
        raise PointBehindCamera(f"point {tuple(p)} is behind the camera")
    return float(d @ cam.h / depth), float(d @ cam.v / depth)


def project_many(cam: CahvCamera, points: np.ndarray) -> np.ndarray:
    """Vectorised :func:`project` for an ``(n, 3)`` array; returns ``(n, 2)``.

    Points behind the camera come back as NaN instead of raising.
    """
    d = np.asarray(points, dtype=np.float64) - cam.c
    depth = d @ cam.a
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.stack([d @ cam.h / depth, d @ cam.v / depth], axis=-1)
    out[depth <= _BEHIND_TOL] = np.nan
    return out


def _ray_dirs(cam: CahvCamera, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    u = cam.h[None, :] - xs[:, None] * cam.a[None, :]
    w = cam.v[None, :] - ys[:, None] * cam.a[None, :]
    d = np.cross(u, w)
    norm = np.linalg.norm(d, axis=1)
    scale = np.linalg.norm(u, axis=1) * np.linalg.norm(w, axis=1)
    bad = norm <= 1e-12 * np.maximum(scale, 1e-300)
    norm[bad] = 1.0
    d = d / norm[:, None]
    d *= np.where(d @ cam.a < 0, -1.0, 1.0)[:, None]
    d[bad] = np.nan
    return d


def pixel_ray(cam: CahvCamera, px) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(origin, unit_direction)`` of the ray seen by pixel ``px``."""
    x, y = float(px[0]), float(px[1])
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ValidationError("pixel coordinates must be finite")
    d = _ray_dirs(cam, np.array([x]), np.array([y]))[0]
    if np.isnan(d[0]):
        raise DegenerateRay(f"constraint planes are parallel at pixel ({x}, {y})")
    return cam.c.copy(), d


def pixel_rays(cam: CahvCamera, xs, ys) -> np.ndarray:
    """Unit ray directions for many pixels at once (NaN rows where degenerate)."""
    return _ray_dirs(cam, np.asarray(xs, dtype=np.float64).ravel(),
                     np.asarray(ys, dtype=np.float64).ravel())


def triangulate(rig: StereoRig, left_px, right_px) -> np.ndarray:
    """Least-squares intersection of one matched pixel pair.

    Stacks the four linear CAHV constraints ``(H - x A) . (P - C) = 0`` and
    ``(V - y A) . (P - C) = 0`` of both cameras and solves the 4x3 system by
    SVD, expressed relative to the left centre for conditioning.
    """
    xl, yl = float(left_px[0]), float(left_px[1])
    xr, yr = float(right_px[0]), float(right_px[1])
    L, R = rig.left, rig.right
    m = np.array([L.h - xl * L.a, L.v - yl * L.a, R.h - xr * R.a, R.v - yr * R.a])
    if not np.all(np.isfinite(m)):
        raise ValidationError("pixel coordinates must be finite")
    off = R.c - L.c
    b = np.array([0.0, 0.0, m[2] @ off, m[3] @ off])
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    if s[-1] <= RANK_TOL * s[0]:
        raise RankDeficient(f"triangulation system has rank < 3 (s_min/s_max={s[-1] / s[0]:.3g})")
    q = vt.T @ ((u.T @ b) / s)
    p = q + L.c
    if (p - L.c) @ L.a <= 0 or (p - R.c) @ R.a <= 0:
        raise NegativeDepth(f"triangulated point {p} lies behind a camera")
    return p


def make_parallel_rig(baseline: float = DEFAULT_BASELINE_M,
                      image_width: int = DEFAULT_IMAGE_SIZE[0],
                      image_height: int = DEFAULT_IMAGE_SIZE[1],
                      fov_deg: float = DEFAULT_FOV_DEG) -> StereoRig:
    """Fronto-parallel rig; ``fov_deg`` is the horizontal field of view."""
    if not 0 < fov_deg < 180:
        raise InvalidFov(f"field of view must be in (0, 180) degrees, got {fov_deg}")
    if baseline <= 0 or image_width <= 0 or image_height <= 0:
        raise ValidationError("baseline and image dimensions must be positive")
    f = (image_width / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    cx, cy = image_width / 2.0, image_height / 2.0
    a = np.array([0.0, 0.0, 1.0])
    h = np.array([f, 0.0, cx])
    v = np.array([0.0, f, cy])
    left = CahvCamera(np.zeros(3), a, h, v)
    right = CahvCamera(np.array([baseline, 0.0, 0.0]), a, h, v)
    return StereoRig(left, right, int(image_width), int(image_height))


def distance_of(p, mode: str = "norm") -> float:
    """Distance of a point from the left camera centre.

    ``mode="norm"`` gives the Euclidean range, ``mode="z"`` the depth along
    the optical axis.
    """
    p = np.asarray(p, dtype=np.float64)
    if mode == "norm":
        return float(np.linalg.norm(p))
    if mode == "z":
        return float(p[2])
    raise ValidationError(f"unknown distance mode {mode!r}")


def distances(points: np.ndarray, mode: str = "norm") -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if mode == "norm":
        return np.linalg.norm(points, axis=-1)
    if mode == "z":
        return points[..., 2].copy()
    raise ValidationError(f"unknown distance mode {mode!r}")


# Rig files: INI-style, one [left] and one [right] section, each with
# ``c``, ``a``, ``h``, ``v`` given as three whitespace-separated numbers.
# An optional [image] section holds ``width`` and ``height``.

def load_rig(path) -> StereoRig:
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise InputFileError(f"{path}: {exc}") from exc
    cams = {}
    for side in ("left", "right"):
        if side not in parser:
            raise InputFileError(f"{path}: missing [{side}] section")
        sec = parser[side]
        vals = {}
        for key in "cahv":
            if key not in sec:
                raise InputFileError(f"{path}: [{side}] missing key {key!r}")
            try:
                vals[key] = [float(t) for t in sec[key].split()]
            except ValueError as exc:
                raise InputFileError(f"{path}: [{side}] {key}: {exc}") from exc
            if len(vals[key]) != 3:
                raise InputFileError(f"{path}: [{side}] {key} needs 3 numbers")
        cams[side] = CahvCamera(**vals)
    width, height = DEFAULT_IMAGE_SIZE
    if "image" in parser:
        width = parser["image"].getint("width", width)
        height = parser["image"].getint("height", height)
    return StereoRig(cams["left"], cams["right"], width, height)


def save_rig(rig: StereoRig, path) -> None:
    lines = []
    for side, cam in (("left", rig.left), ("right", rig.right)):
        lines.append(f"[{side}]")
        for key in "cahv":
            lines.append(f"{key} = " + " ".join(repr(float(t)) for t in getattr(cam, key)))
        lines.append("")
    lines += ["[image]", f"width = {rig.image_width}", f"height = {rig.image_height}", ""]
    Path(path).write_text("\n".join(lines))
