"""Keypoints inside regions of interest and the two-way brute-force matcher.

The built-in detector is Harris (k=0.04, Gaussian window sigma=1) with 5x5
non-maximum suppression; its descriptor is the 8x8 intensity patch around the
corner, mean-subtracted and L2-normalised. Keypoints from an external tool
(e.g. SIFT) can be fed in through :func:`load_keypoints` instead.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from .errors import BadHeader, DescriptorLengthMismatch, EmptyRoi, RaggedRow

HARRIS_K = 0.04
HARRIS_SIGMA = 1.0
NMS_SIZE = 5
PATCH = 8
BORDER = 4
DEFAULT_MAX_KEYPOINTS = 64
# corners weaker than this fraction of the strongest response in the ROI are ignored
DEFAULT_QUALITY = 0.01


@dataclass(frozen=True, eq=False)
class Keypoint:
    x: float
    y: float
    descriptor: np.ndarray
    response: float = 0.0

    @property
    def px(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class Match:
    left_index: int
    right_index: int
    dist: float


def roi_bounds(roi, width: int, height: int) -> tuple[int, int, int, int]:
    """Integer pixel window ``[x0, x1) x [y0, y1)`` covered by a box, clipped to the image."""
    if hasattr(roi, "x_min"):
        bx = (roi.x_min, roi.y_min, roi.x_max, roi.y_max)
    else:
        bx = tuple(roi)
    x0 = max(0, int(math.floor(bx[0])))
    y0 = max(0, int(math.floor(bx[1])))
    x1 = min(width, int(math.ceil(bx[2])))
    y1 = min(height, int(math.ceil(bx[3])))
    return x0, y0, x1, y1


def harris_response(gray: np.ndarray, k: float = HARRIS_K, sigma: float = HARRIS_SIGMA) -> np.ndarray:
    """Harris corner measure ``det(M) - k trace(M)^2`` for a float image."""
    ix = ndimage.sobel(gray, axis=1, mode="nearest")
    iy = ndimage.sobel(gray, axis=0, mode="nearest")
    sxx = ndimage.gaussian_filter(ix * ix, sigma, mode="nearest")
    syy = ndimage.gaussian_filter(iy * iy, sigma, mode="nearest")
    sxy = ndimage.gaussian_filter(ix * iy, sigma, mode="nearest")
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def _refine(r: np.ndarray, y: int, x: int) -> tuple[float, float]:
    # parabola through the response and its two neighbours, per axis
    def offset(lo, mid, hi):
        den = lo - 2.0 * mid + hi
        if den >= 0:
            return 0.0
        return float(np.clip(0.5 * (lo - hi) / den, -0.5, 0.5))

    dx = offset(r[y, x - 1], r[y, x], r[y, x + 1]) if 0 < x < r.shape[1] - 1 else 0.0
    dy = offset(r[y - 1, x], r[y, x], r[y + 1, x]) if 0 < y < r.shape[0] - 1 else 0.0
    return x + dx, y + dy


def patch_descriptor(gray: np.ndarray, x: int, y: int) -> np.ndarray:
    patch = gray[y - PATCH // 2:y + PATCH // 2, x - PATCH // 2:x + PATCH // 2].astype(np.float64)
    vec = (patch - patch.mean()).ravel()
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else np.zeros_like(vec)


def detect(img, roi, max_keypoints: int = DEFAULT_MAX_KEYPOINTS,
           quality: float = DEFAULT_QUALITY, subpixel: bool = True) -> list[Keypoint]:
    """Harris keypoints with patch descriptors inside ``roi``, strongest first.

    The response is computed on the ROI plus a margin wide enough for the
    filters, so results depend only on pixels near the ROI.
    """
    data = img if isinstance(img, np.ndarray) else img.data
    h, w = data.shape
    x0, y0, x1, y1 = roi_bounds(roi, w, h)
    if x1 <= x0 or y1 <= y0:
        raise EmptyRoi(f"ROI {roi} covers no pixels")
    margin = 6
    cx0, cy0 = max(0, x0 - margin), max(0, y0 - margin)
    cx1, cy1 = min(w, x1 + margin), min(h, y1 + margin)
    crop = data[cy0:cy1, cx0:cx1].astype(np.float64) / 255.0
    resp = harris_response(crop)
    peak = ndimage.maximum_filter(resp, size=NMS_SIZE, mode="constant", cval=-np.inf)
    inner = np.zeros_like(resp, dtype=bool)
    inner[y0 - cy0:y1 - cy0, x0 - cx0:x1 - cx0] = True
    gy, gx = np.mgrid[cy0:cy1, cx0:cx1]
    inner &= (gx >= BORDER) & (gx <= w - 1 - BORDER) & (gy >= BORDER) & (gy <= h - 1 - BORDER)
    cand = inner & (resp == peak) & (resp > 1e-12)
    if not cand.any():
        return []
    floor = quality * resp[inner].max()
    cand &= resp >= floor
    ys, xs = np.nonzero(cand)
    order = np.lexsort((xs, ys, -resp[ys, xs]))
    taken: list[tuple[int, int]] = []
    out = []
    for i in order:
        y, x = int(ys[i]), int(xs[i])
        # plateau maxima: keep only the first in (response, raster) order
        if any(abs(y - ty) <= NMS_SIZE // 2 and abs(x - tx) <= NMS_SIZE // 2 for ty, tx in taken):
            continue
        taken.append((y, x))
        fx, fy = _refine(resp, y, x) if subpixel else (float(x), float(y))
        out.append(Keypoint(fx + cx0, fy + cy0, patch_descriptor(data, x + cx0, y + cy0),
                            float(resp[y, x])))
        if len(out) >= max_keypoints:
            break
    return out


def descriptor_matrix(kps: list[Keypoint]) -> np.ndarray:
    if not kps:
        return np.zeros((0, 0))
    lengths = {len(k.descriptor) for k in kps}
    if len(lengths) != 1:
        raise DescriptorLengthMismatch(f"mixed descriptor lengths {sorted(lengths)}")
    return np.vstack([np.asarray(k.descriptor, dtype=np.float64) for k in kps])


def match_two_way(left: list[Keypoint], right: list[Keypoint],
                  ratio: float | None = None) -> list[Match]:
    """Mutual nearest neighbours in descriptor space (L2), ties to the lowest index.

    ``ratio`` optionally adds Lowe's ratio test on the left-to-right search.
    """
    if not left or not right:
        return []
    dl, dr = descriptor_matrix(left), descriptor_matrix(right)
    if dl.shape[1] != dr.shape[1]:
        raise DescriptorLengthMismatch(
            f"left descriptors have length {dl.shape[1]}, right {dr.shape[1]}")
    dist = cdist(dl, dr)
    best_r = np.argmin(dist, axis=1)
    best_l = np.argmin(dist, axis=0)
    out = []
    for i, j in enumerate(best_r):
        if best_l[j] != i:
            continue
        if ratio is not None and dist.shape[1] > 1:
            second = np.partition(dist[i], 1)[1]
            if not dist[i, j] < ratio * second:
                continue
        out.append(Match(i, int(j), float(dist[i, j])))
    return out


def load_keypoints(path) -> list[Keypoint]:
    """Read ``x,y,d0,...,d{n-1}`` CSV rows."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise BadHeader(f"{path}: empty file")
        header = [h.strip() for h in header]
        n = len(header) - 2
        if header[:2] != ["x", "y"] or header[2:] != [f"d{i}" for i in range(n)]:
            raise BadHeader(f"{path}: expected header x,y,d0..d{{n-1}}, got {','.join(header)}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n + 2:
                raise RaggedRow(f"{path}:{lineno}: expected {n + 2} columns, got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError as exc:
                raise RaggedRow(f"{path}:{lineno}: {exc}") from exc
            out.append(Keypoint(vals[0], vals[1], np.array(vals[2:])))
    return out


def save_keypoints(kps: list[Keypoint], path) -> None:
    n = len(kps[0].descriptor) if kps else 0
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["x", "y"] + [f"d{i}" for i in range(n)])
        for k in kps:
            out.writerow([repr(k.x), repr(k.y)] + [repr(float(v)) for v in k.descriptor])
