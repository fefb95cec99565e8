"""Object ranging: detections in, per-object median distance table out.

Flow for one stereo pair: CLAHE both images, detect keypoints inside every
detection box, match each left box against each right box on the same rows,
pair boxes greedily by mutual-match count, then push every matched feature
pair through the network in one batch and take the median distance per
object. Boxes with fewer than four matches are dropped.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path

import numpy as np

from . import camgeo, features, imageproc, tinynet
from .errors import (
    IoFailure,
    MalformedLine,
    OutOfRangeCoordinate,
    UnknownClassId,
    ValidationError,
)

log = logging.getLogger(__name__)

DEFAULT_LABELS = {0: "crater", 1: "rock", 2: "artifact"}
MIN_MATCHES = 4
DEFAULT_FAR_THRESHOLD_M = 10.0
DEFAULT_EPIPOLAR_TOL = 2.0

TABLE_HEADER = ["id", "class", "x_min", "y_min", "x_max", "y_max", "n_matches",
                "median_distance_cm", "far_flag", "raw_median_cm"]


@dataclass(frozen=True)
class BBox:
    class_id: int
    label: str
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    confidence: float = 1.0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(f"degenerate box {self}")

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def clamped(self, width: int, height: int) -> "BBox":
        return BBox(self.class_id, self.label,
                    min(max(self.x_min, 0.0), width), min(max(self.y_min, 0.0), height),
                    min(max(self.x_max, 0.0), width), min(max(self.y_max, 0.0), height),
                    self.confidence)


@dataclass
class Association:
    left_index: int
    right_index: int
    left_box: BBox
    right_box: BBox
    left_keypoints: list
    right_keypoints: list
    matches: list

    def pixel_pairs(self) -> np.ndarray:
        """Matched features as an (n, 4) array of ``x1, y1, x2, y2``."""
        rows = [(self.left_keypoints[m.left_index].x, self.left_keypoints[m.left_index].y,
                 self.right_keypoints[m.right_index].x, self.right_keypoints[m.right_index].y)
                for m in self.matches]
        return np.array(rows, dtype=np.float64).reshape(-1, 4)


@dataclass(frozen=True)
class Skipped:
    side: str
    box_index: int
    label: str
    reason: str


@dataclass
class RangedObject:
    object_id: int
    label: str
    left_box: BBox
    right_box: BBox | None
    n_matches: int
    per_feature_distance: list = field(default_factory=list)
    median_distance: float = 0.0
    raw_median: float = 0.0
    far_flag: bool = False


def load_label_map(path) -> dict[int, str]:
    """``id name`` per line; blank lines and ``#`` comments are ignored."""
    labels = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace("=", " ").replace(":", " ").split()
        if len(parts) != 2:
            raise MalformedLine(f"{path}:{lineno}: expected 'id name'")
        try:
            labels[int(parts[0])] = parts[1]
        except ValueError as exc:
            raise MalformedLine(f"{path}:{lineno}: {exc}") from exc
    return labels


def _lookup(labels, cid, where) -> str:
    if cid not in labels:
        raise UnknownClassId(f"{where}: class id {cid} not in label map")
    return labels[cid]


def parse_yolo(text: str, image_dims, labels=None, source="<yolo>") -> list[BBox]:
    """YOLO txt: ``class cx cy w h [confidence]`` with coordinates normalised to [0, 1]."""
    labels = DEFAULT_LABELS if labels is None else labels
    width, height = image_dims
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        where = f"{source}:{lineno}"
        parts = line.split()
        if len(parts) not in (5, 6):
            raise MalformedLine(f"{where}: expected 5 or 6 fields, got {len(parts)}")
        try:
            cid = int(parts[0])
            cx, cy, w, h = (float(t) for t in parts[1:5])
            conf = float(parts[5]) if len(parts) == 6 else 1.0
        except ValueError as exc:
            raise MalformedLine(f"{where}: {exc}") from exc
        for v in (cx, cy, w, h):
            if not 0.0 <= v <= 1.0:
                raise OutOfRangeCoordinate(f"{where}: normalised value {v} outside [0, 1]")
        if w <= 0 or h <= 0:
            raise MalformedLine(f"{where}: degenerate box")
        label = _lookup(labels, cid, where)
        box = BBox(cid, label, (cx - w / 2) * width, (cy - h / 2) * height,
                   (cx + w / 2) * width, (cy + h / 2) * height, conf)
        out.append(box.clamped(width, height))
    return out


def parse_coco(doc, image_dims, labels=None, image_id=None, source="<coco>") -> list[BBox]:
    """COCO detections: a list of annotations or a dict with an ``annotations`` list.

    Names from a ``categories`` list override the label map.
    """
    labels = dict(DEFAULT_LABELS if labels is None else labels)
    if isinstance(doc, dict):
        for cat in doc.get("categories", []):
            labels[int(cat["id"])] = str(cat["name"])
        anns = doc.get("annotations", [])
    else:
        anns = doc
    width, height = image_dims
    out = []
    for k, ann in enumerate(anns):
        where = f"{source}[{k}]"
        if image_id is not None and ann.get("image_id") != image_id:
            continue
        try:
            x, y, w, h = (float(t) for t in ann["bbox"])
            cid = int(ann["category_id"])
            conf = float(ann.get("score", 1.0))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedLine(f"{where}: {exc!r}") from exc
        if w <= 0 or h <= 0:
            raise MalformedLine(f"{where}: degenerate box")
        if x < 0 or y < 0 or x + w > width or y + h > height:
            log.debug("%s: box extends past the image, clamping", where)
        out.append(BBox(cid, _lookup(labels, cid, where), x, y, x + w, y + h, conf)
                   .clamped(width, height))
    return out


def load_detections(path, fmt: str, image_dims, labels=None, image_id=None) -> list[BBox]:
    fmt = fmt.lower()
    if fmt in ("yolo", "yolo-txt"):
        return parse_yolo(Path(path).read_text(), image_dims, labels, str(path))
    if fmt in ("coco", "coco-json"):
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise MalformedLine(f"{path}: {exc}") from exc
        return parse_coco(doc, image_dims, labels, image_id, str(path))
    raise ValidationError(f"unknown detection format {fmt!r}")


def _rows_overlap(a: BBox, b: BBox, slack: float) -> bool:
    return a.y_min <= b.y_max + slack and b.y_min <= a.y_max + slack


def filter_epipolar(assoc_matches, left_kps, right_kps, tol: float | None):
    """Keep matches on (nearly) the same row with positive disparity."""
    if tol is None:
        return list(assoc_matches)
    out = []
    for m in assoc_matches:
        kl, kr = left_kps[m.left_index], right_kps[m.right_index]
        if abs(kl.y - kr.y) <= tol and kl.x - kr.x > 0:
            out.append(m)
    return out


def associate(left_boxes, right_boxes, left_img, right_img, *,
              min_matches: int = MIN_MATCHES, epipolar_tol: float | None = DEFAULT_EPIPOLAR_TOL,
              max_keypoints: int = features.DEFAULT_MAX_KEYPOINTS,
              ratio: float | None = None,
              left_keypoints=None, right_keypoints=None):
    """Pair left and right boxes through their feature matches.

    Right boxes whose rows overlap a left box are its candidates. Pairs are
    accepted greedily by decreasing match count (ties to lower indices) while
    both boxes are free and the count reaches ``min_matches``.

    ``left_keypoints``/``right_keypoints`` optionally supply precomputed
    keypoint lists per box (e.g. external SIFT) instead of the built-in detector.

    Returns ``(associations, skipped)``.
    """
    def kps_for(boxes, img, given):
        if given is not None:
            return list(given)
        return [features.detect(img, b, max_keypoints=max_keypoints) for b in boxes]

    lk = kps_for(left_boxes, left_img, left_keypoints)
    rk = kps_for(right_boxes, right_img, right_keypoints)
    candidates: dict[tuple[int, int], list] = {}
    for i, lb in enumerate(left_boxes):
        for j, rb in enumerate(right_boxes):
            if not _rows_overlap(lb, rb, epipolar_tol or 0.0):
                continue
            ms = features.match_two_way(lk[i], rk[j], ratio=ratio)
            candidates[(i, j)] = filter_epipolar(ms, lk[i], rk[j], epipolar_tol)
    order = sorted(candidates, key=lambda ij: (-len(candidates[ij]), ij))
    used_l, used_r = set(), set()
    out = []
    for i, j in order:
        ms = candidates[(i, j)]
        if len(ms) < min_matches:
            break
        if i in used_l or j in used_r:
            continue
        used_l.add(i)
        used_r.add(j)
        out.append(Association(i, j, left_boxes[i], right_boxes[j], lk[i], rk[j], ms))
    out.sort(key=lambda a: a.left_index)

    skipped = []
    for side, boxes, used, key in (("left", left_boxes, used_l, 0), ("right", right_boxes, used_r, 1)):
        for k, box in enumerate(boxes):
            if k in used:
                continue
            counts = [len(ms) for ij, ms in candidates.items() if ij[key] == k]
            if not counts:
                reason = "no_partner"
            elif max(counts) < min_matches:
                reason = "insufficient_matches"
            else:
                reason = "partner_taken"
            skipped.append(Skipped(side, k, box.label, reason))
    return out, skipped


def summarize_distances(dists_cm, far_threshold_m: float = DEFAULT_FAR_THRESHOLD_M):
    """Median of per-feature distances with the far-range clamp.

    Returns ``(reported_cm, raw_median_cm, far_flag)``.
    """
    raw = float(np.median(np.asarray(dists_cm, dtype=np.float64)))
    limit = far_threshold_m * 100.0
    if raw > limit:
        return limit, raw, True
    return raw, raw, False


def range_pixels(pairs, net: tinynet.MlpNet, distance_mode: str = "norm") -> np.ndarray:
    """Per-feature distances in cm for an (n, 4) array of matched pixels."""
    pts = tinynet.predict_batch(net, pairs)
    return camgeo.distances(pts, distance_mode) * 100.0


def range_object(assoc: Association, net: tinynet.MlpNet,
                 far_threshold: float = DEFAULT_FAR_THRESHOLD_M, *,
                 object_id: int | None = None, distance_mode: str = "norm",
                 min_matches: int = MIN_MATCHES) -> RangedObject:
    if len(assoc.matches) < min_matches:
        raise ValidationError(
            f"association has {len(assoc.matches)} matches, need at least {min_matches}")
    dists = range_pixels(assoc.pixel_pairs(), net, distance_mode)
    reported, raw, far = summarize_distances(dists, far_threshold)
    return RangedObject(
        object_id=assoc.left_index if object_id is None else object_id,
        label=assoc.left_box.label,
        left_box=assoc.left_box,
        right_box=assoc.right_box,
        n_matches=len(assoc.matches),
        per_feature_distance=[float(d) for d in dists],
        median_distance=reported,
        raw_median=raw,
        far_flag=far,
    )


def run_pipeline(left_img, right_img, left_boxes, right_boxes, net, *,
                 clahe_cfg: imageproc.ClaheConfig | None = None,
                 far_threshold: float = DEFAULT_FAR_THRESHOLD_M,
                 distance_mode: str = "norm", **assoc_kwargs):
    """CLAHE, association and ranging for one stereo pair; returns ``(objects, skipped)``."""
    cfg = clahe_cfg or imageproc.ClaheConfig()
    left = imageproc.clahe(left_img, cfg)
    right = imageproc.clahe(right_img, cfg)
    assocs, skipped = associate(left_boxes, right_boxes, left, right, **assoc_kwargs)
    objects = [range_object(a, net, far_threshold, distance_mode=distance_mode) for a in assocs]
    return objects, skipped


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def write_table(objects, path) -> None:
    """Per-object CSV sorted by reported median distance (ties by id)."""
    rows = sorted(objects, key=lambda o: (o.median_distance, o.object_id))
    try:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(TABLE_HEADER)
            for o in rows:
                b = o.left_box
                out.writerow([o.object_id, o.label, _fmt(b.x_min), _fmt(b.y_min), _fmt(b.x_max),
                              _fmt(b.y_max), o.n_matches, _fmt(o.median_distance),
                              int(o.far_flag), _fmt(o.raw_median)])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_skip_log(skipped, path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["side", "box_index", "class", "reason"])
            for s in skipped:
                out.writerow([s.side, s.box_index, s.label, s.reason])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def abs_error_cm(predicted: str | float, reference: str | float) -> Decimal:
    """Exact decimal ``|predicted - reference|`` rounded to 0.01 cm."""
    diff = abs(Decimal(str(predicted)) - Decimal(str(reference)))
    return diff.quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN)


def write_comparison(rows, path) -> None:
    """Network-vs-oracle table; ``rows`` are ``(id, class, predicted_cm, oracle_cm)``."""
    try:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["id", "class", "predicted_cm", "oracle_cm", "abs_error_cm"])
            for oid, label, pred, ref in rows:
                out.writerow([oid, label,
                              Decimal(str(pred)).quantize(Decimal("0.01")),
                              Decimal(str(ref)).quantize(Decimal("0.01")),
                              abs_error_cm(pred, ref)])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def error_metrics(pred_points, true_points, distance_mode: str = "norm") -> dict:
    """Distance-error statistics in cm; quartiles interpolate linearly between order statistics."""
    pred = np.asarray(pred_points, dtype=np.float64).reshape(-1, 3)
    true = np.asarray(true_points, dtype=np.float64).reshape(-1, 3)
    if len(true) == 0:
        raise ValidationError("evaluation needs at least one sample")
    if pred.shape != true.shape:
        raise ValidationError(f"{len(pred)} predictions for {len(true)} samples")
    err = np.abs(camgeo.distances(pred, distance_mode) - camgeo.distances(true, distance_mode)) * 100.0
    q1, med, q3 = np.percentile(err, [25, 50, 75], method="linear")
    return {"median_abs_err_cm": float(med), "iqr_lo_cm": float(q1), "iqr_hi_cm": float(q3),
            "mae_cm": float(err.mean()), "n": int(len(err))}


def evaluate(net: tinynet.MlpNet, test_samples, distance_mode: str = "norm") -> dict:
    pred = tinynet.predict_batch(net, test_samples.pixels)
    return error_metrics(pred, test_samples.points, distance_mode)
