"""Command-line entry point: ``roverstereo <subcommand> ...``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 unreadable or
unwritable files. Every subcommand writes only inside ``--out-dir``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import camgeo, imageproc, objpipe, recon, synthgen, tinynet
from .errors import InputFileError, RoverStereoError, ValidationError

log = logging.getLogger("roverstereo")


@dataclass
class RunConfig:
    baseline: float = camgeo.DEFAULT_BASELINE_M
    fov: float = camgeo.DEFAULT_FOV_DEG
    width: int = camgeo.DEFAULT_IMAGE_SIZE[0]
    height: int = camgeo.DEFAULT_IMAGE_SIZE[1]
    clip: float = 2.0
    grid: int = 8
    lr: float = 1e-3
    patience: int = 10
    max_epochs: int = 150
    batch_size: int = 16
    lr_factor: float = 0.5
    lr_patience: int = 3
    far_threshold: float = objpipe.DEFAULT_FAR_THRESHOLD_M
    distance: str = "norm"
    seed: int = 0

    def validate(self) -> "RunConfig":
        if self.distance not in ("norm", "z"):
            raise ValidationError(f"distance: expected 'norm' or 'z', got {self.distance!r}")
        if self.far_threshold <= 0:
            raise ValidationError("far_threshold: must be > 0")
        imageproc.ClaheConfig(self.clip, self.grid, self.grid)
        self.train_config()
        self.rig()
        return self

    def rig(self) -> camgeo.StereoRig:
        return camgeo.make_parallel_rig(self.baseline, self.width, self.height, self.fov)

    def train_config(self) -> tinynet.TrainConfig:
        return tinynet.TrainConfig(learning_rate=self.lr, patience=self.patience,
                                   max_epochs=self.max_epochs, batch_size=self.batch_size,
                                   lr_factor=self.lr_factor, lr_patience=self.lr_patience,
                                   seed=self.seed)


def load_config(path) -> dict:
    """Parse ``key = value`` lines (``#`` comments allowed) into typed overrides."""
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputFileError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in fields:
            raise ValidationError(f"{path}:{lineno}: unknown config key {key!r}")
        kind = type(fields[key].default)
        try:
            out[key] = kind(value)
        except ValueError as exc:
            raise ValidationError(f"{path}:{lineno}: {key}: {exc}") from exc
    return out


def _build_config(args) -> RunConfig:
    values = load_config(args.config) if args.config else {}
    for f in dataclasses.fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    return RunConfig(**values).validate()


def _rig(args, cfg: RunConfig) -> camgeo.StereoRig:
    return camgeo.load_rig(args.rig) if getattr(args, "rig", None) else cfg.rig()


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args, cfg: RunConfig) -> int:
    rig = _rig(args, cfg)
    scene = synthgen.SceneConfig(args.zmin, args.zmax, args.n, args.noise, cfg.seed)
    data = synthgen.generate_dataset(rig, scene)
    splits = synthgen.split_dataset(data, args.train_frac, args.val_frac, cfg.seed)
    paths = synthgen.write_splits(splits, _out_dir(args))
    for p, part in zip(paths, splits):
        print(f"{p}: {len(part)} samples")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    data_dir = Path(args.data_dir)
    train = synthgen.read_csv(args.train or data_dir / "train.csv")
    val = synthgen.read_csv(args.val or data_dir / "val.csv")
    net = tinynet.MlpNet.glorot(cfg.seed, input_scale=1.0 / cfg.width)

    def progress(epoch, tr, va):
        print(f"epoch {epoch:3d}  train {tr:.4f} cm  val {va:.4f} cm", flush=True)

    net, report = tinynet.train(net, train, val, cfg.train_config(),
                                on_epoch=None if args.quiet else progress)
    out = _out_dir(args)
    tinynet.save_weights(net, out / "weights.mlp")
    tinynet.write_history(report, out / "history.csv")
    print(f"epochs {report.epochs_run} (best {report.best_epoch}), "
          f"best val MAE {report.best_val_mae:.4f} cm, train MAE {report.train_mae:.4f} cm")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    test = synthgen.read_csv(args.data)
    if args.predictions:
        pred = synthgen.read_csv(args.predictions).points
    elif args.weights:
        pred = tinynet.predict_batch(tinynet.load_weights(args.weights), test.pixels)
    else:
        raise ValidationError("eval needs --weights or --predictions")
    metrics = objpipe.error_metrics(pred, test.points, cfg.distance)
    out = _out_dir(args)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(metrics))
        w.writerow([repr(v) for v in metrics.values()])
    print(f"n={metrics['n']}  median abs error {metrics['median_abs_err_cm']:.2f} cm  "
          f"IQR {metrics['iqr_lo_cm']:.2f}-{metrics['iqr_hi_cm']:.2f} cm  "
          f"MAE {metrics['mae_cm']:.2f} cm")
    return 0


def cmd_range(args, cfg: RunConfig) -> int:
    left = imageproc.load_pgm(args.left)
    right = imageproc.load_pgm(args.right)
    labels = objpipe.load_label_map(args.labels) if args.labels else None
    lb = objpipe.load_detections(args.left_det, args.format, (left.width, left.height), labels)
    rb = objpipe.load_detections(args.right_det, args.format, (right.width, right.height), labels)
    net = tinynet.load_weights(args.weights)
    objects, skipped = objpipe.run_pipeline(
        left, right, lb, rb, net,
        clahe_cfg=imageproc.ClaheConfig(cfg.clip, cfg.grid, cfg.grid),
        far_threshold=cfg.far_threshold, distance_mode=cfg.distance,
        epipolar_tol=None if args.epipolar_tol < 0 else args.epipolar_tol)
    out = _out_dir(args)
    objpipe.write_table(objects, out / "objects.csv")
    objpipe.write_skip_log(skipped, out / "skipped.csv")
    for o in sorted(objects, key=lambda o: o.median_distance):
        flag = "  FAR" if o.far_flag else ""
        print(f"{o.object_id:3d} {o.label:9s} {o.n_matches:3d} matches  {o.median_distance:9.2f} cm{flag}")
    print(f"{len(objects)} ranged, {len(skipped)} skipped")
    return 0


def cmd_reconstruct(args, cfg: RunConfig) -> int:
    img = imageproc.load_pgm(args.image)
    depth = recon.load_depth(args.depth, (img.width, img.height), args.depth_scale)
    anchors = []
    if args.objects:
        anchors = recon.anchors_from_table(objpipe.read_table(args.objects), cfg.far_threshold)
    align = recon.fit_alignment(depth, anchors) if anchors else recon.MetricAlignment()
    cam = _rig(args, cfg).left
    cloud = recon.backproject(depth, align, cam, img, args.stride, args.depth_mode)
    out = _out_dir(args)
    recon.write_ply(cloud, out / "cloud.ply")
    (out / "alignment.txt").write_text(
        f"scale = {align.scale!r}\nshift = {align.shift!r}\n"
        f"anchors = {len(anchors)}\ndegenerate = {int(align.degenerate)}\n")
    print(f"{len(cloud)} points, scale {align.scale:.6g}, shift {align.shift:.6g} m")
    return 0


def run_bench(net: tinynet.MlpNet, rig: camgeo.StereoRig, n: int, seed: int = 0) -> dict:
    """Time one batched forward pass against a per-sample oracle triangulation loop."""
    data = synthgen.generate_dataset(rig, synthgen.SceneConfig(1.0, 10.0, n, 0.0, seed))
    px = data.pixels
    t0 = time.perf_counter()
    tinynet.predict_batch(net, px)
    t_ann = time.perf_counter() - t0
    t0 = time.perf_counter()
    for row in px:
        camgeo.triangulate(rig, row[:2], row[2:])
    t_oracle = time.perf_counter() - t0
    return {"n": n, "ann_batched_s": t_ann, "oracle_loop_s": t_oracle,
            "ann_samples_per_s": n / t_ann, "oracle_samples_per_s": n / t_oracle,
            "speedup": t_oracle / t_ann}


def cmd_bench(args, cfg: RunConfig) -> int:
    rig = _rig(args, cfg)
    if args.weights:
        net = tinynet.load_weights(args.weights)
    else:
        net = tinynet.MlpNet.glorot(cfg.seed, input_scale=1.0 / rig.image_width)
    rep = run_bench(net, rig, args.n, cfg.seed)
    lines = [
        f"samples: {rep['n']}",
        f"ann_batched_wall_s: {rep['ann_batched_s']:.6f}",
        f"oracle_loop_wall_s: {rep['oracle_loop_s']:.6f}",
        f"ann_samples_per_s: {rep['ann_samples_per_s']:.1f}",
        f"oracle_samples_per_s: {rep['oracle_samples_per_s']:.1f}",
        f"speedup: {rep['speedup']:.2f}",
    ]
    (_out_dir(args) / "bench.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("shared settings (flags override --config)")
    g.add_argument("--config", help="key = value file with any of the settings below")
    g.add_argument("--out-dir", default=".", help="directory for every output file (default: .)")
    g.add_argument("--seed", type=int, help="random seed (default 0)")
    g.add_argument("--rig", help="CAHV rig file; replaces --baseline/--fov/--width/--height")
    g.add_argument("--baseline", type=float, help="stereo baseline in metres (default 0.24, NavCam rig)")
    g.add_argument("--fov", type=float, help="horizontal field of view in degrees (default 39, NavCam rig)")
    g.add_argument("--width", type=int, help="image width in pixels (default 1024)")
    g.add_argument("--height", type=int, help="image height in pixels (default 1024)")
    g.add_argument("--distance", choices=["norm", "z"],
                   help="distance reported per feature: Euclidean range or depth (default norm)")
    g.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = _Parser(prog="roverstereo", description="Stereo ranging toolkit for rover NavCam imagery.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic triangulation dataset")
    p.add_argument("--n", type=int, default=50000, help="number of samples (default 50000)")
    p.add_argument("--zmin", type=float, default=1.0, help="nearest depth in metres (default 1)")
    p.add_argument("--zmax", type=float, default=10.0, help="farthest depth in metres (default 10)")
    p.add_argument("--noise", type=float, default=0.0, help="pixel noise sigma (default 0)")
    p.add_argument("--train-frac", type=float, default=0.8, help="training fraction (default 0.8)")
    p.add_argument("--val-frac", type=float, default=0.1, help="validation fraction (default 0.1)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train the triangulation network")
    p.add_argument("--data-dir", default=".", help="directory holding train.csv and val.csv")
    p.add_argument("--train", help="training CSV (overrides --data-dir)")
    p.add_argument("--val", help="validation CSV (overrides --data-dir)")
    p.add_argument("--lr", type=float, help="initial NAdam learning rate (default 0.001)")
    p.add_argument("--patience", type=int, help="early-stopping patience in epochs (default 10)")
    p.add_argument("--max-epochs", dest="max_epochs", type=int, help="epoch limit (default 150)")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="minibatch size (default 16)")
    p.add_argument("--lr-factor", dest="lr_factor", type=float,
                   help="learning-rate multiplier on a validation plateau, 1 disables (default 0.5)")
    p.add_argument("--lr-patience", dest="lr_patience", type=int,
                   help="epochs without improvement before the rate drops (default 3)")
    p.add_argument("--quiet", action="store_true", help="no per-epoch progress")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="distance-error statistics on a test CSV")
    p.add_argument("--data", required=True, help="test CSV (x1,y1,x2,y2,X,Y,Z)")
    p.add_argument("--weights", help="trained weight file")
    p.add_argument("--predictions", help="CSV in dataset format whose X,Y,Z are predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("range", parents=[common], help="per-object distance table for a stereo pair")
    p.add_argument("--left", required=True, help="left image (binary PGM)")
    p.add_argument("--right", required=True, help="right image (binary PGM)")
    p.add_argument("--left-det", required=True, help="left detections file")
    p.add_argument("--right-det", required=True, help="right detections file")
    p.add_argument("--format", default="yolo", choices=["yolo", "coco"],
                   help="detection file format (default yolo)")
    p.add_argument("--labels", help="label map file, 'id name' per line "
                   "(default 0 crater, 1 rock, 2 artifact)")
    p.add_argument("--weights", required=True, help="trained weight file")
    p.add_argument("--clip", type=float, help="CLAHE clip limit (default 2.0)")
    p.add_argument("--grid", type=int, help="CLAHE tile grid per axis (default 8)")
    p.add_argument("--far-threshold", dest="far_threshold", type=float,
                   help="clamp distance in metres for far objects (default 10)")
    p.add_argument("--epipolar-tol", type=float, default=objpipe.DEFAULT_EPIPOLAR_TOL,
                   help="max row difference of a match in pixels, negative disables (default 2)")
    p.set_defaults(func=cmd_range)

    p = sub.add_parser("reconstruct", parents=[common], help="metric point cloud from a depth map")
    p.add_argument("--depth", required=True, help="depth map (PFM or 16-bit PGM)")
    p.add_argument("--depth-scale", type=float, help="16-bit PGM scale (default: <depth>.scale file)")
    p.add_argument("--image", required=True, help="left image (binary PGM) for intensities")
    p.add_argument("--objects", help="objects.csv from 'range' used as metric anchors")
    p.add_argument("--stride", type=int, default=1, help="pixel step of the sampling grid (default 1)")
    p.add_argument("--depth-mode", choices=["range", "z"], default="range",
                   help="depth is distance along the ray or along the axis (default range)")
    p.add_argument("--far-threshold", dest="far_threshold", type=float,
                   help="anchors beyond this many metres are ignored (default 10)")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("bench", parents=[common],
                       help="batched network inference vs per-feature oracle triangulation")
    p.add_argument("--n", type=int, default=10000, help="number of samples (default 10000)")
    p.add_argument("--weights", help="trained weight file (default: untrained network)")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _build_config(args)
        return args.func(args, cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (InputFileError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    except RoverStereoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
