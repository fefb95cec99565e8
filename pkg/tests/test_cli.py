import csv
import json

import numpy as np
import pytest

from roverstereo import camgeo, cli, imageproc, recon, synthgen, tinynet
from roverstereo.imageproc import GrayImage

from .test_objpipe import stereo_patch_pair


def run(*argv):
    return cli.main([str(a) for a in argv])


def files_under(path):
    return sorted(p.relative_to(path) for p in path.rglob("*") if p.is_file())


def test_synth_is_reproducible(tmp_path):
    assert run("synth", "--n", 100, "--seed", 7, "--out-dir", tmp_path / "a") == 0
    assert run("synth", "--n", 100, "--seed", 7, "--out-dir", tmp_path / "b") == 0
    for name in ("train.csv", "val.csv", "test.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert len(synthgen.read_csv(tmp_path / "a" / "test.csv")) == 10


def test_train_and_eval(tmp_path):
    data, model = tmp_path / "data", tmp_path / "model"
    assert run("synth", "--n", 200, "--out-dir", data) == 0
    assert run("train", "--data-dir", data, "--max-epochs", 2, "--quiet", "--out-dir", model) == 0
    assert files_under(model) == [model.joinpath("history.csv").relative_to(model),
                                  model.joinpath("weights.mlp").relative_to(model)]
    hist = list(csv.DictReader(open(model / "history.csv")))
    assert len(hist) == 2
    tinynet.load_weights(model / "weights.mlp")
    out = tmp_path / "eval"
    assert run("eval", "--data", data / "test.csv", "--weights", model / "weights.mlp",
               "--out-dir", out) == 0
    metrics = next(csv.DictReader(open(out / "metrics.csv")))
    assert int(metrics["n"]) == 20


def test_eval_perfect_predictions(tmp_path):
    assert run("synth", "--n", 100, "--out-dir", tmp_path) == 0
    test = tmp_path / "test.csv"
    assert run("eval", "--data", test, "--predictions", test, "--out-dir", tmp_path / "e") == 0
    metrics = next(csv.DictReader(open(tmp_path / "e" / "metrics.csv")))
    assert float(metrics["median_abs_err_cm"]) == 0.0
    assert float(metrics["iqr_hi_cm"]) == 0.0


def test_exit_codes(tmp_path, capsys):
    assert run("synth", "--n", 0, "--out-dir", tmp_path) == 1
    assert run("synth", "--fov", 200, "--out-dir", tmp_path) == 1
    assert run("eval", "--data", tmp_path / "missing.csv", "--predictions", "x") == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["synth", "--bogus"])
    assert exc.value.code == 1
    (tmp_path / "w.mlp").write_bytes(b"MLP1\x04")
    (tmp_path / "d.csv").write_text("x1,y1,x2,y2,X,Y,Z\n1,2,3,4,5,6,7\n")
    assert run("eval", "--data", tmp_path / "d.csv", "--weights", tmp_path / "w.mlp") == 2


def test_config_file(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# rig\nbaseline = 0.3\nseed = 3\n")
    assert cli._build_config(cli.build_parser().parse_args(["synth", "--config", str(cfg)])).baseline == 0.3
    args = cli.build_parser().parse_args(["synth", "--config", str(cfg), "--baseline", "0.5"])
    assert cli._build_config(args).baseline == 0.5
    cfg.write_text("baselin = 0.3\n")
    assert run("synth", "--config", cfg, "--out-dir", tmp_path) == 1
    assert "baselin" in capsys.readouterr().err


def test_bench_report(tmp_path):
    assert run("bench", "--n", 500, "--out-dir", tmp_path) == 0
    text = (tmp_path / "bench.txt").read_text()
    for key in ("ann_batched_wall_s", "oracle_loop_wall_s", "ann_samples_per_s", "oracle_samples_per_s"):
        assert key in text


def test_range_and_reconstruct(tmp_path):
    rig, left, right, shift = stereo_patch_pair()
    w, h = left.width, left.height
    imageproc.save_pgm(left, tmp_path / "l.pgm")
    imageproc.save_pgm(right, tmp_path / "r.pgm")
    (tmp_path / "l.txt").write_text(f"1 {180 / w} {100 / h} {90 / w} {90 / h}\n0 0.5 0.05 0.1 0.05\n")
    (tmp_path / "r.txt").write_text(f"1 {(180 - shift) / w} {100 / h} {90 / w} {90 / h}\n")
    net = tinynet.MlpNet.glorot(0, input_scale=1.0 / w)
    tinynet.save_weights(net, tmp_path / "w.mlp")
    out = tmp_path / "out"
    assert run("range", "--left", tmp_path / "l.pgm", "--right", tmp_path / "r.pgm",
               "--left-det", tmp_path / "l.txt", "--right-det", tmp_path / "r.txt",
               "--weights", tmp_path / "w.mlp", "--width", w, "--height", h, "--out-dir", out) == 0
    rows = list(csv.DictReader(open(out / "objects.csv")))
    assert len(rows) == 1 and rows[0]["class"] == "rock" and int(rows[0]["n_matches"]) >= 4
    skipped = list(csv.DictReader(open(out / "skipped.csv")))
    assert [(s["side"], s["reason"]) for s in skipped] == [("left", "no_partner")]

    depth = recon.render_plane_depth(rig.left, (0, 0, 1), 3.0, w, h)
    recon.write_pfm(depth, tmp_path / "d.pfm")
    rec = tmp_path / "rec"
    assert run("reconstruct", "--depth", tmp_path / "d.pfm", "--image", tmp_path / "l.pgm",
               "--stride", 4, "--width", w, "--height", h, "--out-dir", rec) == 0
    cloud = recon.read_ply(rec / "cloud.ply")
    assert len(cloud) == len(range(0, h, 4)) * len(range(0, w, 4))
    assert np.allclose(cloud.points[:, 2], 3.0, atol=1e-5)
    assert "scale = 1.0" in (rec / "alignment.txt").read_text()
    # every output stays inside the chosen directories
    assert {p.name for p in tmp_path.iterdir()} == {"l.pgm", "r.pgm", "l.txt", "r.txt", "w.mlp",
                                                    "out", "d.pfm", "rec"}


def test_range_unknown_class_is_input_error(tmp_path):
    imageproc.save_pgm(GrayImage(np.zeros((20, 20), np.uint8)), tmp_path / "a.pgm")
    (tmp_path / "d.json").write_text(json.dumps([{"bbox": [0, 0, 5, 5], "category_id": 9}]))
    tinynet.save_weights(tinynet.MlpNet(), tmp_path / "w.mlp")
    code = run("range", "--left", tmp_path / "a.pgm", "--right", tmp_path / "a.pgm",
               "--left-det", tmp_path / "d.json", "--right-det", tmp_path / "d.json",
               "--format", "coco", "--weights", tmp_path / "w.mlp", "--out-dir", tmp_path / "o")
    assert code == 2


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit):
        cli.main(["train", "--help"])
    text = capsys.readouterr().out
    assert "default 0.001" in text and "default 10" in text


def test_rig_flag(tmp_path):
    camgeo.save_rig(camgeo.make_parallel_rig(0.3, 640, 480, 45), tmp_path / "rig.ini")
    assert run("synth", "--n", 50, "--rig", tmp_path / "rig.ini", "--out-dir", tmp_path / "s") == 0
    data = synthgen.read_csv(tmp_path / "s" / "train.csv")
    assert data.pixels[:, [0, 2]].max() < 640 and data.pixels[:, [1, 3]].max() < 480
