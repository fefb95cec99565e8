import numpy as np
import pytest

from roverstereo import camgeo, synthgen
from roverstereo.errors import (
    BadHeader,
    EmptyFrustumIntersection,
    InsufficientSamples,
    RaggedRow,
    ValidationError,
)


@pytest.fixture(scope="module")
def rig():
    return camgeo.make_parallel_rig()


def test_zero_noise_consistency(rig):
    data = synthgen.generate_dataset(rig, synthgen.SceneConfig(1, 10, 100, 0, 7))
    assert len(data) == 100
    for s in data:
        p = camgeo.triangulate(rig, (s.x1, s.y1), (s.x2, s.y2))
        assert np.linalg.norm(p - np.array(s.truth)) <= 1e-9


def test_seeded_determinism(rig):
    cfg = synthgen.SceneConfig(1, 10, 100, 0.5, 7)
    a = synthgen.generate_dataset(rig, cfg)
    b = synthgen.generate_dataset(rig, cfg)
    assert a == b
    assert a.pixels.tobytes() == b.pixels.tobytes()
    c = synthgen.generate_dataset(rig, synthgen.SceneConfig(1, 10, 100, 0.5, 8))
    assert not np.array_equal(a.pixels, c.pixels)


def test_disparity_law_on_samples(rig):
    data = synthgen.generate_dataset(rig, synthgen.SceneConfig(1, 12, 500, 0, 3))
    fb = rig.focal * rig.baseline
    d = data.pixels[:, 0] - data.pixels[:, 2]
    assert np.all(d > 0)
    assert np.max(np.abs(d * data.points[:, 2] - fb)) <= 1e-6 * fb


def test_bounds_and_depth_range(rig):
    data = synthgen.generate_dataset(rig, synthgen.SceneConfig(1, 10, 2000, 2.0, 11))
    px = data.pixels
    assert np.all((px[:, [0, 2]] >= 0) & (px[:, [0, 2]] < 1024))
    assert np.all((px[:, [1, 3]] >= 0) & (px[:, [1, 3]] < 1024))
    z = data.points[:, 2]
    assert z.min() >= 1 and z.max() <= 10


def test_decile_coverage(rig):
    n = 5000
    data = synthgen.generate_dataset(rig, synthgen.SceneConfig(1, 10, n, 0, 2))
    counts, _ = np.histogram(data.points[:, 2], bins=10, range=(1, 10))
    assert counts.min() >= n / 50


def test_empty_frustum():
    # disparity (>= 14 px) exceeds the 2 px image width at every depth
    tiny = camgeo.make_parallel_rig(10.0, 2, 2, 39)
    with pytest.raises(EmptyFrustumIntersection):
        synthgen.generate_dataset(tiny, synthgen.SceneConfig(1, 2, 3, 0, 0))


def test_scene_config_validation():
    with pytest.raises(ValidationError):
        synthgen.SceneConfig(5, 1, 10)
    with pytest.raises(ValidationError):
        synthgen.SceneConfig(1, 5, 0)
    with pytest.raises(ValidationError):
        synthgen.SceneConfig(1, 5, 10, -1)


def _toy(n):
    return synthgen.TriangulationSet(np.arange(4 * n).reshape(n, 4), np.arange(3 * n).reshape(n, 3))


def test_split_sizes_and_determinism():
    tr, va, te = synthgen.split_dataset(_toy(10), 0.6, 0.2, seed=1)
    assert (len(tr), len(va), len(te)) == (6, 2, 2)
    again = synthgen.split_dataset(_toy(10), 0.6, 0.2, seed=1)
    assert all(a == b for a, b in zip((tr, va, te), again))
    rows = np.vstack([tr.pixels, va.pixels, te.pixels])
    assert sorted(map(tuple, rows)) == sorted(map(tuple, _toy(10).pixels))


def test_split_reference_test_count():
    tr, va, te = synthgen.split_dataset(_toy(38550), 0.8, 0.1, seed=0)
    assert len(te) == 3855


def test_split_errors():
    with pytest.raises(InsufficientSamples):
        synthgen.split_dataset(_toy(2), 0.6, 0.2)
    with pytest.raises(ValidationError):
        synthgen.split_dataset(_toy(10), 0.6, 0.5)


def test_csv_round_trip(tmp_path, rig):
    data = synthgen.generate_dataset(rig, synthgen.SceneConfig(1, 10, 50, 0.5, 4))
    path = tmp_path / "d.csv"
    synthgen.write_csv(data, path)
    assert path.read_text().splitlines()[0] == "x1,y1,x2,y2,X,Y,Z"
    assert synthgen.read_csv(path) == data


def test_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(BadHeader):
        synthgen.read_csv(p)
    p.write_text("x1,y1,x2,y2,X,Y,Z\n1,2,3\n")
    with pytest.raises(RaggedRow):
        synthgen.read_csv(p)
