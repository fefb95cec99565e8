import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roverstereo import features
from roverstereo.errors import BadHeader, DescriptorLengthMismatch, EmptyRoi, RaggedRow
from roverstereo.features import Keypoint


def kp(desc, x=0.0, y=0.0):
    return Keypoint(x, y, np.asarray(desc, dtype=np.float64))


def textured(seed=0, shape=(120, 160)):
    rng = np.random.default_rng(seed)
    from scipy import ndimage

    img = ndimage.gaussian_filter(rng.uniform(0, 255, shape), 1.5)
    img = (img - img.min()) / np.ptp(img) * 255
    return img.astype(np.uint8)


def brute_mutual(dl, dr):
    """Reference mutual-nearest search with explicit loops, ties to lowest index."""
    d = np.array([[np.sqrt(np.sum((a - b) ** 2)) for b in dr] for a in dl])
    out = []
    for i in range(len(dl)):
        j = min(range(len(dr)), key=lambda k: (d[i, k], k))
        back = min(range(len(dl)), key=lambda k: (d[k, j], k))
        if back == i:
            out.append((i, j))
    return out


def test_constant_roi_has_no_keypoints():
    img = np.full((64, 64), 90, np.uint8)
    assert features.detect(img, (5, 5, 60, 60)) == []


def test_single_bright_pixel():
    img = np.zeros((64, 64), np.uint8)
    img[30, 25] = 255
    kps = features.detect(img, (10, 10, 50, 50))
    assert len(kps) >= 1
    best = kps[0]
    # brute-force scan of the full-image response
    resp = features.harris_response(img.astype(np.float64) / 255.0)
    ry, rx = np.unravel_index(np.argmax(resp), resp.shape)
    assert abs(best.x - rx) <= 1 and abs(best.y - ry) <= 1
    assert abs(best.x - 25) <= 1 and abs(best.y - 30) <= 1


def test_detection_is_roi_local():
    img = textured(1)
    roi = (40, 30, 100, 80)
    base = features.detect(img, roi)
    other = img.copy()
    # scribble well outside the ROI plus filter margin
    other[:15] = 255 - other[:15]
    other[:, 120:] = 0
    again = features.detect(other, roi)
    assert len(base) == len(again) > 0
    for a, b in zip(base, again):
        assert (a.x, a.y) == (b.x, b.y)
        assert np.array_equal(a.descriptor, b.descriptor)


def test_keypoints_inside_roi_and_border():
    img = textured(2)
    kps = features.detect(img, (0, 0, 160, 120), max_keypoints=500)
    assert kps
    for k in kps:
        assert 3.5 <= k.x <= 160 - 1 - 3.5 and 3.5 <= k.y <= 120 - 1 - 3.5
        assert len(k.descriptor) == 64
        assert abs(np.linalg.norm(k.descriptor) - 1) < 1e-12
    resp = [k.response for k in kps]
    assert resp == sorted(resp, reverse=True)


def test_max_keypoints_cap():
    assert len(features.detect(textured(3), (0, 0, 160, 120), max_keypoints=7)) == 7


def test_empty_roi():
    with pytest.raises(EmptyRoi):
        features.detect(textured(), (50, 50, 50, 60))
    with pytest.raises(EmptyRoi):
        features.detect(textured(), (500, 500, 600, 600))


def test_matcher_examples():
    left = [kp([0, 0]), kp([10, 0])]
    right = [kp([9, 0]), kp([1, 0])]
    got = [(m.left_index, m.right_index) for m in features.match_two_way(left, right)]
    assert got == [(0, 1), (1, 0)]
    # both left points prefer right 0; only the closer one keeps it
    left = [kp([0, 0]), kp([0.5, 0])]
    right = [kp([1, 0]), kp([5, 0])]
    got = [(m.left_index, m.right_index) for m in features.match_two_way(left, right)]
    assert got == [(1, 0)]
    assert features.match_two_way([], right) == []


def test_matcher_ties_go_to_lowest_index():
    left = [kp([0, 0])]
    right = [kp([1, 0]), kp([-1, 0])]
    assert features.match_two_way(left, right)[0].right_index == 0


def test_matcher_ratio_test():
    left = [kp([0, 0])]
    right = [kp([1, 0]), kp([1.1, 0])]
    assert len(features.match_two_way(left, right)) == 1
    assert features.match_two_way(left, right, ratio=0.8) == []


def test_matcher_length_mismatch():
    with pytest.raises(DescriptorLengthMismatch):
        features.match_two_way([kp([0, 0])], [kp([0, 0, 0])])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_matcher_against_brute_force(nl, nr, seed):
    rng = np.random.default_rng(seed)
    # small integer grid makes ties common
    dl = rng.integers(0, 4, (nl, 3)).astype(float)
    dr = rng.integers(0, 4, (nr, 3)).astype(float)
    got = [(m.left_index, m.right_index) for m in
           features.match_two_way([kp(d) for d in dl], [kp(d) for d in dr])]
    assert got == brute_mutual(dl, dr)
    rights = [j for _, j in got]
    assert len(set(rights)) == len(rights)


def test_matcher_permutation_invariance():
    rng = np.random.default_rng(4)
    dl, dr = rng.normal(size=(15, 8)), rng.normal(size=(20, 8))
    base = {(i, j) for i, j in ((m.left_index, m.right_index) for m in
            features.match_two_way([kp(d) for d in dl], [kp(d) for d in dr]))}
    pl, pr = rng.permutation(15), rng.permutation(20)
    perm = features.match_two_way([kp(d) for d in dl[pl]], [kp(d) for d in dr[pr]])
    assert {(pl[m.left_index], pr[m.right_index]) for m in perm} == base


def test_keypoint_csv_round_trip(tmp_path):
    kps = [kp([0.1, -0.2, 0.3], 1.5, 2.25), kp([1, 2, 3], 10, 20)]
    path = tmp_path / "k.csv"
    features.save_keypoints(kps, path)
    back = features.load_keypoints(path)
    assert [(k.x, k.y) for k in back] == [(1.5, 2.25), (10, 20)]
    assert np.array_equal(back[0].descriptor, kps[0].descriptor)


def test_keypoint_csv_errors(tmp_path):
    p = tmp_path / "k.csv"
    p.write_text("u,v,d0\n1,2,3\n")
    with pytest.raises(BadHeader):
        features.load_keypoints(p)
    p.write_text("x,y,d0,d1\n1,2,3\n")
    with pytest.raises(RaggedRow):
        features.load_keypoints(p)
    p.write_text("")
    with pytest.raises(BadHeader):
        features.load_keypoints(p)
