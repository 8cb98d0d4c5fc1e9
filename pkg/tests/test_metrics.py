import math

import numpy as np
import pytest

from hvc.exceptions import ShapeMismatch
from hvc.io import write_flow, read_flow, write_mask
from hvc.metrics import (
    aggregate,
    boundary_f,
    boundary_map,
    disc,
    epe,
    evaluate_dataset,
    jaccard,
    score_video,
)


def boundary_loops(mask):
    """Foreground pixels with a 4-neighbour in background; outside counts as foreground."""
    H, W = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    for y in range(H):
        for x in range(W):
            if not mask[y, x]:
                continue
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                yy, xx = y + dy, x + dx
                if 0 <= yy < H and 0 <= xx < W and not mask[yy, xx]:
                    out[y, x] = True
    return out


def f_loops(pred, gt, radius):
    pb, gb = boundary_loops(pred), boundary_loops(gt)
    pp, gp = np.argwhere(pb), np.argwhere(gb)
    if len(pp) == 0 and len(gp) == 0:
        return 1.0
    if len(pp) == 0 or len(gp) == 0:
        return 0.0

    def hit(a, b):
        d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
        return (d <= radius).any(axis=1).mean()

    p, r = hit(pp, gp), hit(gp, pp)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def test_jaccard_cases():
    a = np.zeros((4, 4), bool)
    assert jaccard(a, a) == 1.0
    b = a.copy()
    b[:2] = True
    c = a.copy()
    c[1:3] = True
    assert jaccard(b, c) == pytest.approx(4 / 12)
    assert jaccard(b, b) == 1.0
    assert jaccard(b, ~b) == 0.0
    with pytest.raises(ShapeMismatch):
        jaccard(a, np.zeros((3, 3)))


def test_boundary_map_matches_loops():
    rng = np.random.default_rng(0)
    for _ in range(50):
        m = rng.uniform(size=(12, 15)) < 0.5
        np.testing.assert_array_equal(boundary_map(m), boundary_loops(m))


def test_disc_is_euclidean_ball():
    d = disc(2)
    assert d.shape == (5, 5) and d.sum() == 13


def test_boundary_f_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(30):
        gt = np.zeros((40, 40), bool)
        x, y, w, h = rng.integers(2, 15, size=4)
        gt[y:y + h, x:x + w] = True
        pred = np.roll(gt, tuple(rng.integers(-3, 4, size=2)), axis=(0, 1))
        radius = math.ceil(0.008 * math.hypot(40, 40))
        assert boundary_f(pred, gt) == pytest.approx(f_loops(pred, gt, radius), abs=1e-12)


def test_boundary_f_conventions():
    e = np.zeros((10, 10), bool)
    full = np.zeros((10, 10), bool)
    full[3:6, 3:6] = True
    assert boundary_f(e, e) == 1.0
    assert boundary_f(e, full) == 0.0
    assert boundary_f(full, e) == 0.0
    assert boundary_f(full, full) == 1.0


def test_epe():
    a = np.zeros((2, 3, 3))
    b = np.zeros((2, 3, 3))
    b[0] = 3
    b[1] = 4
    assert epe(a, b) == 5.0
    with pytest.raises(ShapeMismatch):
        epe(a, np.zeros((2, 2, 2)))


def test_flow_file_roundtrip(tmp_path):
    f = np.random.default_rng(2).standard_normal((2, 5, 7)).astype(np.float32)
    write_flow(tmp_path / "a.flo", f)
    np.testing.assert_array_equal(read_flow(tmp_path / "a.flo"), f)
    np.save(tmp_path / "b.npy", f)
    np.testing.assert_array_equal(read_flow(tmp_path / "b.npy"), f)


def test_score_video_skips_first_frame():
    gt = [np.ones((4, 4), int)] * 3
    pred = [np.zeros((4, 4), int)] + [np.ones((4, 4), int)] * 2
    js, fs = score_video(pred, gt)[1]
    assert js == [1.0, 1.0]


def test_aggregate_means_and_recall():
    rep = aggregate({("v", 1): ([1.0, 0.2], [0.6, 0.6]), ("w", 1): ([0.0, 0.0], [0.0, 1.0])})
    assert rep.J_m == pytest.approx(0.3)
    assert rep.F_m == pytest.approx(0.55)
    assert rep.J_r == pytest.approx(0.25)
    assert rep.JF_m == pytest.approx(0.425)
    assert rep.to_table().splitlines()[-1] == "J&F_m = 0.4250"


def _write_video(root, name, masks):
    for t, m in enumerate(masks):
        write_mask(root / name / f"{t:05d}.png", m)


def test_evaluate_dataset_perfect_and_missing(tmp_path):
    rng = np.random.default_rng(3)
    masks = [(rng.uniform(size=(16, 16)) < 0.3).astype(int) for _ in range(4)]
    masks[0][0, 0] = 1
    _write_video(tmp_path / "gt", "v0", masks)
    _write_video(tmp_path / "pred", "v0", masks)
    rep = evaluate_dataset(tmp_path / "pred", tmp_path / "gt")
    assert rep.JF_m == 1.0 and not rep.errors
    (tmp_path / "pred" / "v0" / "00002.png").unlink()
    rep = evaluate_dataset(tmp_path / "pred", tmp_path / "gt")
    assert rep.errors and rep.JF_m < 1.0
    assert '"JF_m"' in rep.to_json()


def test_evaluate_dataset_last_fraction(tmp_path):
    gt = [np.ones((8, 8), int)] * 8
    pred = [np.ones((8, 8), int)] * 6 + [np.zeros((8, 8), int)] * 2
    _write_video(tmp_path / "gt", "v", gt)
    _write_video(tmp_path / "pred", "v", pred)
    assert evaluate_dataset(tmp_path / "pred", tmp_path / "gt", last_fraction=0.25).J_m == 0.0
    assert evaluate_dataset(tmp_path / "pred", tmp_path / "gt").J_m == pytest.approx(5 / 7)
