import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from houghcnn.evaluation import (
    RegionResult,
    boundary,
    dice,
    dice_histogram,
    evaluate_labels,
    evaluate_region,
    mean_surface_distance,
    summarize,
    symmetric_surface_distance,
    write_histogram_csv,
    write_results_csv,
)
from houghcnn.volume import LabelVolume
from oracles import boundary_brute, dice_brute, msd_brute

masks = arrays(np.bool_, (6, 5, 4))


def test_dice_cases():
    a = np.zeros((4, 4, 4), bool)
    a[0, 0, :] = True
    assert dice(a, a) == 1.0
    b = np.zeros_like(a)
    b[1, 1, :] = True
    assert dice(a, b) == 0.0
    c = np.zeros_like(a)
    c[0, 0, :2] = True
    c[2, 2, :2] = True
    assert dice(a, c) == 0.5
    assert dice(np.zeros_like(a), np.zeros_like(a)) == 1.0
    with pytest.raises(ValueError):
        dice(a, a[:2])


@settings(max_examples=60, deadline=None)
@given(masks, masks)
def test_dice_properties(a, b):
    assert dice(a, b) == dice(b, a)
    assert 0.0 <= dice(a, b) <= 1.0
    if a.any():
        assert dice(a, a) == 1.0


def test_unit_cubes_offset_by_one():
    a = np.zeros((6, 6, 6), bool)
    b = np.zeros_like(a)
    a[1:3, 1:3, 1:3] = True
    b[2:4, 1:3, 1:3] = True
    assert mean_surface_distance(a, b) == pytest.approx(msd_brute(a, b), abs=1e-12)
    assert mean_surface_distance(a, b) == pytest.approx(0.5)
    a1 = np.zeros((5, 5, 5), bool)
    b1 = np.zeros_like(a1)
    a1[2, 2, 2] = True
    b1[3, 2, 2] = True
    assert mean_surface_distance(a1, b1) == 1.0


@settings(max_examples=60, deadline=None)
@given(masks, masks)
def test_distance_properties(a, b):
    if not a.any() or not b.any():
        with pytest.raises(ValueError):
            mean_surface_distance(a, b)
        return
    assert mean_surface_distance(a, a) == 0.0
    assert mean_surface_distance(a, b) >= 0.0
    assert mean_surface_distance(a, b) == pytest.approx(msd_brute(a, b), abs=1e-9)
    assert set(map(tuple, np.argwhere(boundary(a)))) == set(boundary_brute(a))


def test_anisotropic_spacing():
    r = np.random.default_rng(3)
    a, b = r.random((8, 7, 6)) < 0.3, r.random((8, 7, 6)) < 0.3
    sp = (0.5, 1.0, 2.0)
    assert mean_surface_distance(a, b, sp) == pytest.approx(msd_brute(a, b, sp), abs=1e-9)


def test_symmetric_variant():
    r = np.random.default_rng(4)
    a, b = r.random((8, 8, 8)) < 0.2, r.random((8, 8, 8)) < 0.2
    s = symmetric_surface_distance(a, b)
    assert s == pytest.approx(symmetric_surface_distance(b, a))
    na, nb = boundary(a).sum(), boundary(b).sum()
    expect = (mean_surface_distance(a, b) * na + mean_surface_distance(b, a) * nb) / (na + nb)
    assert s == pytest.approx(expect)


def test_failure_accounting():
    gt = np.zeros((5, 5, 5), bool)
    gt[1:3, 1:3, 1:3] = True
    r = evaluate_region(np.zeros_like(gt), gt)
    assert r.failed and r.dice == 0.0 and r.mean_surface_distance is None
    r = RegionResult(1, 0.7, 1.2, failed=True)
    assert r.dice == 0.0
    ok = evaluate_region(gt, gt)
    assert not ok.failed and ok.dice == 1.0 and ok.mean_surface_distance == 0.0


def test_summarize_cases():
    s = summarize([RegionResult(1, 0, None, True), RegionResult(2, 0, None, True)])
    assert s.failure_rate == 1.0 and s.mean_dice == 0.0 and s.mean_distance is None
    s = summarize([RegionResult(1, 0.8, 1.0, False), RegionResult(1, 0.6, 2.0, False)])
    assert s.mean_dice == pytest.approx(0.7) and s.mean_distance == pytest.approx(1.5) and s.failure_rate == 0
    mixed = [RegionResult(1, 0.9, 0.5, False), RegionResult(1, 0.5, 1.5, False),
             RegionResult(1, 0.4, 9.0, True), RegionResult(2, 1.0, 0.0, False)]
    s = summarize(mixed)
    # hand tally: dice (0.9 + 0.5 + 0 + 1.0) / 4, distance (0.5 + 1.5 + 0) / 3, 1 of 4 failed
    assert s.mean_dice == pytest.approx(0.6)
    assert s.mean_dice_successful == pytest.approx(0.8)
    assert s.mean_distance == pytest.approx(2.0 / 3)
    assert s.failure_rate == 0.25
    with pytest.raises(ValueError):
        summarize([])


def test_histogram():
    h = dice_histogram([1.0] * 7)
    assert len(h) == 20 and h[-1] == 7 and h.sum() == 7
    assert dice_histogram([]).sum() == 0 and len(dice_histogram([])) == 20
    vals = [0.0, 0.04, 0.05, 0.15, 0.5, 0.949, 0.95, 0.999]
    h = dice_histogram(vals)
    # hand count: bin 0 {0, 0.04}, bin 1 {0.05}, bin 3 {0.15}, bin 10 {0.5}, bin 18 {0.949}, bin 19 {0.95, 0.999}
    expect = np.zeros(20, int)
    expect[[0, 1, 3, 10, 18, 19]] = [2, 1, 1, 1, 1, 2]
    assert np.array_equal(h, expect)
    with pytest.raises(ValueError):
        dice_histogram([1.2])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), max_size=40))
def test_histogram_conserves_count(vals):
    assert dice_histogram(vals).sum() == len(vals)


def test_csv_writers(tmp_path):
    gt = np.zeros((6, 6, 6), np.uint8)
    gt[1:3, 1:3, 1:3] = 1
    gt[3:5, 3:5, 3:5] = 2
    res = evaluate_labels(gt, gt, volume="a")
    assert [r.dice for r in res] == [1.0, 1.0]
    write_results_csv(res, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "volume,region,dice,mean_surface_distance_mm,failed"
    assert lines[1] == "a,1,1.000000,0.000000,0"
    write_histogram_csv(dice_histogram(res), tmp_path / "h.csv")
    h = (tmp_path / "h.csv").read_text().splitlines()
    assert len(h) == 21 and h[-1] == "0.95,1.00,2"


def test_volume_objects_are_accepted():
    gt = np.zeros((8, 8, 8), np.uint8)
    gt[2:5, 2:5, 2:5] = 1
    pred = gt.copy()
    pred[2, 2, 2] = 0
    res = evaluate_labels(LabelVolume(pred), LabelVolume(gt))
    assert res[0].dice == pytest.approx(dice(pred == 1, gt == 1)) and res[0].dice < 1.0
