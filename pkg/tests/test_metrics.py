import math

import numpy as np
import pytest

from cocoseg import metrics, reference


def _blob_mask(rng, h=20, w=20):
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(rng.integers(0, 3)):
        cy, cx = rng.integers(2, h - 2), rng.integers(2, w - 2)
        r = rng.integers(1, 5)
        yy, xx = np.mgrid[0:h, 0:w]
        mask |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
    return mask


class TestDsc:
    def test_identical_nonempty(self):
        mask = np.zeros((8, 8), dtype=bool)
        mask[2:5, 2:5] = True
        assert metrics.dsc(mask, mask) == 1.0

    def test_disjoint(self):
        a = np.zeros((8, 8), dtype=bool)
        b = np.zeros((8, 8), dtype=bool)
        a[0, 0] = True
        b[7, 7] = True
        assert metrics.dsc(a, b) == 0.0

    def test_half_coverage_closed_form(self):
        # P is the left half of G with |P| = |G|/2: Dice = 2*(G/2)/(G/2 + G) = 2/3.
        gt = np.zeros((8, 8), dtype=bool)
        gt[2:6, 0:4] = True
        pred = np.zeros((8, 8), dtype=bool)
        pred[2:6, 0:2] = True
        assert metrics.dsc(pred, gt) == pytest.approx(2.0 / 3.0, abs=1e-12)

    def test_both_empty(self):
        empty = np.zeros((4, 4), dtype=bool)
        assert metrics.dsc(empty, empty) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            metrics.dsc(np.zeros((3, 3), dtype=bool), np.zeros((4, 4), dtype=bool))


class TestHd95:
    def test_identical(self):
        mask = np.zeros((10, 10), dtype=bool)
        mask[3:7, 3:7] = True
        assert metrics.hd95(mask, mask) == 0.0

    def test_parallel_segments_five_apart(self):
        a = np.zeros((12, 12), dtype=bool)
        b = np.zeros((12, 12), dtype=bool)
        a[2:9, 3] = True
        b[2:9, 8] = True
        assert metrics.hd95(a, b) == pytest.approx(5.0, abs=0)

    def test_both_empty(self):
        empty = np.zeros((6, 6), dtype=bool)
        assert metrics.hd95(empty, empty) == 0.0

    def test_one_empty_undefined(self):
        a = np.zeros((6, 6), dtype=bool)
        b = a.copy()
        b[2, 2] = True
        assert math.isnan(metrics.hd95(a, b))
        assert math.isnan(metrics.hd95(b, a))

    def test_matches_oracle_exactly(self):
        rng = np.random.default_rng(7)
        checked = 0
        for _ in range(80):
            a, b = _blob_mask(rng), _blob_mask(rng)
            got = metrics.hd95(a, b)
            want = reference.hd_oracle(a, b)
            if math.isnan(want):
                assert math.isnan(got)
            else:
                assert got == want
                checked += 1
        assert checked > 20

    def test_symmetry_and_max_bound(self):
        rng = np.random.default_rng(11)
        for _ in range(40):
            a, b = _blob_mask(rng), _blob_mask(rng)
            h = metrics.hd95(a, b)
            if math.isnan(h):
                continue
            assert h == metrics.hd95(b, a)
            assert h <= reference.hd_oracle(a, b, percentile=100.0)


class TestEvalReport:
    def test_perfect_prediction(self):
        rng = np.random.default_rng(3)
        gts = [rng.integers(0, 4, size=(3, 16, 16)) for _ in range(2)]
        report = metrics.evaluate_cases([g.copy() for g in gts], gts, num_classes=4)
        assert report.class_dsc == [1.0, 1.0, 1.0, 1.0]
        assert report.mean_dsc == 1.0
        assert all(v == 0.0 for v in report.class_hd95)
        assert report.hd95_undefined == 0

    def test_slice_duplication_leaves_aggregate_unchanged(self):
        rng = np.random.default_rng(5)
        gt = rng.integers(0, 3, size=(2, 12, 12))
        pred = rng.integers(0, 3, size=(2, 12, 12))
        r1 = metrics.evaluate_cases([pred], [gt], num_classes=3)
        r2 = metrics.evaluate_cases(
            [np.concatenate([pred, pred])], [np.concatenate([gt, gt])], num_classes=3
        )
        assert r1.class_dsc == pytest.approx(r2.class_dsc, abs=1e-12)
        for a, b in zip(r1.class_hd95, r2.class_hd95):
            assert (a is None) == (b is None)
            if a is not None:
                assert a == pytest.approx(b, abs=1e-12)

    def test_undefined_counted_and_excluded(self):
        gt = np.zeros((1, 8, 8), dtype=np.int64)
        gt[0, 2:4, 2:4] = 1
        pred = np.zeros((1, 8, 8), dtype=np.int64)  # misses class 1 entirely
        report = metrics.evaluate_cases([pred], [gt], num_classes=2)
        assert report.hd95_undefined == 1
        assert report.class_hd95[1] is None
        assert report.mean_hd95 is None

    def test_report_serializes(self, tmp_path):
        gt = np.zeros((1, 8, 8), dtype=np.int64)
        report = metrics.evaluate_cases([gt], [gt], num_classes=2)
        report.save(tmp_path / "r.json")
        assert (tmp_path / "r.json").stat().st_size > 0


class TestFiniteDiff:
    def test_quadratic_gradient(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=7)
        grad = reference.finite_diff_grad(lambda v: float(np.sum(v**2)), x)
        np.testing.assert_allclose(grad, 2 * x, atol=1e-8)

    def test_hd_oracle_segments(self):
        a = np.zeros((12, 12), dtype=bool)
        b = np.zeros((12, 12), dtype=bool)
        a[2:9, 3] = True
        b[2:9, 8] = True
        assert reference.hd_oracle(a, b) == pytest.approx(5.0, abs=0)
