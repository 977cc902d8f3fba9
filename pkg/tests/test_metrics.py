import numpy as np
import pytest

from segforge import metrics as mx


class TestBinarize:
    def test_foreground_wins(self):
        logits = np.zeros((1, 2, 3, 3))
        logits[:, 1] = 1.0
        np.testing.assert_array_equal(mx.binarize(logits), np.ones((1, 3, 3), dtype=np.uint8))

    def test_tie_goes_to_background(self):
        logits = np.ones((1, 2, 3, 3))
        np.testing.assert_array_equal(mx.binarize(logits), np.zeros((1, 3, 3), dtype=np.uint8))

    def test_matches_per_pixel_comparison(self):
        logits = np.random.default_rng(0).normal(size=(2, 2, 5, 5))
        got = mx.binarize(logits)
        for n in range(2):
            for y in range(5):
                for x in range(5):
                    assert got[n, y, x] == (1 if logits[n, 1, y, x] > logits[n, 0, y, x] else 0)

    def test_nan_rejected(self):
        logits = np.zeros((1, 2, 2, 2))
        logits[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            mx.binarize(logits)


class TestOverlapMetrics:
    def test_identical_nonempty(self):
        m = np.zeros((4, 4), dtype=np.uint8)
        m[1:3, 1:3] = 1
        assert mx.dsc(m, m) == mx.iou(m, m) == mx.pixel_f1(m, m) == 1.0

    def test_disjoint_nonempty(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        b = np.zeros((4, 4), dtype=np.uint8)
        a[0, 0] = 1
        b[3, 3] = 1
        assert mx.dsc(a, b) == mx.iou(a, b) == mx.pixel_f1(a, b) == 0.0

    def test_hand_counted_fixture(self):
        # |A| = 4, |B| = 2, overlap 2 on a 3x3 grid.
        a = np.array([[1, 1, 0], [1, 1, 0], [0, 0, 0]], dtype=np.uint8)
        b = np.array([[1, 1, 0], [0, 0, 0], [0, 0, 0]], dtype=np.uint8)
        assert mx.dsc(a, b) == pytest.approx(2 * 2 / 6)
        assert mx.iou(a, b) == pytest.approx(2 / 4)

    def test_empty_vs_empty_is_one(self):
        z = np.zeros((3, 3), dtype=np.uint8)
        assert mx.dsc(z, z) == mx.iou(z, z) == mx.pixel_f1(z, z) == mx.object_f1(z, z) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mx.dsc(np.zeros((2, 2)), np.zeros((3, 3)))


class TestObjectF1:
    def test_identical_single_blob(self):
        m = np.zeros((8, 8), dtype=np.uint8)
        m[2:5, 2:5] = 1
        assert mx.object_f1(m, m) == 1.0

    def test_empty_prediction_two_truth_blobs(self):
        truth = np.zeros((8, 8), dtype=np.uint8)
        truth[0:2, 0:2] = 1
        truth[5:7, 5:7] = 1
        assert mx.object_f1(np.zeros_like(truth), truth) == 0.0

    def test_one_of_two_blobs_found(self):
        truth = np.zeros((8, 8), dtype=np.uint8)
        truth[0:2, 0:2] = 1
        truth[5:7, 5:7] = 1
        pred = np.zeros_like(truth)
        pred[0:2, 0:2] = 1
        # TP=1, FP=0, FN=1 -> F1 = 2/3
        assert mx.object_f1(pred, truth) == pytest.approx(2 / 3)

    def test_low_iou_match_rejected(self):
        truth = np.zeros((8, 8), dtype=np.uint8)
        truth[0:4, 0:4] = 1
        pred = np.zeros_like(truth)
        pred[3, 3] = 1  # overlaps 1 of 16 pixels
        assert mx.object_f1(pred, truth) == 0.0

    def test_diagonal_blobs_are_separate_components(self):
        # 4-connectivity: diagonal touch does not merge components.
        truth = np.zeros((4, 4), dtype=np.uint8)
        truth[0, 0] = 1
        truth[1, 1] = 1
        pred = truth.copy()
        assert mx.object_f1(pred, truth) == 1.0


class TestSummaries:
    def test_single_score(self):
        s = mx.summarize([0.5])
        assert s.mean == s.median == s.max == s.percentile_10 == 0.5

    def test_percentile_linear_interpolation(self):
        scores = np.arange(1, 101) / 100.0
        s = mx.summarize(scores)
        assert s.percentile_10 == pytest.approx(0.109)
        assert s.median == pytest.approx(0.505)
        assert s.max == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mx.summarize([])
        with pytest.raises(ValueError):
            mx.histogram([])

    def test_histogram_edges(self):
        counts = mx.histogram([0.05, 0.95], n_bins=10)
        expected = np.zeros(10, dtype=int)
        expected[0] = expected[9] = 1
        np.testing.assert_array_equal(counts, expected)

    def test_histogram_includes_one(self):
        counts = mx.histogram([1.0], n_bins=10)
        assert counts[9] == 1


def random_pairs(n, rng):
    for _ in range(n):
        shape = (rng.integers(4, 12), rng.integers(4, 12))
        yield (rng.random(shape) < 0.4).astype(np.uint8), (rng.random(shape) < 0.4).astype(np.uint8)


class TestIdentities:
    def test_iou_dsc_and_f1_identities(self):
        rng = np.random.default_rng(1)
        for pred, truth in random_pairs(1000, rng):
            d = mx.dsc(pred, truth)
            assert abs(mx.iou(pred, truth) - d / (2.0 - d)) < 1e-12
            assert abs(mx.pixel_f1(pred, truth) - d) < 1e-12

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        for pred, truth in random_pairs(100, rng):
            assert mx.dsc(pred, truth) == mx.dsc(truth, pred)

    def test_adding_correct_pixel_never_decreases_dsc(self):
        rng = np.random.default_rng(3)
        for pred, truth in random_pairs(50, rng):
            before = mx.dsc(pred, truth)
            missing = np.argwhere(np.logical_and(truth == 1, pred == 0))
            if missing.size == 0:
                continue
            y, x = missing[0]
            fixed = pred.copy()
            fixed[y, x] = 1
            assert mx.dsc(fixed, truth) >= before

    def test_summary_ordering(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            scores = rng.random(rng.integers(1, 40))
            s = mx.summarize(scores)
            assert s.percentile_10 <= s.median <= s.max
