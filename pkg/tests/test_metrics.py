import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gatenet import metrics as M
from gatenet import reference as R
from gatenet.selfcheck import identity_violations, random_pair


def fixed_pair():
    rng = np.random.default_rng(2024)
    gt = np.zeros((8, 8))
    gt[2:6, 1:5] = 1
    return np.round(rng.random((8, 8)) * 255) / 255, gt


# values for fixed_pair() produced by the brute-force oracle (threshold 0.5)
FROZEN = {
    "pa": 0.5625,
    "iou": 0.17647058823529413,
    "dice": 0.3,
    "ber": 0.5,
    "f_max": 0.3582677165354331,
    "f_mean": 0.1326530612244898,
    "f_weighted": 0.3705686879761109,
    "s_measure": 0.35047541230184664,
    "e_measure": 0.47938386666475924,
    "mae": 0.4651348039215686,
}


def checkerboard(n=8):
    return (np.indices((n, n)).sum(0) % 2).astype(float)


@st.composite
def mask_pairs(draw, max_side=12):
    h = draw(st.integers(2, max_side))
    w = draw(st.integers(2, max_side))
    return random_pair(np.random.default_rng(draw(st.integers(0, 2**31))), size=(h, w))


class TestConfusion:
    def test_perfect(self):
        gt = checkerboard() > 0
        c = M.confusion(gt, gt)
        assert c.fp == c.fn == 0 and c.tp == 32

    def test_inverted(self):
        gt = checkerboard() > 0
        c = M.confusion(~gt, gt)
        assert c.tp == c.tn == 0

    def test_matches_loops(self):
        rng = np.random.default_rng(0)
        p, g = rng.random((8, 8)) > 0.5, rng.random((8, 8)) > 0.4
        c = M.confusion(p, g)
        assert (c.tp, c.tn, c.fp, c.fn) == R.counts_naive(p, g)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            M.confusion(np.zeros((2, 2)), np.zeros((2, 3)))


class TestRatios:
    def test_worked_example(self):
        r = M.ratio_metrics(M.Confusion(tp=3, tn=5, fp=1, fn=1))
        assert r["pa"] == pytest.approx(0.8, abs=1e-15)
        assert r["iou"] == pytest.approx(0.6, abs=1e-15)
        assert r["dice"] == pytest.approx(0.75, abs=1e-15)
        assert r["ber"] == pytest.approx(1 - 0.5 * (3 / 4 + 5 / 6), abs=1e-15)
        assert r["ber"] == pytest.approx(0.2083333333333333, abs=1e-15)

    def test_empty_ratios_are_zero(self):
        r = M.ratio_metrics(M.Confusion(0, 4, 0, 0))
        assert r["precision"] == r["recall"] == r["iou"] == r["dice"] == 0.0
        assert r["pa"] == 1.0


class TestFMeasure:
    def test_worked_example(self):
        assert M.f_measure(0.6, 0.9) == pytest.approx(0.65, abs=1e-12)

    def test_edges(self):
        assert M.f_measure(1.0, 1.0) == 1.0
        assert M.f_measure(0.0, 0.7) == 0.0
        assert M.f_measure(0.0, 0.0) == 0.0

    def test_constant_half(self):
        gt = np.zeros((4, 4))
        gt[:2] = 1
        curve, f_max, f_mean = M.f_curve(np.full((4, 4), 0.5), gt)
        k = np.arange(256)
        expect = 1.3 * 0.5 / (0.3 * 0.5 + 1)
        np.testing.assert_allclose(curve[k / 255 <= 0.5], expect, atol=1e-15)
        np.testing.assert_array_equal(curve[k / 255 > 0.5], 0.0)
        assert f_max == pytest.approx(0.5652173913043478, abs=1e-12)
        # adaptive threshold min(2 * 0.5, 1) = 1 leaves nothing positive
        assert f_mean == 0.0

    def test_binary_identity(self):
        gt = checkerboard()
        curve, f_max, f_mean = M.f_curve(gt, gt)
        np.testing.assert_array_equal(curve[1:], 1.0)
        assert f_max == f_mean == 1.0

    def test_curve_oracle(self):
        pred, gt = random_pair(np.random.default_rng(3), size=16)
        np.testing.assert_allclose(M.f_curve(pred, gt)[0], R.f_curve_naive(pred, gt), rtol=0, atol=1e-12)

    def test_threshold_ties_count_as_positive(self):
        gt = np.array([[1.0, 0.0]])
        pred = np.array([[128 / 255, 0.0]])
        curve = M.f_curve(pred, gt)[0]
        assert curve[128] == 1.0 and curve[129] == 0.0


class TestWeightedF:
    def test_perfect(self):
        gt = np.zeros((10, 10))
        gt[3:7, 2:8] = 1
        assert M.weighted_f(gt, gt) == pytest.approx(1.0, abs=1e-12)

    def test_zero_prediction(self):
        gt = np.zeros((10, 10))
        gt[4:6, 4:6] = 1
        assert M.weighted_f(np.zeros((10, 10)), gt) == 0.0

    def test_oracle(self):
        pred, gt = fixed_pair()
        assert M.weighted_f(pred, gt) == pytest.approx(R.weighted_f_naive(pred, gt), abs=1e-12)

    def test_nearest_foreground_tie_rule(self):
        gt = np.zeros((3, 3), dtype=bool)
        gt[0, 1] = gt[1, 0] = True
        d2, rows, cols = M.nearest_foreground(gt)
        # (0, 0) is equidistant; the smaller column wins
        assert (rows[0, 0], cols[0, 0]) == (1, 0)
        d2_naive, idx = R.nearest_foreground_naive(gt)
        np.testing.assert_array_equal(d2, d2_naive)
        np.testing.assert_array_equal(rows, idx[..., 0])
        np.testing.assert_array_equal(cols, idx[..., 1])

    @settings(max_examples=40, deadline=None)
    @given(mask_pairs())
    def test_range(self, pair):
        assert 0.0 <= M.weighted_f(*pair) <= 1.0


class TestSMeasure:
    def test_perfect(self):
        gt = np.zeros((9, 9))
        gt[2:7, 3:6] = 1
        assert M.s_measure(gt, gt) == pytest.approx(1.0, abs=1e-9)

    def test_empty_gt(self):
        assert M.s_measure(np.zeros((5, 5)), np.zeros((5, 5))) == 1.0
        assert M.s_measure(np.full((5, 5), 0.2), np.zeros((5, 5))) == pytest.approx(0.8, abs=1e-15)

    def test_full_gt(self):
        assert M.s_measure(np.full((5, 5), 0.3), np.ones((5, 5))) == pytest.approx(0.3, abs=1e-15)

    def test_oracle(self):
        pred, gt = fixed_pair()
        assert M.s_measure(pred, gt) == pytest.approx(R.s_measure_naive(pred, gt), abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(mask_pairs())
    def test_range(self, pair):
        assert 0.0 <= M.s_measure(*pair) <= 1.0


class TestEMeasure:
    def test_perfect(self):
        gt = np.zeros((8, 8))
        gt[1:5, 2:7] = 1
        e, curve = M.e_measure(gt, gt)
        assert e == pytest.approx(1.0, abs=1e-9)
        assert curve.shape == (256,)

    def test_inverted_checkerboard(self):
        cb = checkerboard()
        e, _ = M.e_measure(1 - cb, cb)
        assert e < 0.5
        assert e == pytest.approx(R.e_at_naive(1 - cb > 0.5, cb > 0.5), abs=1e-12)

    def test_curve_oracle(self):
        pred, gt = fixed_pair()
        np.testing.assert_allclose(M.e_measure(pred, gt)[1], R.e_curve_naive(pred, gt), rtol=0, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(mask_pairs())
    def test_range(self, pair):
        e, curve = M.e_measure(*pair)
        assert 0.0 <= e <= 1.0
        assert np.all((curve >= 0) & (curve <= 1))


class TestMae:
    def test_constant(self):
        assert M.mae(np.full((3, 3), 0.25), np.zeros((3, 3))) == 0.25

    def test_symmetric(self):
        pred, gt = fixed_pair()
        assert M.mae(pred, gt) == M.mae(gt, pred)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            M.mae(np.zeros((2, 2)), np.zeros((3, 3)))


class TestEvaluatePair:
    def test_frozen_values(self):
        report = M.evaluate_pair(*fixed_pair())
        for name, value in FROZEN.items():
            assert getattr(report, name) == pytest.approx(value, abs=1e-12), name

    def test_matches_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            pred, gt = random_pair(rng, size=16)
            for binarize, thr in ((0.5, 0.5), ("adaptive", None)):
                got = M.evaluate_pair(pred, gt, binarize).metrics()
                want = R.evaluate_naive(pred, gt, thr)
                for k in M.METRIC_NAMES:
                    assert got[k] == pytest.approx(want[k], abs=1e-9), k

    def test_perfect(self):
        gt = np.zeros((16, 16))
        gt[4:11, 3:9] = 1
        m = M.evaluate_pair(gt, gt).metrics()
        for k in ("pa", "f_max", "f_mean", "f_weighted", "s_measure", "e_measure", "iou", "dice"):
            assert m[k] == pytest.approx(1.0, abs=1e-6), k
        assert m["ber"] == m["mae"] == 0.0

    def test_inverted(self):
        gt = np.zeros((16, 16))
        gt[4:11, 3:9] = 1
        m = M.evaluate_pair(1 - gt, gt).metrics()
        assert m["pa"] == m["iou"] == m["dice"] == 0.0
        assert m["ber"] == 1.0

    def test_adaptive_threshold_used(self):
        pred = np.full((4, 4), 0.2)
        assert M.evaluate_pair(pred, np.zeros((4, 4)), "adaptive").threshold_used == pytest.approx(0.4)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError, match="\\[0, 1\\]"):
            M.evaluate_pair(np.full((2, 2), 1.5), np.zeros((2, 2)))

    @settings(max_examples=60, deadline=None)
    @given(mask_pairs(), st.sampled_from([0.5, "adaptive"]))
    def test_identities_and_ranges(self, pair, binarize):
        pred, gt = pair
        assert identity_violations(pred, gt) == []
        m = M.evaluate_pair(pred, gt, binarize).metrics()
        assert all(0.0 <= v <= 1.0 for v in m.values())
        assert abs(m["dice"] - 2 * m["iou"] / (1 + m["iou"])) <= 1e-12
        assert m["f_max"] >= m["f_mean"]


class TestEvaluateDataset:
    def pairs(self, count=5, seed=0):
        rng = np.random.default_rng(seed)
        return [random_pair(rng, size=12) for _ in range(count)]

    def test_two_identical_pairs(self):
        pair = self.pairs(1)[0]
        agg, _ = M.evaluate_dataset([pair, pair])
        single = M.evaluate_pair(*pair).metrics()
        for k, v in agg.metrics().items():
            assert v == pytest.approx(single[k], abs=1e-15)

    def test_mean_mae(self):
        pairs = self.pairs()
        agg, per = M.evaluate_dataset(pairs)
        assert agg.mae == pytest.approx(np.mean([M.mae(p, g) for p, g in pairs]), abs=1e-15)
        assert len(per) == 5

    def test_f_max_from_mean_curve(self):
        agg, per = M.evaluate_dataset(self.pairs())
        assert agg.f_max == np.mean([r.f_curve for r in per], axis=0).max()
        assert agg.f_max <= np.mean([r.f_max for r in per]) + 1e-15

    def test_sorted_names(self):
        pairs = self.pairs(3)
        _, per = M.evaluate_dataset(pairs, names=["c", "a", "b"])
        assert per[0].mae == M.mae(*pairs[1])

    def test_workers_bit_identical(self):
        pairs = self.pairs(6, seed=1)
        seq, _ = M.evaluate_dataset(pairs, jobs=1)
        par, _ = M.evaluate_dataset(pairs, jobs=2)
        assert seq.metrics() == par.metrics()
        assert seq.f_curve.tobytes() == par.f_curve.tobytes()

    def test_empty(self):
        with pytest.raises(ValueError):
            M.evaluate_dataset([])
