"""Region masks and the four evaluation metrics against hand counts and
brute-force oracles."""

import numpy as np
import pytest

from bitrunet import reference
from bitrunet.metrics import (
    HD95_EMPTY_SENTINEL,
    REGIONS,
    RegionSpec,
    dice,
    evaluate_case,
    format_report,
    hd95,
    region_mask,
    sensitivity,
    specificity,
    summarize,
    surface_voxels,
)

rng = np.random.default_rng(31)

WT, TC, ET = REGIONS


class TestRegionMask:
    def test_region_definitions(self):
        assert WT.labels == {1, 2, 4}
        assert TC.labels == {1, 4}
        assert ET.labels == {4}
        assert ET.labels <= TC.labels <= WT.labels

    def test_background_only(self):
        mask = np.zeros((3, 3, 3), dtype=np.uint8)
        for region in REGIONS:
            assert not region_mask(mask, region).any()

    def test_all_enhancing_fills_every_region(self):
        mask = np.full((3, 3, 3), 4, dtype=np.uint8)
        for region in REGIONS:
            assert region_mask(mask, region).all()

    def test_mixed_mask_hand_enumeration(self):
        mask = np.array([1, 2, 4, 0, 2, 1, 4, 0], dtype=np.uint8).reshape(2, 2, 2)
        wt = region_mask(mask, WT)
        tc = region_mask(mask, TC)
        et = region_mask(mask, ET)
        assert wt.ravel().tolist() == [True, True, True, False, True, True, True, False]
        assert tc.ravel().tolist() == [True, False, True, False, False, True, True, False]
        assert et.ravel().tolist() == [False, False, True, False, False, False, True, False]

    def test_nesting_preserved_for_any_mask(self):
        mask = rng.choice([0, 1, 2, 4], (5, 5, 5))
        assert (region_mask(mask, ET) <= region_mask(mask, TC)).all()
        assert (region_mask(mask, TC) <= region_mask(mask, WT)).all()


class TestDice:
    def test_perfect_match(self):
        m = rng.random((4, 4, 4)) < 0.4
        m[0, 0, 0] = True
        assert dice(m, m) == 1.0

    def test_disjoint_sets(self):
        a = np.zeros((3, 3, 3), bool)
        b = np.zeros((3, 3, 3), bool)
        a[0, 0, 0] = True
        b[2, 2, 2] = True
        assert dice(a, b) == 0.0

    def test_hand_arithmetic(self):
        # |P| = 4, |T| = 6, |P ∩ T| = 3 -> 2*3 / 10 = 0.6
        p = np.zeros((2, 2, 3), bool)
        t = np.zeros((2, 2, 3), bool)
        p.ravel()[[0, 1, 2, 5]] = True
        t.ravel()[[0, 1, 2, 6, 7, 8]] = True
        assert dice(p, t) == pytest.approx(0.6)

    def test_both_empty_is_one(self):
        z = np.zeros((2, 2, 2), bool)
        assert dice(z, z) == 1.0

    def test_one_empty_is_zero(self):
        z = np.zeros((2, 2, 2), bool)
        f = np.ones((2, 2, 2), bool)
        assert dice(z, f) == 0.0
        assert dice(f, z) == 0.0

    def test_symmetry(self):
        a = rng.random((4, 4, 4)) < 0.3
        b = rng.random((4, 4, 4)) < 0.3
        assert dice(a, b) == dice(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            dice(np.zeros((2, 2, 2), bool), np.zeros((3, 3, 3), bool))


class TestSensitivitySpecificity:
    def test_perfect_prediction(self):
        m = rng.random((3, 3, 3)) < 0.5
        m[1, 1, 1] = True
        assert sensitivity(m, m) == 1.0
        m2 = m.copy()
        m2[0, 0, 0] = False  # keep at least one negative for specificity
        assert specificity(m2, m2) == 1.0

    def test_all_positive_prediction(self):
        truth = np.zeros((2, 2, 2), bool)
        truth.ravel()[:4] = True
        pred = np.ones((2, 2, 2), bool)
        assert sensitivity(pred, truth) == 1.0
        assert specificity(pred, truth) == 0.0

    def test_hand_tallied_confusion(self):
        pred = np.zeros((4, 4, 4), bool)
        truth = np.zeros((4, 4, 4), bool)
        pred.ravel()[:20] = True
        truth.ravel()[10:34] = True
        # tp = overlap of [0,20) and [10,34) = 10; fn = 24 - 10 = 14
        # fp = 20 - 10 = 10; tn = 64 - 10 - 14 - 10 = 30
        assert sensitivity(pred, truth) == pytest.approx(10 / 24)
        assert specificity(pred, truth) == pytest.approx(30 / 40)

    def test_empty_truth_conventions(self):
        empty = np.zeros((2, 2, 2), bool)
        pred = np.zeros((2, 2, 2), bool)
        assert sensitivity(pred, empty) == 1.0
        full = np.ones((2, 2, 2), bool)
        assert specificity(full, full) == 1.0

    def test_sensitivity_plus_fn_rate_is_one(self):
        pred = rng.random((4, 4, 4)) < 0.5
        truth = rng.random((4, 4, 4)) < 0.5
        truth[0, 0, 0] = True
        tp = int((pred & truth).sum())
        fn = int((~pred & truth).sum())
        assert sensitivity(pred, truth) + fn / (tp + fn) == pytest.approx(1.0)


class TestHd95:
    def test_identical_masks(self):
        m = rng.random((5, 5, 5)) < 0.3
        m[2, 2, 2] = True
        assert hd95(m, m) == 0.0

    def test_two_voxels_three_apart(self):
        a = np.zeros((8, 8, 8), bool)
        b = np.zeros((8, 8, 8), bool)
        a[1, 4, 4] = True
        b[4, 4, 4] = True
        assert hd95(a, b) == pytest.approx(3.0)

    def test_both_empty(self):
        z = np.zeros((3, 3, 3), bool)
        assert hd95(z, z) == 0.0

    def test_one_empty_sentinel(self):
        z = np.zeros((3, 3, 3), bool)
        f = np.zeros((3, 3, 3), bool)
        f[1, 1, 1] = True
        assert hd95(z, f) == HD95_EMPTY_SENTINEL
        assert hd95(f, z, empty_sentinel=99.0) == 99.0

    def test_symmetry(self):
        a = rng.random((6, 6, 6)) < 0.25
        b = rng.random((6, 6, 6)) < 0.25
        a[0, 0, 0] = b[5, 5, 5] = True
        assert hd95(a, b) == hd95(b, a)

    def test_matches_all_pairs_oracle(self):
        for _ in range(10):
            a = rng.random((8, 8, 8)) < 0.2
            b = rng.random((8, 8, 8)) < 0.2
            got = hd95(a, b)
            ref = reference.brute_force_hd95(a, b)
            assert abs(got - ref) < 1e-9

    def test_spacing_scales_distances(self):
        a = np.zeros((8, 4, 4), bool)
        b = np.zeros((8, 4, 4), bool)
        a[1, 2, 2] = True
        b[4, 2, 2] = True
        assert hd95(a, b, spacing=(2.0, 1.0, 1.0)) == pytest.approx(6.0)

    def test_directed_max_mode(self):
        a = rng.random((6, 6, 6)) < 0.3
        b = rng.random((6, 6, 6)) < 0.3
        a[0, 0, 0] = b[3, 3, 3] = True
        pooled = hd95(a, b, mode="pooled")
        directed = hd95(a, b, mode="directed-max")
        assert directed >= 0 and pooled >= 0
        with pytest.raises(ValueError, match="mode"):
            hd95(a, b, mode="bogus")

    def test_surface_definition_matches_brute_force(self):
        for _ in range(5):
            m = rng.random((6, 6, 6)) < 0.4
            assert np.array_equal(surface_voxels(m), reference.brute_force_surface(m))


class TestSummarize:
    def test_single_case(self):
        s = summarize([0.7])
        assert s["mean"] == s["median"] == s["p25"] == s["p75"] == 0.7
        assert s["sd"] == 0.0

    def test_two_values(self):
        s = summarize([0.0, 1.0])
        assert s["median"] == 0.5
        assert s["mean"] == 0.5

    def test_five_known_values(self):
        vals = [0.1, 0.2, 0.4, 0.8, 1.0]
        s = summarize(vals)
        assert s["mean"] == pytest.approx(0.5)
        assert s["median"] == 0.4
        assert s["p25"] == 0.2
        assert s["p75"] == 0.8
        assert s["sd"] == pytest.approx(np.std(vals))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            summarize([])


class TestReport:
    def test_evaluate_case_and_format(self):
        mask = rng.choice([0, 1, 2, 4], (8, 8, 8)).astype(np.uint8)
        results = {"case1": evaluate_case(mask, mask)}
        for region in REGIONS:
            m = results["case1"][region.name]
            assert m["dice"] == 1.0
            assert m["hd95"] == 0.0
        report = format_report(results)
        assert report.startswith("case\tregion\tdice")
        assert "summary\tWT\tdice" in report
