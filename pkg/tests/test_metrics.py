import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import auc_pairs, dice_scan, pointing_scan
from vlcabs.errors import DegenerateLabels, DimensionMismatch, EmptyMasks
from vlcabs.metrics import (MetricResult, SIGMOID_INTERVAL, SOFTMAX_INTERVAL, argmax_pixel, dice_curve,
                            dice_with_search, pixel_auc, pointing_game, roc_auc, thresholds_for,
                            write_report)


class TestRocAuc:
    def test_perfect_and_inverted(self):
        assert roc_auc([0.9, 0.1], [1, 0]) == 1.0
        assert roc_auc([0.1, 0.9], [1, 0]) == 0.0

    def test_ties_half(self):
        assert roc_auc([0.5, 0.5], [1, 0]) == 0.5

    def test_against_pairs(self, rng):
        for _ in range(20):
            n = 200
            scores = np.round(rng.normal(size=n), 1)  # rounding forces ties
            labels = rng.integers(0, 2, size=n)
            assert abs(roc_auc(scores, labels) - auc_pairs(scores, labels)) <= 1e-9

    @settings(max_examples=50)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_monotone_invariance(self, seed):
        rng = np.random.default_rng(seed)
        scores = rng.normal(size=50)
        labels = np.r_[1, 0, rng.integers(0, 2, size=48)]
        base = roc_auc(scores, labels)
        assert roc_auc(1 / (1 + np.exp(-scores)), labels) == base
        assert roc_auc(np.exp(scores), labels) == base
        assert roc_auc(3 * scores - 7, labels) == base

    def test_errors(self):
        with pytest.raises(DegenerateLabels):
            roc_auc([0.1, 0.2], [1, 1])
        with pytest.raises(DimensionMismatch):
            roc_auc([0.1, 0.2], [1])


class TestPointing:
    def _map(self):
        m = np.zeros((30, 30))
        m[10, 10] = 1.0
        return m

    def test_hit_and_miss(self):
        assert pointing_game(self._map(), (5, 5, 15, 15)) == 1
        assert pointing_game(self._map(), (20, 20, 30, 30)) == 0

    def test_any_box(self):
        assert pointing_game(self._map(), [(20, 20, 30, 30), (10, 10, 10, 10)]) == 1

    def test_box_is_x_then_y(self):
        m = np.zeros((20, 20))
        m[2, 15] = 1.0  # row 2, column 15
        assert pointing_game(m, (14, 1, 16, 3)) == 1
        assert pointing_game(m, (1, 14, 3, 16)) == 0

    def test_first_occurrence_ties(self):
        m = np.zeros((4, 4))
        m[1, 3] = m[2, 0] = 5.0
        assert tuple(argmax_pixel(m)) == (1, 3)

    def test_against_scan(self, rng):
        for _ in range(100):
            h, w = rng.integers(5, 40, size=2)
            m = rng.normal(size=(h, w))
            boxes = []
            for _ in range(rng.integers(1, 4)):
                x0, x1 = np.sort(rng.integers(0, w, size=2))
                y0, y1 = np.sort(rng.integers(0, h, size=2))
                boxes.append((x0, y0, x1, y1))
            assert pointing_game(m, boxes) == pointing_scan(m, boxes)
            assert pointing_game(np.tanh(m), boxes) == pointing_game(m, boxes)


class TestDice:
    def test_thresholds(self):
        t = thresholds_for(0.01)
        assert t.size == 101 and t[0] == 0.0 and t[-1] == 1.0 and t[37] == 0.37
        assert thresholds_for(SOFTMAX_INTERVAL).size == 1001
        with pytest.raises(ValueError):
            thresholds_for(0.3)

    def test_separable(self):
        g = np.zeros((6, 6), bool)
        g[1:3, 2:5] = True
        m = np.where(g, 0.9, 0.1)
        t, d = dice_with_search([m], [g], 0.01)
        assert d == 1.0 and t == 0.11

    def test_two_by_two_overlap(self):
        g = np.array([[1, 1, 0, 0]], bool)
        m = np.array([[0.0, 0.6, 0.6, 0.0]])
        _, d = dice_curve([m], [g], thresholds=[0.5])
        assert d[0] == 0.5

    def test_disjoint(self):
        g = np.array([[1, 0, 0, 0]], bool)
        m = np.array([[0.0, 0.9, 0.5, 0.2]])
        t, d = dice_with_search([m], [g])
        ref_t, ref_d = dice_scan([m], [g], thresholds_for(0.01))
        assert (t, d) == (ref_t, ref_d) == (0.0, 0.4)

    @pytest.mark.parametrize("pooled", [False, True])
    def test_against_scan(self, rng, pooled):
        for _ in range(30):
            n = rng.integers(1, 5)
            maps, masks = [], []
            for _ in range(n):
                h, w = rng.integers(3, 12, size=2)
                g = rng.uniform(size=(h, w)) < 0.3
                g[0, 0] = True
                maps.append(np.clip(0.5 * g + rng.uniform(0, 0.6, size=(h, w)), 0, 1).astype(np.float32))
                masks.append(g)
            got = dice_with_search(maps, masks, 0.01, pooled=pooled)
            assert got == dice_scan(maps, masks, thresholds_for(0.01), pooled=pooled)

    def test_refinement_never_worse(self, rng):
        maps = [rng.uniform(size=(8, 8)) for _ in range(3)]
        masks = [rng.uniform(size=(8, 8)) < 0.4 for _ in range(3)]
        coarse = dice_with_search(maps, masks, 0.1)[1]
        fine = dice_with_search(maps, masks, 0.01)[1]
        finest = dice_with_search(maps, masks, 0.001)[1]
        assert coarse <= fine <= finest

    def test_lowest_threshold_on_ties(self):
        g = np.array([[1, 0]], bool)
        m = np.array([[0.8, 0.2]])
        t, d = dice_with_search([m], [g])
        assert d == 1.0 and t == 0.21

    def test_errors(self):
        with pytest.raises(EmptyMasks):
            dice_with_search([np.zeros((2, 2))], [np.zeros((2, 2), bool)])
        with pytest.raises(EmptyMasks):
            dice_with_search([], [])
        with pytest.raises(DimensionMismatch):
            dice_with_search([np.zeros((2, 2))], [np.ones((2, 3), bool)])


class TestPixelAuc:
    def test_mask_and_inverse(self):
        g = np.zeros((5, 5), bool)
        g[2:4, 1:3] = True
        assert pixel_auc([g.astype(float)], [g]) == 1.0
        assert pixel_auc([1.0 - g], [g]) == 0.0

    def test_against_pooled_pairs(self, rng):
        for _ in range(20):
            maps = [np.round(rng.uniform(size=(6, 5)), 2) for _ in range(3)]
            masks = [rng.uniform(size=(6, 5)) < 0.3 for _ in range(3)]
            masks[0][0, 0], masks[1][0, 0] = True, False
            flat_s = np.concatenate([m.ravel() for m in maps])
            flat_l = np.concatenate([g.ravel() for g in masks])
            assert abs(pixel_auc(maps, masks) - auc_pairs(flat_s, flat_l)) <= 1e-9
            assert pixel_auc(maps, masks) == roc_auc(flat_s, flat_l)

    def test_degenerate(self):
        with pytest.raises(DegenerateLabels):
            pixel_auc([np.zeros((2, 2))], [np.zeros((2, 2), bool)])


def test_report(tmp_path):
    results = [MetricResult("auc", 0.75, 10), MetricResult("dice", 0.5, 4, 0.37)]
    write_report(tmp_path / "m.json", results, tmp_path / "m.csv")
    data = json.loads((tmp_path / "m.json").read_text())
    assert data[1] == {"metric": "dice", "value": 0.5, "n": 4, "threshold": 0.37}
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert rows[0]["threshold"] == "" and rows[1]["threshold"] == "0.37"
    assert SIGMOID_INTERVAL == 0.01
