import math

import numpy as np
import pytest

from qmaxseg import ConfigError, MetricReport, aggregate, compute_report, dsc, hd95
from qmaxseg.metrics import boundary_pixels

import oracles


class TestDsc:
    def test_identical_masks(self):
        m = np.array([[1, 1], [0, 1]])
        assert dsc(m, m, 1) == 1.0

    def test_disjoint_masks(self):
        a = np.array([[1, 0], [0, 0]])
        b = np.array([[0, 0], [0, 1]])
        assert dsc(a, b, 1) == 0.0

    def test_both_empty(self):
        z = np.zeros((3, 3), dtype=int)
        assert dsc(z, z, 1) == 1.0

    def test_worked_4x4(self):
        a = np.zeros((4, 4), dtype=int)
        b = np.zeros((4, 4), dtype=int)
        a[:, :2] = 1  # left two columns, 8 px
        b[:2, :] = 1  # top two rows, 8 px; overlap 4
        assert dsc(a, b, 1) == 0.5

    def test_symmetry(self, rng):
        for _ in range(20):
            a = rng.integers(0, 3, size=(6, 6))
            b = rng.integers(0, 3, size=(6, 6))
            for cls in range(3):
                assert dsc(a, b, cls) == dsc(b, a, cls)

    def test_matches_oracle(self, rng):
        for _ in range(50):
            a = rng.integers(0, 2, size=(5, 5))
            b = rng.integers(0, 2, size=(5, 5))
            assert dsc(a, b, 1) == oracles.ref_dsc(a, b, 1)


class TestBoundary:
    def test_matches_oracle(self, rng):
        for _ in range(50):
            m = rng.integers(0, 2, size=(6, 6)).astype(bool)
            got = {tuple(p) for p in boundary_pixels(m)}
            assert got == set(oracles.ref_boundary(m))

    def test_interior_removed(self):
        m = np.ones((5, 5), dtype=bool)
        pts = {tuple(p) for p in boundary_pixels(m)}
        assert (2, 2) not in pts
        assert (0, 2) in pts  # image border counts as outside


class TestHd95:
    def test_identical_masks(self):
        m = np.zeros((8, 8), dtype=int)
        m[2:5, 2:5] = 1
        assert hd95(m, m, 1) == 0.0

    def test_two_single_pixels(self):
        a = np.zeros((8, 8), dtype=int)
        b = np.zeros((8, 8), dtype=int)
        a[4, 1] = 1
        b[4, 4] = 1
        assert hd95(a, b, 1) == 3.0

    def test_empty_conventions(self):
        z = np.zeros((8, 8), dtype=int)
        m = z.copy()
        m[3, 3] = 1
        assert hd95(z, z, 1) == 0.0
        assert hd95(z, m, 1) == pytest.approx(math.sqrt(2) * 8, rel=1e-12)

    def test_offset_squares_match_oracle(self):
        a = np.zeros((8, 8), dtype=int)
        b = np.zeros((8, 8), dtype=int)
        a[2:6, 2:6] = 1
        b[3:7, 2:6] = 1  # offset by (1, 0)
        assert hd95(a, b, 1) == oracles.ref_hd95(a, b, 1)

    def test_random_masks_match_oracle_exactly(self, rng):
        for _ in range(30):
            a = rng.integers(0, 2, size=(6, 6))
            b = rng.integers(0, 2, size=(6, 6))
            sp = (float(rng.uniform(0.5, 2.0)), float(rng.uniform(0.5, 2.0)))
            assert hd95(a, b, 1, sp) == oracles.ref_hd95(a, b, 1, sp)

    def test_swap_symmetry(self, rng):
        for _ in range(20):
            a = rng.integers(0, 2, size=(6, 6))
            b = rng.integers(0, 2, size=(6, 6))
            assert hd95(a, b, 1) == hd95(b, a, 1)

    def test_spacing_linearity(self, rng):
        for _ in range(20):
            a = rng.integers(0, 2, size=(6, 6))
            b = rng.integers(0, 2, size=(6, 6))
            assert hd95(a, b, 1, (2.0, 2.0)) == 2.0 * hd95(a, b, 1, (1.0, 1.0))

    def test_invalid_spacing(self):
        m = np.zeros((4, 4), dtype=int)
        with pytest.raises(ConfigError):
            hd95(m, m, 1, (0.0, 1.0))
        with pytest.raises(ConfigError):
            hd95(m, m, 1, (1.0, -1.0))


class TestReports:
    def _report(self, d, h):
        return MetricReport(per_class_dsc=dict(d), per_class_hd95=dict(h))

    def test_averages_exclude_background(self):
        rep = self._report({0: 0.0, 1: 0.8, 2: 0.6}, {0: 99.0, 1: 2.0, 2: 4.0})
        assert rep.dsc_avg == pytest.approx(0.7)
        assert rep.hd95_avg == pytest.approx(3.0)

    def test_single_report_aggregate(self):
        rep = self._report({0: 1.0, 1: 0.5}, {0: 0.0, 1: 1.0})
        agg = aggregate([rep])
        assert agg.per_class_dsc == rep.per_class_dsc
        assert agg.per_class_hd95 == rep.per_class_hd95

    def test_two_report_mean(self):
        r1 = self._report({0: 1.0, 1: 0.8}, {0: 0.0, 1: 2.0})
        r2 = self._report({0: 1.0, 1: 0.9}, {0: 0.0, 1: 4.0})
        agg = aggregate([r1, r2])
        assert agg.per_class_dsc[1] == pytest.approx(0.85)
        assert agg.per_class_hd95[1] == pytest.approx(3.0)

    def test_five_fold_mean_matches_recompute(self, rng):
        reports = [self._report({0: rng.uniform(), 1: rng.uniform()},
                                {0: rng.uniform(), 1: rng.uniform()})
                   for _ in range(5)]
        agg = aggregate(reports)
        want = float(np.mean([r.per_class_dsc[1] for r in reports]))
        assert agg.per_class_dsc[1] == pytest.approx(want, rel=1e-12)

    def test_empty_aggregate_raises(self):
        with pytest.raises(ConfigError):
            aggregate([])

    def test_flat_dict_keys(self):
        rep = compute_report(np.zeros((4, 4), dtype=int),
                             np.zeros((4, 4), dtype=int), num_classes=3)
        flat = rep.to_flat_dict()
        assert {"dsc.class_0", "dsc.class_1", "dsc.class_2", "dsc.avg",
                "hd95.class_0", "hd95.avg"} <= set(flat)
