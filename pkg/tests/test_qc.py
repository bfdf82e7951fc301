import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lungscreen.errors import TooFewSlices
from lungscreen.qc import (
    ACCEPT,
    GAP_DETECTED,
    REJECT,
    TOO_FEW_SLICES,
    UNEVEN_SPACING,
    QcPolicy,
    QcReport,
    check_spacing,
    qc_gate,
    remove_duplicate_slices,
)

from conftest import make_volume


def _positions_volume(positions):
    data = np.arange(len(positions))[:, None, None] * np.ones((1, 2, 2))
    return make_volume(data, positions)


def _spacing_oracle(positions, gap_factor, jitter_tol):
    d = [b - a for a, b in zip(positions, positions[1:])]
    m = sorted(d)[len(d) // 2] if len(d) % 2 else (sorted(d)[len(d) // 2 - 1] + sorted(d)[len(d) // 2]) / 2
    gap = any(x > gap_factor * m for x in d)
    uneven = any(abs(x - m) > jitter_tol * m and x <= gap_factor * m for x in d)
    return m, gap, uneven


class TestCheckSpacing:
    def test_uniform(self):
        r = check_spacing(_positions_volume([0, 2, 4, 6]))
        assert r.median_spacing_mm == 2.0 and r.reasons == () and r.verdict == ACCEPT

    def test_gap(self):
        r = check_spacing(_positions_volume([0, 2, 4, 8]))
        assert GAP_DETECTED in r.reasons and r.verdict == REJECT

    def test_small_jitter_below_tolerance(self):
        # the 0.05 mm wobble is 2.5% of the 2 mm median, inside a 5% tolerance
        positions = [0, 2, 4.05, 6.05]
        r = check_spacing(_positions_volume(positions))
        m, gap, uneven = _spacing_oracle(positions, 1.5, 0.05)
        assert (GAP_DETECTED in r.reasons, UNEVEN_SPACING in r.reasons) == (gap, uneven) == (False, False)
        assert r.median_spacing_mm == pytest.approx(m)

    def test_jitter_flagged_with_tighter_tolerance(self):
        r = check_spacing(_positions_volume([0, 2, 4.05, 6.05]), jitter_tol=0.02)
        assert r.reasons == (UNEVEN_SPACING,) and r.verdict == ACCEPT

    def test_needs_two_slices(self):
        with pytest.raises(TooFewSlices):
            check_spacing(_positions_volume([0.0]))

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0.3, 6.0), min_size=1, max_size=25), st.floats(0.0, 0.3))
    def test_matches_oracle(self, steps, jitter):
        positions = list(np.cumsum([0.0, *steps]))
        r = check_spacing(_positions_volume(positions), 1.5, jitter)
        m, gap, uneven = _spacing_oracle(positions, 1.5, jitter)
        assert (GAP_DETECTED in r.reasons) == gap
        assert (UNEVEN_SPACING in r.reasons) == uneven
        assert r.median_spacing_mm == pytest.approx(m)


class TestDuplicates:
    A, B, C = (np.full((3, 3), v) for v in (1, 2, 3))

    def test_abbc(self):
        out, n = remove_duplicate_slices(make_volume([self.A, self.B, self.B, self.C]))
        assert n == 1 and out.num_slices == 3
        np.testing.assert_array_equal(out.slices[:, 0, 0], [1, 2, 3])
        assert out.slice_positions_mm == (0.0, 2.0, 6.0)

    def test_no_duplicates_unchanged(self):
        v = make_volume([self.A, self.B, self.C])
        out, n = remove_duplicate_slices(v)
        assert n == 0 and out == v

    def test_aaa(self):
        out, n = remove_duplicate_slices(make_volume([self.A, self.A, self.A]))
        assert n == 2 and out.num_slices == 1

    def test_non_adjacent_duplicate(self):
        out, n = remove_duplicate_slices(make_volume([self.A, self.B, self.A]))
        assert n == 1 and out.source_ids == (1, 2)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=1, max_size=15))
    def test_idempotent_and_order_preserving(self, codes):
        v = make_volume([np.full((2, 2), c) for c in codes])
        once, _ = remove_duplicate_slices(v)
        twice, n2 = remove_duplicate_slices(once)
        assert n2 == 0 and twice == once
        expected = list(dict.fromkeys(codes))
        assert once.slices[:, 0, 0].tolist() == expected
        assert list(once.slice_positions_mm) == sorted(once.slice_positions_mm)


class TestGate:
    def test_clean_volume_accepted(self, uniform_volume):
        report, cleaned = qc_gate(uniform_volume)
        assert report.verdict == ACCEPT and report.duplicates_removed == 0
        assert cleaned == uniform_volume

    def test_one_duplicate_accepted(self):
        # a repeated final slice: dropping it leaves uniform spacing
        data = [np.full((2, 2), k) for k in range(30)] + [np.full((2, 2), 29)]
        report, cleaned = qc_gate(make_volume(data, [2.0 * k for k in range(31)]))
        assert report.verdict == ACCEPT and report.duplicates_removed == 1
        assert cleaned.num_slices == 30

    def test_interior_duplicate_opens_gap(self):
        data = [np.full((2, 2), k) for k in range(30)]
        data[15] = data[14].copy()
        report, cleaned = qc_gate(make_volume(data))
        assert report.duplicates_removed == 1
        assert GAP_DETECTED in report.reasons and cleaned is None

    def test_too_few_slices(self):
        v = make_volume([np.full((2, 2), k) for k in range(10)])
        report, cleaned = qc_gate(v)
        assert report.verdict == REJECT and report.reasons == (TOO_FEW_SLICES,) and cleaned is None

    def test_uneven_only_is_accepted(self):
        positions = [2.0 * k for k in range(25)]
        positions[5] += 0.3
        v = make_volume([np.full((2, 2), k) for k in range(25)], positions)
        report, cleaned = qc_gate(v)
        assert report.verdict == ACCEPT and report.reasons == (UNEVEN_SPACING,)

    def test_accepted_output_has_no_duplicates(self, rng):
        for _ in range(20):
            codes = rng.integers(0, 25, size=40)
            v = make_volume([np.full((2, 2), c) for c in codes])
            report, cleaned = qc_gate(v, QcPolicy(gap_factor=100.0, min_slices=2))
            assert report.accepted
            keys = {cleaned.slices[k].tobytes() for k in range(cleaned.num_slices)}
            assert len(keys) == cleaned.num_slices

    def test_record_round_trip(self):
        r = QcReport(REJECT, (GAP_DETECTED, TOO_FEW_SLICES), 2, 2.5, "vol1")
        assert r.to_line() == 'vol1,Reject,"GapDetected,TooFewSlices",2,2.5\n'
        assert QcReport.from_record(r.to_record()) == r

    def test_reject_needs_reason(self):
        with pytest.raises(ValueError):
            QcReport(REJECT, ())

    @pytest.mark.parametrize("kw", [{"gap_factor": 1.0}, {"jitter_tol": -0.1}, {"min_slices": 1}])
    def test_policy_validation(self, kw):
        with pytest.raises(ValueError):
            QcPolicy(**kw)
