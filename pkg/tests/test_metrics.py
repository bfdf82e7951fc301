import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lungscreen.errors import EmptyCounts, LengthMismatch, NoPositives, SingleClass, UndefinedMetric
from lungscreen.metrics import (
    ACCURACY,
    YOUDEN,
    ConfusionCounts,
    EvalReport,
    PredictionSet,
    accuracy,
    align,
    auc,
    auprc,
    candidate_thresholds,
    confusion,
    delong_test,
    f1,
    log_loss,
    objective_at,
    pr_curve,
    precision,
    read_predictions,
    roc_curve,
    sensitivity,
    specificity,
    threshold_sweep,
    write_predictions,
)

from oracles import (
    auprc_enumeration,
    bootstrap_p,
    confusion_tally,
    correlated_fixture,
    delong_oracle,
    pairwise_auc,
)

COUNTS_A = ConfusionCounts(tp=148, tn=915, fp=12, fn=284)
COUNTS_B = ConfusionCounts(tp=222, tn=967, fp=13, fn=247)


def random_preds(rng, n=None, ties=True):
    n = n or int(rng.integers(2, 201))
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1
    scores = rng.random(n)
    if ties:
        scores = np.round(scores, int(rng.integers(1, 3)))
    return PredictionSet(scores, labels)


class TestConfusion:
    def test_basic(self):
        assert confusion([0.9, 0.1], labels=[1, 0]) == ConfusionCounts(tp=1, tn=1)

    def test_ties_predicted_positive(self):
        c = confusion(np.full(4, 0.5), labels=[0, 1, 0, 1])
        assert (c.tp, c.fp, c.tn, c.fn) == (2, 2, 0, 0)

    def test_against_tally(self, rng):
        for _ in range(20):
            p = random_preds(rng)
            t = float(rng.random())
            c = confusion(p, t)
            assert (c.tp, c.tn, c.fp, c.fn) == confusion_tally(p.scores.tolist(), p.labels.tolist(), t)

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            confusion([0.5], 1.5, labels=[1])


class TestReferenceCounts:
    @pytest.mark.parametrize(
        "counts, expected",
        [
            (COUNTS_A, {"accuracy": 0.782, "sensitivity": 0.343, "specificity": 0.987, "f1": 0.500}),
            (COUNTS_B, {"accuracy": 0.821, "sensitivity": 0.473, "specificity": 0.987, "f1": 0.631}),
        ],
    )
    def test_reference_counts(self, counts, expected):
        fns = {"accuracy": accuracy, "sensitivity": sensitivity, "specificity": specificity, "f1": f1}
        for name, want in expected.items():
            assert abs(fns[name](counts) - want) <= 0.0005, name

    def test_totals(self):
        assert COUNTS_A.n == 1359 and COUNTS_B.n == 1449

    def test_perfect(self):
        c = ConfusionCounts(tp=1, tn=1)
        assert accuracy(c) == 1.0
        assert f1(ConfusionCounts(tp=3, tn=2)) == 1.0


class TestUndefined:
    def test_empty(self):
        with pytest.raises(EmptyCounts):
            accuracy(ConfusionCounts())

    @pytest.mark.parametrize(
        "fn, counts",
        [
            (sensitivity, ConfusionCounts(tn=3)),
            (specificity, ConfusionCounts(tp=3)),
            (precision, ConfusionCounts(fn=2, tn=1)),
            (f1, ConfusionCounts(tn=4)),
        ],
    )
    def test_zero_denominators(self, fn, counts):
        with pytest.raises(UndefinedMetric):
            fn(counts)

    def test_negative_count(self):
        with pytest.raises(ValueError):
            ConfusionCounts(tp=-1)

    @settings(max_examples=200)
    @given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 500), st.integers(0, 500))
    def test_identities(self, tp, tn, fp, fn):
        c = ConfusionCounts(tp, tn, fp, fn)
        if c.n:
            assert accuracy(c) * c.n == pytest.approx(tp + tn)
        if tp:
            assert f1(c) == pytest.approx(2 * tp / (2 * tp + fp + fn))
        for metric in (accuracy, sensitivity, specificity, precision, f1):
            try:
                assert 0.0 <= metric(c) <= 1.0
            except (UndefinedMetric, EmptyCounts):
                pass


class TestLogLoss:
    def test_half(self):
        assert log_loss(np.full(6, 0.5), [0, 1, 1, 0, 1, 0]) == pytest.approx(0.693147, abs=1e-6)

    def test_confident(self):
        assert log_loss([0.9, 0.1], [1, 0]) == pytest.approx(0.105361, abs=1e-6)

    def test_clipped(self):
        v = log_loss([1.0], [0])
        assert math.isfinite(v) and v == pytest.approx(34.538776, abs=1e-5)

    def test_prevalence_minimises_constant(self, rng):
        for _ in range(5):
            labels = rng.integers(0, 2, size=50)
            labels[:2] = [0, 1]
            prevalence = labels.mean()
            grid = np.linspace(0.01, 0.99, 99)
            losses = [log_loss(np.full(50, c), labels) for c in grid]
            best = grid[int(np.argmin(losses))]
            assert abs(best - prevalence) <= 0.01
            assert log_loss(np.full(50, prevalence), labels) <= min(losses) + 1e-12


class TestRoc:
    def test_perfect(self):
        assert auc([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0

    def test_all_tied(self):
        assert auc(np.full(7, 0.3), [0, 1, 0, 1, 1, 0, 0]) == 0.5

    def test_single_class(self):
        with pytest.raises(SingleClass):
            auc([0.1, 0.2], [1, 1])

    def test_against_pairwise(self, rng):
        for _ in range(50):
            p = random_preds(rng)
            assert abs(auc(p) - pairwise_auc(p.scores.tolist(), p.labels.tolist())) <= 1e-12

    def test_curve_shape(self, rng):
        p = random_preds(rng, 80)
        c = roc_curve(p)
        assert (c.x[0], c.y[0]) == (0.0, 0.0) and (c.x[-1], c.y[-1]) == (1.0, 1.0)
        assert np.all(np.diff(c.x) >= 0) and np.all(np.diff(c.y) >= 0)
        assert c.thresholds[0] == np.inf
        assert len(c.x) == len(np.unique(p.scores)) + 1

    def test_complement(self, rng):
        for _ in range(20):
            p = random_preds(rng, 60, ties=False)
            assert auc(p) + auc(1 - p.scores, p.labels) == pytest.approx(1.0, abs=1e-12)

    def test_cube_invariance(self, rng):
        p = random_preds(rng, 100)
        assert auc(p.scores**3, p.labels) == auc(p)

    def test_input_order_irrelevant(self, rng):
        p = random_preds(rng, 50)
        perm = rng.permutation(50)
        assert auc(p.scores[perm], p.labels[perm]) == auc(p)


class TestPr:
    def test_perfect(self):
        assert auprc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_all_tied_is_prevalence(self):
        labels = [1, 0, 0, 1, 0]
        assert auprc(np.full(5, 0.4), labels) == pytest.approx(0.4)
        c = pr_curve(np.full(5, 0.4), labels)
        assert c.x[-1] == 1.0 and c.y[-1] == pytest.approx(0.4)

    def test_no_positives(self):
        with pytest.raises(NoPositives):
            auprc([0.2, 0.3], [0, 0])

    def test_against_enumeration(self, rng):
        for _ in range(50):
            p = random_preds(rng)
            assert auprc(p) == pytest.approx(auprc_enumeration(p.scores.tolist(), p.labels.tolist()), abs=1e-12)


class TestDelong:
    def test_identical(self, rng):
        a, _, y = correlated_fixture(rng)
        r = delong_test(a, a, y)
        assert r.p_value == 1.0 and r.auc_a == r.auc_b and r.z == 0.0
        auc_a, auc_b, z, p = r
        assert p == 1.0

    def test_matches_oracle(self, rng):
        for ties in (False, True):
            a, b, y = correlated_fixture(rng, n=20, ties=ties)
            got = delong_test(a, b, y)
            want = delong_oracle(a, b, y)
            assert got.auc_a == pytest.approx(want[0], abs=1e-12)
            assert got.auc_b == pytest.approx(want[1], abs=1e-12)
            assert got.z == pytest.approx(want[2], abs=1e-9)
            assert got.p_value == pytest.approx(want[3], abs=1e-9)

    def test_antisymmetric(self, rng):
        a, b, y = correlated_fixture(rng)
        ab, ba = delong_test(a, b, y), delong_test(b, a, y)
        assert ab.z == pytest.approx(-ba.z, abs=1e-12) and ab.p_value == pytest.approx(ba.p_value, abs=1e-12)

    def test_bootstrap_agreement(self, rng):
        a, b, y = correlated_fixture(rng)
        assert abs(delong_test(a, b, y).p_value - bootstrap_p(a, b, y, seed=1)) <= 0.02

    def test_errors(self):
        with pytest.raises(SingleClass):
            delong_test([0.1, 0.2], [0.3, 0.4], [1, 1])
        with pytest.raises(LengthMismatch):
            delong_test([0.1, 0.2], [0.3], [1, 0])

    def test_auc_matches_auc(self, rng):
        a, b, y = correlated_fixture(rng)
        lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
        scale = lambda s: (s - lo) / (hi - lo)
        r = delong_test(a, b, y)
        assert r.auc_a == pytest.approx(auc(scale(a), y), abs=1e-12)


class TestSweep:
    def test_separable(self):
        r = threshold_sweep([0.2, 0.4, 0.6, 0.8], labels=[0, 0, 1, 1])
        assert r.threshold == 0.5 and r.value == 1.0

    def test_anti_separable(self):
        r = threshold_sweep([0.2, 0.4, 0.6, 0.8], labels=[1, 1, 0, 0])
        assert r.value == 0.5 and r.threshold in (0.0, 1.0)
        assert r.threshold == 1.0  # ties go high

    def test_candidates(self):
        np.testing.assert_allclose(candidate_thresholds([0.2, 0.4, 0.4, 0.8], labels=[0, 1, 0, 1]), [0, 0.3, 0.6, 1])

    @pytest.mark.parametrize("objective", [ACCURACY, YOUDEN])
    def test_exhaustive(self, rng, objective):
        for _ in range(20):
            p = random_preds(rng, 60)
            r = threshold_sweep(p, objective)
            for t in candidate_thresholds(p):
                assert r.value >= objective_at(p, t, objective) - 1e-12
            # also at arbitrary thresholds, since candidates cover every distinct partition
            for t in rng.random(20):
                assert r.value >= objective_at(p, t, objective) - 1e-12

    def test_half_reproduces_accuracy(self, rng):
        p = random_preds(rng, 70)
        assert objective_at(p, 0.5, ACCURACY) == accuracy(confusion(p, 0.5))

    def test_single_class(self):
        with pytest.raises(SingleClass):
            threshold_sweep([0.1, 0.9], labels=[0, 0])

    def test_unknown_objective(self):
        with pytest.raises(ValueError):
            objective_at([0.1, 0.9], 0.5, "kappa", labels=[0, 1])


class TestReport:
    def synthesized(self, counts):
        """Predictions engineered to hit given confusion counts at 0.5."""
        scores = [0.8] * counts.tp + [0.2] * counts.fn + [0.7] * counts.fp + [0.3] * counts.tn
        labels = [1] * counts.tp + [1] * counts.fn + [0] * counts.fp + [0] * counts.tn
        return PredictionSet(np.array(scores), np.array(labels))

    def test_table_layout(self):
        report = EvalReport.from_predictions(self.synthesized(COUNTS_A))
        table = report.table()
        expected_rows = ["Total", "# Positive", "# Negative", "AUC", "AUPRC", "Accuracy", "LogLoss",
                         "f1-score", "Sensitivity", "Specificity", "# False Positives", "# False Negatives"]
        assert [line.split("  ")[0].strip() for line in table.splitlines()] == expected_rows
        assert "Accuracy           0.782" in table
        assert "f1-score           0.500" in table
        assert "Sensitivity        0.343" in table
        assert "Specificity        0.987" in table

    def test_text_block(self):
        report = EvalReport.from_predictions(self.synthesized(COUNTS_B))
        values = dict(line.split("=") for line in report.to_text().splitlines())
        assert int(values["total"]) == 1449 and int(values["fp"]) == 13
        assert float(values["f1"]) == pytest.approx(444 / 704)

    def test_undefined_becomes_nan(self):
        report = EvalReport.from_predictions(PredictionSet([0.1, 0.2], [0, 0]))
        assert math.isnan(report.sensitivity) and math.isnan(report.auc) and report.roc is None
        assert "nan" in report.table()

    def test_predictions_round_trip(self, tmp_path, rng):
        p = PredictionSet(rng.random(5), [0, 1, 1, 0, 1], ("a", "b", "c", "d", "e"))
        write_predictions(tmp_path / "p.csv", p)
        q = read_predictions(tmp_path / "p.csv")
        assert q.ids == p.ids and np.array_equal(q.scores, p.scores) and np.array_equal(q.labels, p.labels)

    def test_read_requires_label(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("id,score,label\na,0.5,\n")
        with pytest.raises(ValueError):
            read_predictions(path)

    def test_align(self):
        a = PredictionSet([0.1, 0.9], [0, 1], ("x", "y"))
        b = PredictionSet([0.8, 0.2], [1, 0], ("y", "x"))
        sa, sb, y = align(a, b)
        assert sb.tolist() == [0.2, 0.8] and y.tolist() == [0, 1]
        with pytest.raises(LengthMismatch):
            align(a, PredictionSet([0.5], [1], ("y",)))

    @pytest.mark.parametrize("scores", [[1.5], [-0.1], [math.nan]])
    def test_scores_validated(self, scores):
        with pytest.raises(ValueError):
            PredictionSet(scores, [1])
