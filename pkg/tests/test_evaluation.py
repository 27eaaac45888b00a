import csv
import io
import math
from fractions import Fraction

import numpy as np
import pytest

from spectok.evaluation import (
    BinaryMetrics,
    Confusion,
    ScoredExample,
    binary_metrics,
    confusion,
    eer,
    format_report,
    partitioned_report,
    report_to_csv,
)


def eer_recount_oracle(scores, labels):
    """Exact-rational re-derivation of the same sweep definition.

    Recounts FAR/FRR from scratch at every distinct score (no cumulative
    sweep, no grouped ties) and interpolates the first crossing with
    Fractions, so any disagreement with the fast implementation is real.
    """
    fakes = [s for s, l in zip(scores, labels) if l == 1]
    reals = [s for s, l in zip(scores, labels) if l == 0]
    pts = [(Fraction(0), Fraction(1))]
    for t in sorted(set(scores), reverse=True):
        far = Fraction(sum(1 for s in reals if s >= t), len(reals))
        frr = Fraction(sum(1 for s in fakes if s < t), len(fakes))
        pts.append((far, frr))
    for (f0, r0), (f1, r1) in zip(pts, pts[1:]):
        if f1 >= r1:
            if f1 == r1:
                return float(f1)
            u = (r0 - f0) / ((f1 - f0) - (r1 - r0))
            return float(f0 + u * (f1 - f0))
    raise AssertionError("no crossing found")


class TestConfusion:
    def test_hand_counts(self):
        c = confusion([0.9, 0.2, 0.8, 0.3], [1, 1, 0, 0], 0.5)
        assert (c.tp, c.fp, c.tn, c.fn) == (1, 1, 1, 1)
        assert c.total == 4

    def test_score_at_threshold_predicts_fake(self):
        c = confusion([0.5], [1], 0.5)
        assert (c.tp, c.fn) == (1, 0)
        c = confusion([0.5], [0], 0.5)
        assert (c.fp, c.tn) == (1, 0)

    def test_label_validation(self):
        with pytest.raises(ValueError):
            confusion([0.5], [2], 0.5)
        with pytest.raises(ValueError):
            confusion([0.5, 0.6], [1], 0.5)


class TestBinaryMetrics:
    def test_hand_case(self):
        m = binary_metrics(Confusion(tp=3, fp=1, tn=4, fn=2))
        assert m.f1 == pytest.approx(6 / 9)
        assert m.sensitivity == pytest.approx(3 / 5)
        assert m.specificity == pytest.approx(4 / 5)
        assert m.degenerate == frozenset()

    def test_f1_equals_harmonic_mean_of_precision_recall(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            tp, fp, tn, fn = (int(v) for v in rng.integers(0, 20, size=4))
            if tp == 0:
                continue
            m = binary_metrics(Confusion(tp, fp, tn, fn))
            prec = tp / (tp + fp)
            rec = tp / (tp + fn)
            assert m.f1 == pytest.approx(2 * prec * rec / (prec + rec), abs=1e-12)

    def test_degenerate_flags(self):
        m = binary_metrics(Confusion(tp=0, fp=0, tn=5, fn=0))
        assert m.f1 == 0.0 and m.sensitivity == 0.0
        assert m.degenerate == frozenset({"f1", "sensitivity"})
        m = binary_metrics(Confusion(tp=2, fp=0, tn=0, fn=0))
        assert m.degenerate == frozenset({"specificity"})

    def test_perfect(self):
        m = binary_metrics(Confusion(tp=5, fp=0, tn=5, fn=0))
        assert (m.f1, m.sensitivity, m.specificity) == (1.0, 1.0, 1.0)


class TestEer:
    def test_perfect_separation_is_zero(self):
        assert eer([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 0.0

    def test_total_reversal_is_one(self):
        assert eer([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]) == 1.0

    def test_all_identical_scores_give_half(self):
        assert eer([0.7, 0.7, 0.7, 0.7], [1, 0, 1, 0]) == 0.5

    def test_equality_at_sweep_point(self):
        # fakes {.8,.7,.2} reals {.6,.5,.4}: at t=.6 both rates are 1/3
        assert eer([0.8, 0.7, 0.2, 0.6, 0.5, 0.4], [1, 1, 1, 0, 0, 0]) == pytest.approx(1 / 3)

    def test_interpolated_crossing(self):
        # fakes {.9,.3,.25} reals {.5,.4}: FRR is flat at 2/3 while FAR jumps
        # 1/2 -> 1, so the crossing interpolates to 2/3
        val = eer([0.9, 0.3, 0.25, 0.5, 0.4], [1, 1, 1, 0, 0])
        assert val == pytest.approx(2 / 3, abs=1e-12)

    def test_matches_recount_oracle_on_random_sets(self):
        rng = np.random.default_rng(42)
        grid = np.linspace(0.0, 1.0, 7)
        for trial in range(200):
            n = int(rng.integers(2, 65))
            labels = rng.integers(0, 2, size=n)
            labels[0], labels[1] = 0, 1  # both classes present
            if trial % 2 == 0:
                scores = rng.choice(grid, size=n)  # heavy ties
            else:
                scores = rng.random(n)
            got = eer(scores, labels)
            want = eer_recount_oracle(scores.tolist(), labels.tolist())
            assert got == pytest.approx(want, abs=1e-9), f"trial {trial}"

    def test_rank_only_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            n = int(rng.integers(4, 40))
            labels = rng.integers(0, 2, size=n)
            labels[:2] = [0, 1]
            scores = rng.choice(np.linspace(-1, 1, 9), size=n)
            base = eer(scores, labels)
            assert eer(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)
            assert eer(2.0 * scores + 1.0, labels) == pytest.approx(base, abs=1e-12)

    def test_example_order_irrelevant(self):
        rng = np.random.default_rng(4)
        scores = rng.random(30)
        labels = rng.integers(0, 2, size=30)
        labels[:2] = [0, 1]
        base = eer(scores, labels)
        perm = rng.permutation(30)
        assert eer(scores[perm], labels[perm]) == pytest.approx(base, abs=1e-12)

    def test_needs_both_classes(self):
        with pytest.raises(ValueError):
            eer([0.1, 0.9], [1, 1])
        with pytest.raises(ValueError):
            eer([], [])


def report_fixture():
    return [
        ScoredExample(0.9, 1, {"algorithm": "synthA", "fake_type": "full"}),
        ScoredExample(0.8, 1, {"algorithm": "synthA", "fake_type": "half"}),
        ScoredExample(0.3, 1, {"algorithm": "synthB", "fake_type": "full"}),
        ScoredExample(0.6, 1, {"algorithm": "synthB", "fake_type": "half"}),
        ScoredExample(0.2, 0, {"singer_seen": "seen"}),
        ScoredExample(0.7, 0, {"singer_seen": "seen"}),
        ScoredExample(0.1, 0, {"singer_seen": "unseen"}),
        ScoredExample(0.4, 0, {"singer_seen": "unseen"}),
    ]


class TestPartitionedReport:
    def test_overall_and_sections(self):
        report = partitioned_report(report_fixture(), threshold=0.5)
        # preds at 0.5: fakes .9 .8 .6 hit, .3 missed; reals .7 hit
        assert (report.confusion.tp, report.confusion.fp) == (3, 1)
        assert (report.confusion.tn, report.confusion.fn) == (3, 1)
        assert report.support_fake == 4 and report.support_real == 4
        by_key = {(s.axis, s.value): s for s in report.sections}
        assert by_key[("algorithm", "synthA")].score == 1.0
        assert by_key[("algorithm", "synthB")].score == 0.5
        assert by_key[("algorithm", "synthB")].metric == "sensitivity"
        assert by_key[("fake_type", "full")].score == 0.5
        assert by_key[("fake_type", "half")].score == 1.0
        assert by_key[("singer_seen", "seen")].score == 0.5
        assert by_key[("singer_seen", "seen")].metric == "specificity"
        assert by_key[("singer_seen", "unseen")].score == 1.0
        assert all(s.support == 2 for s in report.sections)

    def test_eer_matches_direct_call(self):
        exs = report_fixture()
        report = partitioned_report(exs)
        direct = eer([e.score for e in exs], [e.label for e in exs])
        assert report.eer == pytest.approx(direct, abs=1e-12)

    def test_single_class_eer_is_nan(self):
        exs = [ScoredExample(0.9, 1, {}), ScoredExample(0.2, 1, {})]
        report = partitioned_report(exs, axes=())
        assert math.isnan(report.eer)
        assert "specificity" in report.overall.degenerate

    def test_unknown_axis_rejected(self):
        with pytest.raises(ValueError):
            partitioned_report(report_fixture(), axes=("bitrate",))
        with pytest.raises(ValueError):
            partitioned_report([])

    def test_examples_missing_a_partition_are_skipped(self):
        exs = report_fixture()
        exs.append(ScoredExample(0.95, 1, {}))  # no algorithm key
        report = partitioned_report(exs)
        algo_support = sum(s.support for s in report.sections if s.axis == "algorithm")
        assert algo_support == 4


class TestReportOutput:
    def test_format_report_lines(self):
        text = format_report(partitioned_report(report_fixture()))
        assert "threshold          0.5000" in text
        assert "confusion          tp=3 fp=1 tn=3 fn=1" in text
        assert "algorithm[synthA] sensitivity=1.0000 (n=2)" in text

    def test_csv_roundtrip(self, tmp_path):
        report = partitioned_report(report_fixture())
        path = tmp_path / "report.csv"
        text = report_to_csv(report, path)
        assert path.read_text() == text
        rows = list(csv.reader(io.StringIO(text)))
        assert rows[0] == ["section", "partition", "metric", "value", "support"]
        overall = {r[2]: r[3] for r in rows if r[0] == "overall"}
        assert float(overall["f1"]) == pytest.approx(report.overall.f1)
        assert int(overall["tp"]) == 3
        section_rows = [r for r in rows[1:] if r[0] != "overall"]
        assert len(section_rows) == len(report.sections)
        assert section_rows[0][0] in ("algorithm", "fake_type", "singer_seen")
