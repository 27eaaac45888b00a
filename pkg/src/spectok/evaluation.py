"""Binary detection metrics: confusion counts, F1, sensitivity/specificity,
equal error rate, and reports partitioned by manifest fields.

Fake is the positive class throughout. A score is compared against the
threshold with >= (a score exactly at the threshold predicts fake). The EER
sweep takes every distinct score as an operating point, walks thresholds
from above the maximum downwards (false-accept rate rises, false-reject rate
falls) and linearly interpolates the crossing between adjacent points, so the
result depends only on the ranking of scores, never their magnitudes.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class BinaryMetrics:
    f1: float
    sensitivity: float
    specificity: float
    degenerate: frozenset[str] = frozenset()


@dataclass
class ScoredExample:
    """One model output attached to its ground truth and partition fields."""

    score: float
    label: int
    partitions: dict[str, str] = field(default_factory=dict)


@dataclass
class ReportSection:
    axis: str
    value: str
    metric: str
    score: float
    support: int


@dataclass
class MetricReport:
    threshold: float
    confusion: Confusion
    overall: BinaryMetrics
    eer: float
    support_real: int
    support_fake: int
    sections: list[ReportSection]


def confusion(scores: Sequence[float], labels: Sequence[int], threshold: float) -> Confusion:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape:
        raise ValueError(f"scores shape {scores.shape} != labels shape {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 (real) or 1 (fake)")
    pred = scores >= threshold
    pos = labels == 1
    return Confusion(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def binary_metrics(c: Confusion) -> BinaryMetrics:
    """F1 = 2TP / (2TP + FP + FN); empty denominators give 0 and a flag."""
    degenerate = set()
    f1_den = 2 * c.tp + c.fp + c.fn
    if f1_den == 0:
        degenerate.add("f1")
        f1 = 0.0
    else:
        f1 = 2 * c.tp / f1_den
    if c.tp + c.fn == 0:
        degenerate.add("sensitivity")
        sens = 0.0
    else:
        sens = c.tp / (c.tp + c.fn)
    if c.tn + c.fp == 0:
        degenerate.add("specificity")
        spec = 0.0
    else:
        spec = c.tn / (c.tn + c.fp)
    return BinaryMetrics(f1, sens, spec, frozenset(degenerate))


def _roc_points(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """FAR/FRR at thresholds above max(scores) then at each distinct score, descending."""
    n_real = int(np.sum(labels == 0))
    n_fake = int(np.sum(labels == 1))
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    far = [0.0]
    frr = [1.0]
    accepted_real = 0
    accepted_fake = 0
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            accepted_fake += int(y[j] == 1)
            accepted_real += int(y[j] == 0)
            j += 1
        far.append(accepted_real / n_real)
        frr.append((n_fake - accepted_fake) / n_fake)
        i = j
    return np.asarray(far), np.asarray(frr)


def eer(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Equal error rate by linear interpolation between adjacent sweep points."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(scores) == 0:
        raise ValueError("eer needs at least one example")
    if not (np.any(labels == 0) and np.any(labels == 1)):
        raise ValueError("eer needs both classes present")
    far, frr = _roc_points(scores, labels)
    # first index where the rising FAR meets or passes the falling FRR
    k = int(np.argmax(far >= frr))
    if far[k] == frr[k]:
        return float(far[k])
    d_far = far[k] - far[k - 1]
    d_frr = frr[k] - frr[k - 1]
    u = (frr[k - 1] - far[k - 1]) / (d_far - d_frr)
    return float(far[k - 1] + u * d_far)


def _group_metric(
    examples: list[ScoredExample], axis: str, metric: str, threshold: float
) -> list[ReportSection]:
    groups: dict[str, list[ScoredExample]] = {}
    for ex in examples:
        key = ex.partitions.get(axis)
        if key is None:
            continue
        groups.setdefault(key, []).append(ex)
    sections = []
    for value in sorted(groups):
        exs = groups[value]
        c = confusion([e.score for e in exs], [e.label for e in exs], threshold)
        m = binary_metrics(c)
        sections.append(ReportSection(axis, value, metric, getattr(m, metric), len(exs)))
    return sections


DEFAULT_AXES = ("algorithm", "fake_type", "singer_seen")


def partitioned_report(
    examples: Sequence[ScoredExample],
    threshold: float = 0.5,
    axes: Sequence[str] = DEFAULT_AXES,
) -> MetricReport:
    """Overall metrics plus per-partition breakdowns.

    algorithm and fake_type sections report sensitivity over fake examples;
    singer_seen reports specificity over real examples.
    """
    examples = list(examples)
    if not examples:
        raise ValueError("empty example list")
    scores = [e.score for e in examples]
    labels = [e.label for e in examples]
    c = confusion(scores, labels, threshold)
    overall = binary_metrics(c)
    both = any(l == 0 for l in labels) and any(l == 1 for l in labels)
    rate = eer(scores, labels) if both else float("nan")
    sections: list[ReportSection] = []
    for axis in axes:
        if axis in ("algorithm", "fake_type"):
            fakes = [e for e in examples if e.label == 1]
            sections.extend(_group_metric(fakes, axis, "sensitivity", threshold))
        elif axis == "singer_seen":
            reals = [e for e in examples if e.label == 0]
            sections.extend(_group_metric(reals, axis, "specificity", threshold))
        else:
            raise ValueError(f"unknown report axis {axis!r}")
    return MetricReport(
        threshold=threshold,
        confusion=c,
        overall=overall,
        eer=rate,
        support_real=labels.count(0),
        support_fake=labels.count(1),
        sections=sections,
    )


def format_report(report: MetricReport) -> str:
    c = report.confusion
    lines = [
        f"threshold          {report.threshold:.4f}",
        f"examples           {c.total} ({report.support_fake} fake / {report.support_real} real)",
        f"confusion          tp={c.tp} fp={c.fp} tn={c.tn} fn={c.fn}",
        f"f1                 {report.overall.f1:.4f}",
        f"sensitivity        {report.overall.sensitivity:.4f}",
        f"specificity        {report.overall.specificity:.4f}",
        f"eer                {report.eer:.4f}",
    ]
    if report.overall.degenerate:
        lines.append(f"degenerate         {','.join(sorted(report.overall.degenerate))}")
    for s in report.sections:
        lines.append(f"{s.axis}[{s.value}] {s.metric}={s.score:.4f} (n={s.support})")
    return "\n".join(lines)


def report_to_csv(report: MetricReport, path: str | Path | None = None) -> str:
    """Flatten the report to CSV rows (section, partition, metric, value, support)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["section", "partition", "metric", "value", "support"])
    c = report.confusion
    for name, value in (
        ("threshold", report.threshold),
        ("f1", report.overall.f1),
        ("sensitivity", report.overall.sensitivity),
        ("specificity", report.overall.specificity),
        ("eer", report.eer),
        ("tp", c.tp),
        ("fp", c.fp),
        ("tn", c.tn),
        ("fn", c.fn),
    ):
        w.writerow(["overall", "", name, value, c.total])
    for s in report.sections:
        w.writerow([s.axis, s.value, s.metric, s.score, s.support])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
