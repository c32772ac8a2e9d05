"""Matching quality as binary classification over all plan/observation pairs.

Every (plan node, observation node) pair is classified matched/unmatched.
Because both the prediction and the ground truth assign each observation node
exactly once, false positives and false negatives coincide and precision,
recall, and F1 are equal per sample; accuracy is reported but flagged when
true negatives dominate. Aggregation across samples is micro (summed counts).
Timing uses a sequential harness with post-hoc timeout exclusion: every
sample runs to completion, and those over the budget are marked incomplete
and excluded from quality aggregation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

from .datagen import CorpusSample, GroundTruth
from .matching import MatchResult

REPORT_FORMAT_VERSION = 1
DEFAULT_TIMEOUT_S = 60.0
ACCURACY_INFLATION_TN_FRACTION = 0.9


class EvaluationError(ValueError):
    """Invalid prediction or ground truth for scoring."""


@dataclass
class MetricsReport:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    accuracy: float
    accuracy_inflated: bool
    n_samples: int = 1
    mean_time_s: float | None = None
    completed_fraction: float = 1.0

    def quality_json_dict(self) -> dict:
        """Deterministic quality fields only; timing is reported separately."""
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "accuracy": self.accuracy,
            "accuracy_inflated": self.accuracy_inflated,
            "n_samples": self.n_samples,
            "completed_fraction": self.completed_fraction,
        }


def _finish(tp: int, fp: int, fn: int, tn: int, n_samples: int) -> MetricsReport:
    total = tp + fp + fn + tn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    # count form of the harmonic mean; with fp == fn it equals precision
    # and recall exactly, including in float arithmetic
    f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0
    accuracy = (tp + tn) / total if total else 0.0
    inflated = total > 0 and tn / total > ACCURACY_INFLATION_TN_FRACTION
    return MetricsReport(
        tp=tp, fp=fp, fn=fn, tn=tn, precision=precision, recall=recall,
        f1=f1, accuracy=accuracy, accuracy_inflated=inflated, n_samples=n_samples,
    )


def score(pred: MatchResult, gt: GroundTruth, n1: int, n2: int) -> MetricsReport:
    """Score one sample's predicted correspondence against ground truth.

    Both must assign every observation node exactly once to distinct plan
    nodes; out-of-range or duplicate assignments are rejected.
    """
    def check(pairs, label):
        s_seen, a_seen = set(), set()
        for s, a in pairs:
            if not (0 <= s < n2 and 0 <= a < n1):
                raise EvaluationError(f"{label} pair ({s}, {a}) out of range for {n1}x{n2}")
            if s in s_seen or a in a_seen:
                raise EvaluationError(f"{label} assigns a node twice at pair ({s}, {a})")
            s_seen.add(s)
            a_seen.add(a)
        if len(pairs) != n2:
            raise EvaluationError(f"{label} covers {len(pairs)} of {n2} observation nodes")

    pred_pairs = [(s, a) for s, a, _ in pred.pairs]
    check(pred_pairs, "prediction")
    check(list(gt.pairs), "ground truth")
    tp = len(set(pred_pairs) & set(gt.pairs))
    fp = n2 - tp
    fn = n2 - tp
    tn = n1 * n2 - tp - fp - fn
    report = _finish(tp, fp, fn, tn, n_samples=1)
    report.mean_time_s = pred.elapsed_s
    return report


def aggregate(reports: list[MetricsReport]) -> MetricsReport:
    """Micro-average: sum the confusion counts, then recompute the rates."""
    if not reports:
        raise EvaluationError("nothing to aggregate")
    out = _finish(
        tp=sum(r.tp for r in reports),
        fp=sum(r.fp for r in reports),
        fn=sum(r.fn for r in reports),
        tn=sum(r.tn for r in reports),
        n_samples=sum(r.n_samples for r in reports),
    )
    times = [r.mean_time_s for r in reports if r.mean_time_s is not None]
    out.mean_time_s = sum(times) / len(times) if times else None
    out.completed_fraction = sum(r.completed_fraction for r in reports) / len(reports)
    return out


# ---------------------------------------------------------------------------
# Timing harness.


@dataclass
class TimedRun:
    index: int
    elapsed_s: float
    completed: bool
    error: str | None = None
    result: MatchResult | None = None


def time_harness(
    matcher: Callable[[CorpusSample], MatchResult],
    samples: list[CorpusSample],
    timeout_s: float = DEFAULT_TIMEOUT_S,
) -> list[TimedRun]:
    """Run the matcher over all samples sequentially.

    Every call runs to completion; a run counts as incomplete when its wall
    time exceeds ``timeout_s`` or the matcher raises. Failures are recorded
    and the harness keeps going.
    """
    if timeout_s <= 0:
        raise EvaluationError(f"timeout_s must be positive, got {timeout_s}")
    runs = []
    for i, sample in enumerate(samples):
        t0 = time.perf_counter()
        try:
            result = matcher(sample)
        except Exception as exc:  # record and continue; one bad sample must not end the run
            runs.append(TimedRun(index=i, elapsed_s=time.perf_counter() - t0,
                                 completed=False, error=f"{type(exc).__name__}: {exc}"))
            continue
        elapsed = time.perf_counter() - t0
        runs.append(TimedRun(index=i, elapsed_s=elapsed,
                             completed=elapsed <= timeout_s, result=result))
    return runs


@dataclass
class EvalResult:
    aggregate: MetricsReport | None
    per_sample: list[MetricsReport | None]
    runs: list[TimedRun] = field(default_factory=list)

    @property
    def completed_fraction(self) -> float:
        if not self.runs:
            return 0.0
        return sum(1 for r in self.runs if r.completed) / len(self.runs)

    def mean_time_s(self) -> float | None:
        done = [r.elapsed_s for r in self.runs if r.completed]
        return sum(done) / len(done) if done else None

    def report_json_dict(self, split: str | None = None) -> dict:
        """Deterministic report payload: quality only, no wall-clock values."""
        payload: dict = {"version": REPORT_FORMAT_VERSION}
        if split is not None:
            payload["split"] = split
        payload["n_samples"] = len(self.runs)
        payload["completed_fraction"] = self.completed_fraction
        payload["aggregate"] = (
            None if self.aggregate is None else self.aggregate.quality_json_dict()
        )
        payload["per_sample"] = [
            None if r is None else r.quality_json_dict() for r in self.per_sample
        ]
        return payload

    def timing_json_dict(self) -> dict:
        return {
            "version": REPORT_FORMAT_VERSION,
            "mean_time_s": self.mean_time_s(),
            "per_sample": [
                {"index": r.index, "elapsed_s": r.elapsed_s,
                 "completed": r.completed, "error": r.error}
                for r in self.runs
            ],
        }


def evaluate_matcher(
    matcher: Callable[[CorpusSample], MatchResult],
    samples: list[CorpusSample],
    timeout_s: float = DEFAULT_TIMEOUT_S,
) -> EvalResult:
    """Time the matcher on every sample and score the completed runs."""
    runs = time_harness(matcher, samples, timeout_s=timeout_s)
    per_sample: list[MetricsReport | None] = []
    completed_reports = []
    for run in runs:
        if not run.completed or run.result is None:
            per_sample.append(None)
            continue
        sample = samples[run.index]
        report = score(run.result, sample.ground_truth,
                       sample.a_graph.n_nodes, sample.s_graph.n_nodes)
        report.mean_time_s = run.elapsed_s
        per_sample.append(report)
        completed_reports.append(report)
    agg = aggregate(completed_reports) if completed_reports else None
    if agg is not None:
        agg.completed_fraction = sum(1 for r in runs if r.completed) / len(runs)
    return EvalResult(aggregate=agg, per_sample=per_sample, runs=runs)


def report_table(rows: list[tuple[str, MetricsReport]]) -> str:
    """Plain-text table: method, precision/recall/F1 percentages, mean
    matching time, completion percentage."""
    header = ("Method", "Prec. %", "Rec. %", "F1 %", "Time (s)", "Completed %")
    body = []
    for name, r in rows:
        time_str = "-" if r.mean_time_s is None else f"{r.mean_time_s:.3f}"
        body.append(
            (
                name,
                f"{100.0 * r.precision:.1f}",
                f"{100.0 * r.recall:.1f}",
                f"{100.0 * r.f1:.1f}",
                time_str,
                f"{100.0 * r.completed_fraction:.1f}",
            )
        )
    widths = [max(len(header[c]), *(len(row[c]) for row in body)) if body else len(header[c])
              for c in range(len(header))]
    lines = [
        "  ".join(h.ljust(widths[c]) for c, h in enumerate(header)),
        "  ".join("-" * widths[c] for c in range(len(header))),
    ]
    for row in body:
        lines.append("  ".join(cell.ljust(widths[c]) for c, cell in enumerate(row)))
    return "\n".join(lines)
