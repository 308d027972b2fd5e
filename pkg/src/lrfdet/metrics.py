"""Image-level fault detection rates: CDR, MDR, FDR and their means.

An image counts as a predicted fault image when it has at least one
detection of the fault class. With ``m`` fault images and ``n`` normal
images::

    CDR = (correct_fault + correct_normal) / (m + n)
    MDR = missed / (m + n)
    FDR = false_alarm / (m + n)

Rates are kept as exact fractions so the three always sum to one.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from decimal import Decimal
from fractions import Fraction
from typing import Iterable, List, Mapping, Sequence, Tuple

import numpy as np

CORRECT_FAULT, CORRECT_NORMAL, MISSED, FALSE_ALARM = "correct_fault", "correct_normal", "missed", "false_alarm"
VERDICTS = (CORRECT_FAULT, CORRECT_NORMAL, MISSED, FALSE_ALARM)


def _class_of(det) -> str:
    if isinstance(det, Mapping):
        return det["cls"]
    return getattr(det, "class_name", None) or getattr(det, "label")


def image_verdict(detections: Iterable, annotation, fault_class: str = "fault") -> str:
    """Verdict for one image from its (already thresholded) detections."""
    predicted = any(_class_of(d) == fault_class for d in detections)
    actual = annotation.has_fault if hasattr(annotation, "has_fault") else bool(annotation)
    if actual:
        return CORRECT_FAULT if predicted else MISSED
    return FALSE_ALARM if predicted else CORRECT_NORMAL


@dataclass(frozen=True)
class EvalReport:
    name: str
    correct_fault: int
    correct_normal: int
    missed: int
    false_alarm: int

    @property
    def m(self) -> int:
        """Fault images."""
        return self.correct_fault + self.missed

    @property
    def n(self) -> int:
        """Normal images."""
        return self.correct_normal + self.false_alarm

    @property
    def total(self) -> int:
        return self.m + self.n

    @property
    def cdr(self) -> Fraction:
        return Fraction(self.correct_fault + self.correct_normal, self.total)

    @property
    def mdr(self) -> Fraction:
        return Fraction(self.missed, self.total)

    @property
    def fdr(self) -> Fraction:
        return Fraction(self.false_alarm, self.total)

    def literal_symbols(self) -> dict:
        """The alternative reading of the rate formula's symbols, kept for audit:
        a = images detected as fault, c = images detected as normal, b = missed
        faults, d = false alarms. Under it (a + c) / (m + n) is identically 1."""
        a = self.correct_fault + self.false_alarm
        c = self.correct_normal + self.missed
        return {"a": a, "b": self.missed, "c": c, "d": self.false_alarm,
                "cdr": float(Fraction(a + c, self.total))}

    def as_dict(self) -> dict:
        return {"name": self.name, "m": self.m, "n": self.n,
                "correct_fault": self.correct_fault, "correct_normal": self.correct_normal,
                "missed": self.missed, "false_alarm": self.false_alarm,
                "cdr": float(self.cdr), "mdr": float(self.mdr), "fdr": float(self.fdr),
                "literal_reading": self.literal_symbols()}


def evaluate(verdicts: Iterable[str], name: str = "") -> EvalReport:
    counts = Counter(verdicts)
    unknown = set(counts) - set(VERDICTS)
    if unknown:
        raise ValueError(f"unknown verdicts {sorted(unknown)}")
    if not counts:
        raise ValueError("cannot evaluate an empty set of images")
    report = EvalReport(name, *(counts[v] for v in VERDICTS))
    assert report.cdr + report.mdr + report.fdr == 1
    return report


def aggregate(reports: Sequence[EvalReport]) -> Tuple[Fraction, Fraction, Fraction]:
    """Unweighted means ``(mCDR, mMDR, mFDR)`` across datasets."""
    if not reports:
        raise ValueError("need at least one report")
    k = len(reports)
    return (sum((r.cdr for r in reports), Fraction(0)) / k,
            sum((r.mdr for r in reports), Fraction(0)) / k,
            sum((r.fdr for r in reports), Fraction(0)) / k)


def percent_rows_sum_to_100(cdr: str, mdr: str, fdr: str) -> bool:
    """Identity check on rates printed as percentages with two decimals."""
    return Decimal(cdr) + Decimal(mdr) + Decimal(fdr) == Decimal("100.00")


def _pct(x) -> str:
    return f"{float(x) * 100:.2f}"


def report_json(reports: Sequence[EvalReport]) -> str:
    mc, mm, mf = aggregate(reports)
    return json.dumps({"datasets": [r.as_dict() for r in reports],
                       "mCDR": float(mc), "mMDR": float(mm), "mFDR": float(mf)}, indent=2)


def report_table(reports: Sequence[EvalReport]) -> str:
    """Plain-text table, one row per dataset and a final mean row (percent)."""
    rows: List[Tuple[str, ...]] = [("dataset", "m", "n", "CDR(%)", "MDR(%)", "FDR(%)")]
    for r in reports:
        rows.append((r.name or "-", str(r.m), str(r.n), _pct(r.cdr), _pct(r.mdr), _pct(r.fdr)))
    mc, mm, mf = aggregate(reports)
    rows.append(("mean", str(sum(r.m for r in reports)), str(sum(r.n for r in reports)),
                 _pct(mc), _pct(mm), _pct(mf)))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
             for row in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def evaluate_by_class(verdicts: Iterable[Tuple[str, str]]) -> List[EvalReport]:
    """``(dataset name, verdict)`` pairs -> one report per dataset, in first-seen order."""
    groups = {}
    for name, v in verdicts:
        groups.setdefault(name, []).append(v)
    return [evaluate(vs, name) for name, vs in groups.items()]


def evaluate_detector(params, dataset, threshold: float = 0.9, nms_iou: float = 0.3):
    """Run ``detect`` over ``(image, Annotation)`` samples.

    Images are grouped into datasets by the class of their first object.
    Returns ``(reports, records)`` where ``records`` holds one JSON-ready
    detection record per surviving detection.
    """
    from .detector import detect

    verdicts, records = [], []
    for image, ann in dataset:
        dets = detect(params, np.asarray(image, dtype=np.float32)[None], threshold, nms_iou)
        records += [d.record(ann.id) for d in dets]
        verdicts.append((ann.objects[0].cls if ann.objects else "-", image_verdict(dets, ann)))
    return evaluate_by_class(verdicts), records
