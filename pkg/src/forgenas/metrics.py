"""Accuracy and AUC reference implementations plus the report document.

AUC is the Mann-Whitney pair statistic: the fraction of (positive,
negative) pairs ranked correctly, ties credited one half. It is computed
from exact rational tied ranks, so it agrees with the O(n^2) brute force
bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

REPORT_SCHEMA_VERSION = 1


def auc(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and equal length")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: both classes must be present")

    order = np.argsort(scores, kind="stable")
    ranks = [Fraction(0)] * len(scores)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        # ranks i+1 .. j+1 (1-based), tied entries get the average
        avg = Fraction(i + 1 + j + 1, 2)
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1

    rank_sum_pos = sum(r for r, lab in zip(ranks, labels) if lab == 1)
    u = rank_sum_pos - Fraction(n_pos * (n_pos + 1), 2)
    return float(u / (n_pos * n_neg))


def auc_bruteforce(scores, labels) -> float:
    """O(n^2) pairwise oracle, exact rational arithmetic."""
    scores = list(scores)
    labels = list(labels)
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    if not pos or not neg:
        raise ValueError("AUC undefined: both classes must be present")
    total = Fraction(0)
    for p in pos:
        for q in neg:
            if p > q:
                total += 1
            elif p == q:
                total += Fraction(1, 2)
    return float(total / (len(pos) * len(neg)))


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(scores) < 1:
        raise ValueError("accuracy needs at least one sample")
    preds = (scores >= threshold).astype(np.int64)
    return float((preds == labels).mean())


@dataclass
class MetricsReport:
    acc: float
    auc: float
    n_samples: int
    curves: dict = field(default_factory=dict)  # name -> list of floats
    config_fingerprint: str = ""
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.acc <= 1.0:
            raise ValueError(f"acc {self.acc} outside [0, 1]")
        if not 0.0 <= self.auc <= 1.0:
            raise ValueError(f"auc {self.auc} outside [0, 1]")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")

    def to_json(self) -> str:
        self.validate()
        doc = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "acc": self.acc,
            "auc": self.auc,
            "n_samples": self.n_samples,
            "curves": {k: list(map(float, v)) for k, v in self.curves.items()},
            "config_fingerprint": self.config_fingerprint,
            "seed": self.seed,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(text: str) -> "MetricsReport":
        doc = json.loads(text)
        if doc.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema version "
                             f"{doc.get('schema_version')!r}")
        report = MetricsReport(
            acc=doc["acc"], auc=doc["auc"], n_samples=doc["n_samples"],
            curves=doc.get("curves", {}),
            config_fingerprint=doc.get("config_fingerprint", ""),
            seed=doc.get("seed", 0),
        )
        report.validate()
        return report


def write_report(report: MetricsReport, path) -> None:
    Path(path).write_text(report.to_json())


def read_report(path) -> MetricsReport:
    return MetricsReport.from_json(Path(path).read_text())


def curves_to_csv(report: MetricsReport, path) -> None:
    """Export per-epoch curves as a comma-separated table."""
    names = sorted(report.curves)
    length = max((len(report.curves[n]) for n in names), default=0)
    lines = ["epoch," + ",".join(names)]
    for i in range(length):
        row = [str(i)]
        for n in names:
            vals = report.curves[n]
            row.append(repr(vals[i]) if i < len(vals) else "")
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")
