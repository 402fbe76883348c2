"""Multi-label precision/recall/F1 with micro and macro averaging and head/tail buckets.

Ratios are formed with ``fractions.Fraction`` and converted to float once, so
reported values are the correctly rounded rationals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np


def binarize(scores, threshold: float = 0.5, leaf_ids=None) -> set:
    """Labels scoring at least ``threshold``; the argmax label if none does."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    scores = np.asarray(scores)
    ids = list(leaf_ids) if leaf_ids is not None else list(range(len(scores)))
    picked = {ids[k] for k in np.flatnonzero(scores >= threshold)}
    if not picked:
        picked = {ids[int(np.argmax(scores))]}
    return picked


@dataclass
class ConfusionTotals:
    per_label: dict[int, list[int]]  # label -> [tp, fp, fn]
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @classmethod
    def empty(cls, leaf_ids) -> "ConfusionTotals":
        return cls({lid: [0, 0, 0] for lid in leaf_ids})

    def merge(self, other: "ConfusionTotals") -> "ConfusionTotals":
        out = ConfusionTotals.empty(self.per_label)
        for t in (self, other):
            for lid, c in t.per_label.items():
                row = out.per_label.setdefault(lid, [0, 0, 0])
                for k in range(3):
                    row[k] += c[k]
            out.tp += t.tp
            out.fp += t.fp
            out.fn += t.fn
        return out


def accumulate(preds: set, golds: set, totals: ConfusionTotals) -> ConfusionTotals:
    assert preds, "binarize always yields at least one label"
    for lid in preds & golds:
        totals.per_label.setdefault(lid, [0, 0, 0])[0] += 1
    for lid in preds - golds:
        totals.per_label.setdefault(lid, [0, 0, 0])[1] += 1
    for lid in golds - preds:
        totals.per_label.setdefault(lid, [0, 0, 0])[2] += 1
    totals.tp += len(preds & golds)
    totals.fp += len(preds - golds)
    totals.fn += len(golds - preds)
    return totals


def _prf(tp: int, fp: int, fn: int) -> tuple[Fraction, Fraction, Fraction]:
    p = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
    r = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
    f = 2 * p * r / (p + r) if p + r else Fraction(0)
    return p, r, f


@dataclass
class PRF:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, tp, fp, fn) -> "PRF":
        return cls(*map(float, _prf(tp, fp, fn)))


@dataclass
class MetricsReport:
    micro: PRF
    macro: PRF
    per_label: dict[int, dict] = field(default_factory=dict)
    head: PRF | None = None
    tail: PRF | None = None

    def row(self) -> dict[str, float]:
        """The micro/macro P/R/F1 columns."""
        out = {}
        for scope in ("micro", "macro"):
            m = getattr(self, scope)
            out[f"{scope}_p"] = m.precision
            out[f"{scope}_r"] = m.recall
            out[f"{scope}_f1"] = m.f1
        return out

    def to_dict(self) -> dict:
        d = {"micro": vars(self.micro), "macro": vars(self.macro)}
        d["head_bucket"] = vars(self.head) if self.head else None
        d["tail_bucket"] = vars(self.tail) if self.tail else None
        return d


def bucket_labels(label_click_counts: dict[int, int], fraction: float = 0.2) -> tuple[list[int], list[int]]:
    """(head, tail): top and bottom ``fraction`` of labels by clicks, ties broken by id."""
    ranked = sorted(label_click_counts, key=lambda lid: (label_click_counts[lid], lid))
    k = max(1, math.floor(round(fraction * len(ranked), 9)))
    return ranked[-k:], ranked[:k]


def report(totals: ConfusionTotals, label_click_counts: dict[int, int] | None = None) -> MetricsReport:
    per_label = {}
    ps, rs, fs = [], [], []
    for lid in sorted(totals.per_label):
        tp, fp, fn = totals.per_label[lid]
        p, r, f = _prf(tp, fp, fn)
        ps.append(p)
        rs.append(r)
        fs.append(f)
        per_label[lid] = {"tp": tp, "fp": fp, "fn": fn, "p": float(p), "r": float(r), "f1": float(f)}
    n = len(ps)
    macro = PRF(*(float(sum(v, Fraction(0)) / n) if n else 0.0 for v in (ps, rs, fs)))
    rep = MetricsReport(PRF.from_counts(totals.tp, totals.fp, totals.fn), macro, per_label)
    if label_click_counts:
        counts = {lid: label_click_counts.get(lid, 0) for lid in totals.per_label}
        head, tail = bucket_labels(counts)
        for name, bucket in (("head", head), ("tail", tail)):
            tp = sum(totals.per_label[l][0] for l in bucket)
            fp = sum(totals.per_label[l][1] for l in bucket)
            fn = sum(totals.per_label[l][2] for l in bucket)
            setattr(rep, name, PRF.from_counts(tp, fp, fn))
    return rep


def evaluate_sets(predictions, golds, leaf_ids, label_click_counts=None) -> MetricsReport:
    totals = ConfusionTotals.empty(leaf_ids)
    for p, g in zip(predictions, golds):
        accumulate(set(p), set(g), totals)
    return report(totals, label_click_counts)
