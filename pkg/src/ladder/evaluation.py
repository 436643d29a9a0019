"""Detection scoring by centroid containment.

A prediction is a true positive when its centroid falls inside a
ground-truth quad, a false positive otherwise; a ground-truth quad that
receives no prediction is a false negative. Dice and centroid localisation
error are reported over the true positives only.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Quad, centroid, point_in_quad, quad_dice


@dataclass(frozen=True)
class Matching:
    predicted: tuple[Quad, ...]
    truth: tuple[Quad, ...]
    pairs: tuple[tuple[int, int], ...]  # (prediction index, truth index)
    false_positives: tuple[int, ...]
    false_negatives: tuple[int, ...]


def match_detections(predicted: Sequence[Quad], truth: Sequence[Quad]) -> Matching:
    """Assign predictions to ground truth by centroid containment.

    When several predictions land in the same truth quad the one with the
    highest Dice is kept as the true positive and the rest count as false
    positives. A centroid inside several (overlapping) truth quads goes to
    the one it overlaps best.
    """
    predicted, truth = tuple(predicted), tuple(truth)
    claims: dict[int, list[tuple[float, int]]] = {}
    fps = []
    for i, p in enumerate(predicted):
        c = centroid(p)
        hits = [j for j, t in enumerate(truth) if point_in_quad(c, t)]
        if not hits:
            fps.append(i)
            continue
        scored = [(quad_dice(p, truth[j]), j) for j in hits]
        dice, j = max(scored, key=lambda s: (s[0], -s[1]))
        claims.setdefault(j, []).append((dice, i))
    pairs = []
    for j, cl in claims.items():
        cl.sort(key=lambda s: (-s[0], s[1]))
        pairs.append((cl[0][1], j))
        fps.extend(i for _, i in cl[1:])
    pairs.sort(key=lambda pr: pr[1])
    fns = tuple(j for j in range(len(truth)) if j not in claims)
    return Matching(predicted, truth, tuple(pairs), tuple(sorted(fps)), fns)


@dataclass(frozen=True)
class InstanceRecord:
    prediction: int
    truth: int
    dice: float
    le: float
    image: str = ""


def _ratio(a: int, b: int) -> float:
    return a / b if b else math.nan


@dataclass
class DetectionReport:
    tp: int
    fp: int
    fn: int
    per_instance: list[InstanceRecord] = field(default_factory=list)
    units: str = "px"

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def dice_mean(self) -> float:
        return float(np.mean([r.dice for r in self.per_instance])) if self.per_instance else math.nan

    @property
    def le_mean(self) -> float:
        return float(np.mean([r.le for r in self.per_instance])) if self.per_instance else math.nan

    @property
    def le_std(self) -> float:
        # population standard deviation over true positives
        return float(np.std([r.le for r in self.per_instance])) if self.per_instance else math.nan

    def summary(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "recall": clean(self.recall),
            "precision": clean(self.precision),
            "dice_mean": clean(self.dice_mean),
            "le_mean": clean(self.le_mean),
            "le_std": clean(self.le_std),
            "units": self.units,
        }

    def to_json(self) -> dict:
        doc = self.summary()
        doc["per_instance"] = [
            {"image": r.image, "prediction": r.prediction, "truth": r.truth, "dice": r.dice, "le": r.le}
            for r in self.per_instance
        ]
        return doc


def report(matching: Matching, pixel_spacing: float | None = None, image: str = "") -> DetectionReport:
    """Counts plus Dice and centroid error (mm when ``pixel_spacing`` is given) per true positive."""
    scale = 1.0 if pixel_spacing is None else float(pixel_spacing)
    recs = []
    for i, j in matching.pairs:
        p, t = matching.predicted[i], matching.truth[j]
        cp, ct = centroid(p), centroid(t)
        le = math.hypot(cp.x - ct.x, cp.y - ct.y) * scale
        recs.append(InstanceRecord(i, j, quad_dice(p, t), le, image))
    return DetectionReport(
        tp=len(matching.pairs),
        fp=len(matching.false_positives),
        fn=len(matching.false_negatives),
        per_instance=recs,
        units="px" if pixel_spacing is None else "mm",
    )


def aggregate(reports: Sequence[DetectionReport]) -> DetectionReport:
    """Pool instance-level records across images (no per-image averaging)."""
    units = {r.units for r in reports}
    if len(units) > 1:
        raise ValueError(f"cannot pool reports with mixed units {units}")
    return DetectionReport(
        tp=sum(r.tp for r in reports),
        fp=sum(r.fp for r in reports),
        fn=sum(r.fn for r in reports),
        per_instance=[rec for r in reports for rec in r.per_instance],
        units=units.pop() if units else "px",
    )


def evaluate(predicted: Sequence[Quad], truth: Sequence[Quad], pixel_spacing: float | None = None, image: str = "") -> DetectionReport:
    return report(match_detections(predicted, truth), pixel_spacing, image)


TABLE_COLUMNS = [
    "scan_type", "recall_pct", "recall_counts", "precision_pct", "precision_counts",
    "dice_pct", "le_mean", "le_std", "units",
]


def table_row(name: str, r: DetectionReport) -> dict:
    def pct(v):
        return "" if math.isnan(v) else f"{100.0 * v:.1f}"

    def num(v):
        return "" if math.isnan(v) else f"{v:.2f}"

    return {
        "scan_type": name,
        "recall_pct": pct(r.recall),
        "recall_counts": f"{r.tp}/{r.tp + r.fn}",
        "precision_pct": pct(r.precision),
        "precision_counts": f"{r.tp}/{r.tp + r.fp}",
        "dice_pct": pct(r.dice_mean),
        "le_mean": num(r.le_mean),
        "le_std": num(r.le_std),
        "units": r.units,
    }


def write_table_csv(path, rows: dict[str, DetectionReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for name, r in rows.items():
            w.writerow(table_row(name, r))


def write_report_json(path, rows: dict[str, DetectionReport]) -> None:
    doc = {name: r.to_json() for name, r in rows.items()}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
