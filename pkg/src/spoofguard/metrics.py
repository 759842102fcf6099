"""Detection metrics: DET sweep, EER, normalized min t-DCF, P/R/F.

Score convention: higher score means more bonafide, and a trial is
accepted as bonafide iff score >= threshold (ties accept). That one rule
is shared by calibration, evaluation, and the streaming monitor.

The DET sweep evaluates the step functions

    far(t) = P(spoof score >= t)     (non-increasing in t)
    frr(t) = P(bonafide score < t)   (non-decreasing in t)

at every distinct score plus -inf/+inf sentinels, so the curve carries
the corner points (far=1, frr=0) and (far=0, frr=1). Because both rates
are constant on the interval between adjacent sweep points, sweeping the
points is exhaustive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import IoFailure, SingleClass, UndefinedMetric

KEY_BONAFIDE = "bonafide"
KEY_SPOOF = "spoof"


@dataclass(frozen=True)
class ScoreRecord:
    utt_id: str
    key: str  # bonafide | spoof
    score: float

    def __post_init__(self):
        if self.key not in (KEY_BONAFIDE, KEY_SPOOF):
            raise ValueError(f"key must be bonafide or spoof, got {self.key!r}")
        if not np.isfinite(self.score):
            raise ValueError(f"score for {self.utt_id} is not finite")


@dataclass
class DetCurve:
    thresholds: np.ndarray  # ascending, with -inf/+inf sentinels
    far: np.ndarray
    frr: np.ndarray


@dataclass(frozen=True)
class CostModel:
    """Coefficients multiplying the countermeasure miss and false-alarm rates."""

    c1: float = 1.0  # weight on frr (P_miss_cm)
    c2: float = 1.0  # weight on far (P_fa_cm)

    def __post_init__(self):
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("cost coefficients must be positive")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _split_scores(records: Iterable[ScoreRecord]) -> tuple[np.ndarray, np.ndarray]:
    bona = np.array([r.score for r in records if r.key == KEY_BONAFIDE], dtype=np.float64)
    spoof = np.array([r.score for r in records if r.key == KEY_SPOOF], dtype=np.float64)
    return bona, spoof


def det_curve(records: Sequence[ScoreRecord]) -> DetCurve:
    """Exhaustive threshold sweep over the distinct scores plus sentinels."""
    bona, spoof = _split_scores(records)
    if bona.size == 0 or spoof.size == 0:
        raise SingleClass("need at least one bonafide and one spoof record")
    bona.sort()
    spoof.sort()
    thr = np.concatenate(
        ([-np.inf], np.unique(np.concatenate((bona, spoof))), [np.inf])
    )
    far = (spoof.size - np.searchsorted(spoof, thr, side="left")) / spoof.size
    frr = np.searchsorted(bona, thr, side="left") / bona.size
    return DetCurve(thr, far, frr)


def eer(curve: DetCurve) -> tuple[float, float]:
    """Equal error rate and its threshold.

    far - frr is non-increasing along the sweep. If it is exactly zero
    somewhere, the zero region corresponds to the threshold interval
    (thr[i0-1], thr[j]] and the midpoint of that interval is returned.
    Otherwise the crossing is interpolated linearly between the two
    bracketing sweep points.
    """
    d = curve.far - curve.frr
    zero = np.flatnonzero(d == 0.0)
    if zero.size:
        i0, j = zero[0], zero[-1]
        threshold = 0.5 * (curve.thresholds[i0 - 1] + curve.thresholds[j])
        return float(curve.far[i0]), float(threshold)
    k = int(np.flatnonzero(d > 0)[-1])  # d[0] = 1 > 0, d[-1] = -1 < 0
    t = d[k] / (d[k] - d[k + 1])
    value = curve.far[k] + t * (curve.far[k + 1] - curve.far[k])
    lo, hi = curve.thresholds[k], curve.thresholds[k + 1]
    if np.isinf(hi):
        threshold = lo
    elif np.isinf(lo):
        threshold = hi
    else:
        threshold = lo + t * (hi - lo)
    return float(value), float(threshold)


def min_tdcf(curve: DetCurve, cost: CostModel = CostModel()) -> tuple[float, float]:
    """Minimum of (c1*frr + c2*far) / min(c1, c2) over the sweep.

    The normalization bounds trivial all-accept/all-reject systems at
    cost >= 1.
    """
    costs = (cost.c1 * curve.frr + cost.c2 * curve.far) / min(cost.c1, cost.c2)
    idx = int(np.argmin(costs))
    return float(costs[idx]), float(curve.thresholds[idx])


def precision_recall_f(counts: ConfusionCounts) -> tuple[float, float, float]:
    """P = tp/(tp+fp), R = tp/(tp+fn), F = 2PR/(P+R) (F=0 when P=R=0)."""
    if counts.tp + counts.fp == 0:
        raise UndefinedMetric("no positive predictions: tp+fp == 0", "tp+fp")
    if counts.tp + counts.fn == 0:
        raise UndefinedMetric("no positive references: tp+fn == 0", "tp+fn")
    p = counts.tp / (counts.tp + counts.fp)
    r = counts.tp / (counts.tp + counts.fn)
    f = 0.0 if p + r == 0 else 2.0 * p * r / (p + r)
    return p, r, f


def calibrate_threshold(dev_records: Sequence[ScoreRecord]) -> float:
    """Decision threshold at the EER crossing of the development sweep."""
    _, threshold = eer(det_curve(dev_records))
    return threshold


def confusion_at_threshold(
    records: Sequence[ScoreRecord], threshold: float, positive: str = KEY_SPOOF
) -> ConfusionCounts:
    """Count detector decisions against keys.

    A record is accepted as bonafide iff score >= threshold; the positive
    class (default spoof) defines tp/fp/fn/tn.
    """
    tp = fp = fn = tn = 0
    for rec in records:
        decided = KEY_BONAFIDE if rec.score >= threshold else KEY_SPOOF
        actual_pos = rec.key == positive
        decided_pos = decided == positive
        if decided_pos and actual_pos:
            tp += 1
        elif decided_pos and not actual_pos:
            fp += 1
        elif not decided_pos and actual_pos:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp, fp, fn, tn)


def metrics_report(
    records: Sequence[ScoreRecord], cost: CostModel = CostModel()
) -> dict:
    """The NDJSON metrics payload: EER, min t-DCF, and P/R/F at the EER point."""
    curve = det_curve(records)
    eer_value, eer_thr = eer(curve)
    tdcf_value, _ = min_tdcf(curve, cost)
    counts = confusion_at_threshold(records, eer_thr)
    p, r, f = precision_recall_f(counts)
    return {
        "eer": eer_value,
        "eer_threshold": eer_thr,
        "min_tdcf": tdcf_value,
        "precision": p,
        "recall": r,
        "f_score": f,
    }


def metrics_report_line(records: Sequence[ScoreRecord], cost: CostModel = CostModel()) -> str:
    return json.dumps(metrics_report(records, cost))


# --- score files (TSV: utt_id <TAB> key <TAB> score) --------------------------

def write_score_file(records: Sequence[ScoreRecord], path: str | Path) -> None:
    lines = [f"{r.utt_id}\t{r.key}\t{r.score!r}\n" for r in records]
    try:
        Path(path).write_text("".join(lines), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_score_file(path: str | Path) -> list[ScoreRecord]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        utt_id, key, score = line.split("\t")
        records.append(ScoreRecord(utt_id, key, float(score)))
    return records
