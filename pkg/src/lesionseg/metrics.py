"""Pixel metrics, infection rates, group stratification and discrimination."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from .data_io import DataError, DegenerateInputError

GROUP_THRESHOLD = 0.015
DISCRIMINATION_THRESHOLD = 0.005
BINARIZE_THRESHOLD = 0.5

INFECTED = "infected"
CLEAN = "clean"


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype != np.bool_:
        if not np.all((arr == 0) | (arr == 1)):
            raise ValidationError(f"{name} must be binary")
        arr = arr.astype(bool)
    return arr


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = _binary(pred, "prediction")
    g = _binary(gt, "ground truth")
    if p.shape != g.shape:
        raise ValidationError(f"shape mismatch: prediction {p.shape} vs ground truth {g.shape}")
    return p, g


def binarize(probs: np.ndarray, threshold: float = BINARIZE_THRESHOLD) -> np.ndarray:
    return np.asarray(probs) > threshold


def confusion(pred_mask, gt_mask) -> ConfusionCounts:
    p, g = _pair(pred_mask, gt_mask)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


def dsc(counts: ConfusionCounts) -> float:
    den = 2 * counts.tp + counts.fp + counts.fn
    return 1.0 if den == 0 else 2 * counts.tp / den


def sen_spc(counts: ConfusionCounts) -> tuple[float, float]:
    sen = 1.0 if counts.tp + counts.fn == 0 else counts.tp / (counts.tp + counts.fn)
    spc = 1.0 if counts.tn + counts.fp == 0 else counts.tn / (counts.tn + counts.fp)
    return sen, spc


def mae(pred_mask, gt_mask, region=None) -> float:
    """Mean absolute pixel error over the image, or over ``region`` if given."""
    p = np.asarray(pred_mask, dtype=np.float64)
    g = np.asarray(gt_mask, dtype=np.float64)
    if p.shape != g.shape:
        raise ValidationError(f"shape mismatch: {p.shape} vs {g.shape}")
    err = np.abs(p - g)
    if region is None:
        return float(err.mean())
    r = _binary(region, "region")
    if not r.any():
        raise DegenerateInputError("MAE region is empty")
    return float(err[r].mean())


def infection_rate(mask, lung_mask) -> float:
    m, lung = _pair(mask, lung_mask)
    area = np.count_nonzero(lung)
    if area == 0:
        raise DegenerateInputError("lung mask is empty")
    return np.count_nonzero(m & lung) / area


def assign_group(rate: float, threshold: float = GROUP_THRESHOLD) -> str:
    return "A" if rate < threshold else "B"


def discriminate(rate_pred: float, threshold: float = DISCRIMINATION_THRESHOLD) -> str:
    return INFECTED if rate_pred > threshold else CLEAN


@dataclass(frozen=True)
class DiscriminationStats:
    accuracy: float
    sensitivity: float | None
    ppv: float | None

    def as_tuple(self):
        return (self.accuracy, self.sensitivity, self.ppv)


def discrimination_stats(verdicts: Sequence, labels: Sequence) -> DiscriminationStats:
    """Slice-level accuracy, sensitivity and PPV; undefined ratios are ``None``.

    Verdicts and labels may be booleans or the strings ``infected``/``clean``.
    """
    if len(verdicts) != len(labels):
        raise ValidationError(f"{len(verdicts)} verdicts vs {len(labels)} labels")
    if not verdicts:
        raise ValidationError("no verdicts to score")
    v = [_as_positive(x) for x in verdicts]
    y = [_as_positive(x) for x in labels]
    tp = sum(a and b for a, b in zip(v, y))
    fp = sum(a and not b for a, b in zip(v, y))
    fn = sum(b and not a for a, b in zip(v, y))
    correct = sum(a == b for a, b in zip(v, y))
    return DiscriminationStats(
        correct / len(v),
        tp / (tp + fn) if tp + fn else None,
        tp / (tp + fp) if tp + fp else None,
    )


def _as_positive(x) -> bool:
    if isinstance(x, str):
        if x not in (INFECTED, CLEAN):
            raise ValidationError(f"unknown verdict {x!r}")
        return x == INFECTED
    return bool(x)


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError("pearson needs two 1-d sequences of equal length")
    if a.size < 2:
        raise ValidationError("pearson needs at least two points")
    da = a - a.mean()
    db = b - b.mean()
    sa = math.sqrt(float(np.dot(da, da)))
    sb = math.sqrt(float(np.dot(db, db)))
    if sa == 0 or sb == 0:
        raise DegenerateInputError("pearson undefined for a constant sequence")
    return float(np.clip(np.dot(da, db) / (sa * sb), -1.0, 1.0))


# ---------------------------------------------------------------------------
# per-slice scores and aggregation


@dataclass
class SliceScore:
    patient_id: str
    slice_id: str
    dsc: float
    sen: float
    spc: float
    mae: float
    rate_gt: float
    rate_pred: float
    group: str
    verdict: str


METRIC_FIELDS = ("dsc", "sen", "spc", "mae")
REPORT_COLUMNS = tuple(f.name for f in fields(SliceScore))


def score_slice(patient_id: str, slice_id: str, pred_mask, gt_mask, lung_mask,
                group_threshold: float = GROUP_THRESHOLD,
                discriminate_threshold: float = DISCRIMINATION_THRESHOLD,
                mae_region: str = "image") -> SliceScore:
    counts = confusion(pred_mask, gt_mask)
    sen, spc = sen_spc(counts)
    rate_gt = infection_rate(gt_mask, lung_mask)
    rate_pred = infection_rate(pred_mask, lung_mask)
    err = mae(pred_mask, gt_mask, region=lung_mask if mae_region == "lung" else None)
    return SliceScore(patient_id, slice_id, dsc(counts), sen, spc, err, rate_gt, rate_pred,
                      assign_group(rate_gt, group_threshold), discriminate(rate_pred, discriminate_threshold))


@dataclass(frozen=True)
class MeanStd:
    mean: float
    std: float


@dataclass(frozen=True)
class MedianIqr:
    median: float
    q25: float
    q75: float


def aggregate(scores: Sequence[SliceScore], mode: str = "mean") -> dict[str, MeanStd | MedianIqr]:
    """Per-metric mean/std (population) or median with linear 25th/75th percentiles."""
    if not scores:
        raise ValidationError("cannot aggregate an empty score list")
    out: dict[str, MeanStd | MedianIqr] = {}
    for name in METRIC_FIELDS:
        vals = np.array([getattr(s, name) for s in scores], dtype=np.float64)
        if mode == "mean":
            out[name] = MeanStd(float(vals.mean()), float(vals.std()))
        elif mode == "median_iqr":
            q25, med, q75 = np.percentile(vals, [25, 50, 75], method="linear")
            out[name] = MedianIqr(float(med), float(q25), float(q75))
        else:
            raise ValidationError(f"unknown aggregation mode {mode!r}")
    return out


def volume_rates(scores: Iterable[SliceScore], lung_areas: dict[tuple[str, str], int]) -> dict[str, tuple[float, float]]:
    """Per-patient (gt, pred) rates from summed slice lesion and lung areas."""
    acc: dict[str, list[float]] = {}
    for s in scores:
        area = lung_areas[(s.patient_id, s.slice_id)]
        row = acc.setdefault(s.patient_id, [0.0, 0.0, 0.0])
        row[0] += s.rate_gt * area
        row[1] += s.rate_pred * area
        row[2] += area
    return {pid: (gt / lung, pred / lung) for pid, (gt, pred, lung) in sorted(acc.items())}


# ---------------------------------------------------------------------------
# report serialization


def _fmt(x: float | None) -> str:
    return "NA" if x is None else f"{x:.10f}"


def format_scores(scores: Sequence[SliceScore]) -> str:
    lines = ["\t".join(REPORT_COLUMNS)]
    for s in scores:
        row = [s.patient_id, s.slice_id] + [_fmt(getattr(s, c)) for c in REPORT_COLUMNS[2:8]] + [s.group, s.verdict]
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def parse_scores(text: str) -> list[SliceScore]:
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    if not lines or tuple(lines[0].split("\t")) != REPORT_COLUMNS:
        raise DataError("score table header does not match the expected columns")
    out = []
    for ln in lines[1:]:
        c = ln.split("\t")
        out.append(SliceScore(c[0], c[1], *(float(v) for v in c[2:8]), c[8], c[9]))
    return out


def format_summary(scores: Sequence[SliceScore], title: str = "summary") -> str:
    """Summary block: overall mean/std, per-group median/IQR, rate correlation."""
    lines = [f"# {title}", f"# slices\t{len(scores)}"]
    if not scores:
        return "\n".join(lines) + "\n"
    for name, v in aggregate(scores, "mean").items():
        lines.append(f"# mean_std\t{name}\t{_fmt(v.mean)}\t{_fmt(v.std)}")
    lesion = [s for s in scores if s.rate_gt > 0]
    for group in ("A", "B"):
        members = [s for s in lesion if s.group == group]
        lines.append(f"# group\t{group}\tslices\t{len(members)}")
        if members:
            for name, v in aggregate(members, "median_iqr").items():
                lines.append(f"# median_iqr\t{group}\t{name}\t{_fmt(v.median)}\t{_fmt(v.q25)}\t{_fmt(v.q75)}")
    try:
        r = pearson([s.rate_gt for s in lesion], [s.rate_pred for s in lesion]) if len(lesion) >= 2 else None
    except DegenerateInputError:
        r = None
    lines.append(f"# pearson_rate\t{_fmt(r)}")
    return "\n".join(lines) + "\n"
