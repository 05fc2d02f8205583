"""Evaluation metrics, per-observation curves and confident-window analysis.

Every function here is pure: it only reads its arguments.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .events import unscale_time


def next_event_accuracy(logits, tokens, injected=None, include_injected: bool = False) -> float:
    """Share of positions ``i`` whose argmax equals ``tokens[i+1]``.

    Injected positions are left out unless ``include_injected`` is set.
    """
    logits = np.asarray(logits)
    tokens = np.asarray(tokens)
    hits = np.argmax(logits[:-1], axis=-1) == tokens[1:]
    keep = np.ones(hits.shape, dtype=bool)
    if injected is not None and not include_injected:
        keep = ~np.asarray(injected, dtype=bool)[:-1]
    if not keep.any():
        raise ValueError("no scorable positions")
    return float(hits[keep].mean())


def mape(pred, target) -> tuple[float, int]:
    """Mean absolute percentage error (in %) and the number of skipped zero targets."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    nz = target != 0
    if not nz.any():
        raise ValueError("MAPE is undefined when every target is zero")
    err = np.abs((pred[nz] - target[nz]) / target[nz])
    return float(100.0 * err.mean()), int((~nz).sum())


def rmse(pred, target) -> float:
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.sqrt(np.mean(d * d)))


def mae(pred, target) -> float:
    return float(np.mean(np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))))


def confusion_counts(probs, y, threshold: float = 0.7) -> tuple[int, int, int]:
    """(TP, FP, FN) pooled over every row of ``probs`` against label vector(s) ``y``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    pred = np.asarray(probs, dtype=np.float64) >= threshold
    truth = np.broadcast_to(np.asarray(y).astype(bool), pred.shape)
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    return tp, fp, fn


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    """``2TP / (2TP + FP + FN)``; 1 when nothing is predicted and nothing is true."""
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2.0 * tp / denom


def micro_f1(probs, y, threshold: float = 0.7) -> float:
    return f1_from_counts(*confusion_counts(probs, y, threshold))


def hours_abs_error(pred_scaled, target_scaled, base: float = 30.0) -> np.ndarray:
    """``|f^-1(pred) - f^-1(target)|`` elementwise, in hours."""
    return np.abs(unscale_time(np.asarray(pred_scaled, dtype=np.float64), base)
                  - unscale_time(np.asarray(target_scaled, dtype=np.float64), base))


def mae_hours(pred_scaled, target_scaled, base: float = 30.0) -> float:
    return float(np.mean(hours_abs_error(pred_scaled, target_scaled, base)))


def mae_hours_summary(per_sequence: Sequence[tuple[np.ndarray, np.ndarray]], base: float = 30.0) -> dict:
    """Pooled MAE in hours over all steps, with the spread of per-sequence means."""
    errs = [hours_abs_error(p, t, base) for p, t in per_sequence]
    pooled = np.concatenate(errs)
    means = np.array([e.mean() for e in errs])
    return {"mae_h": float(pooled.mean()), "std_h": float(means.std()), "n_sequences": len(errs),
            "n_steps": int(pooled.size)}


@dataclass
class MetricCurve:
    name: str
    x: np.ndarray        # observation counts, strictly increasing
    values: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.x.size and np.any(np.diff(self.x) <= 0):
            raise ValueError("curve x must be strictly increasing")

    def rows(self) -> list[tuple[str, int, float, int]]:
        return [(self.name, int(i), float(v), int(n)) for i, v, n in zip(self.x, self.values, self.counts)]


def build_curve(records: Iterable[tuple], metric: str, min_step: int = 0) -> MetricCurve:
    """Aggregate per-step records into a curve over observation count ``i``.

    For ``metric="f1"`` each record is ``(i, tp, fp, fn)`` and counts are
    pooled per ``i``; otherwise records are ``(i, value)`` and averaged.
    """
    pooled: dict[int, list] = defaultdict(list)
    for rec in records:
        if rec[0] >= min_step:
            pooled[int(rec[0])].append(rec[1:])
    xs = sorted(pooled)
    vals, counts = [], []
    for i in xs:
        group = pooled[i]
        if metric == "f1":
            tp, fp, fn = (sum(r[k] for r in group) for k in range(3))
            vals.append(f1_from_counts(tp, fp, fn))
        else:
            vals.append(float(np.mean([r[0] for r in group])))
        counts.append(len(group))
    return MetricCurve(metric, np.array(xs), np.array(vals), np.array(counts))


def weighted_slope(curve: MetricCurve) -> float:
    """Count-weighted least-squares slope of the curve values against ``i``."""
    w = curve.counts.astype(np.float64)
    if w.sum() == 0 or curve.x.size < 2:
        raise ValueError("need at least two populated points")
    xm = np.sum(w * curve.x) / w.sum()
    ym = np.sum(w * curve.values) / w.sum()
    return float(np.sum(w * (curve.x - xm) * (curve.values - ym)) / np.sum(w * (curve.x - xm) ** 2))


@dataclass
class CPMWReport:
    metric: str
    theta: float
    delta: float
    mu_seq: float
    direction: str
    exists: bool
    x_theta: float | None = None
    end: float | None = None
    clipped: bool = False
    auc: float | None = None
    auc_normalized: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _crossed(values: np.ndarray, theta: float, direction: str) -> np.ndarray:
    if direction == "above":
        return values >= theta
    if direction == "below":
        return values <= theta
    raise ValueError("direction must be 'above' (scores) or 'below' (errors)")


def cpmw_entry(curve: MetricCurve, theta: float, direction: str = "above", debounce: int = 3) -> float | None:
    """First ``x`` past ``theta`` that stays past it for the next ``debounce`` points."""
    ok = _crossed(curve.values, theta, direction)
    n = ok.size
    for j in range(n):
        if ok[j:min(j + 1 + debounce, n)].all():
            return float(curve.x[j])
    return None


def cpmwauc(curve: MetricCurve, lo: float, hi: float, normalize: bool = False) -> float:
    """Trapezoidal integral of the piecewise-linear curve over ``[lo, hi]``."""
    x, v = curve.x, curve.values
    if x.size < 2:
        raise ValueError("curve needs at least two points to integrate")
    step = float(np.min(np.diff(x)))
    if hi - lo < step:
        raise ValueError(f"window [{lo}, {hi}] is narrower than one sample ({step})")
    if lo < x[0] or hi > x[-1]:
        raise ValueError(f"window [{lo}, {hi}] is not covered by the curve [{x[0]}, {x[-1]}]")
    inner = (x > lo) & (x < hi)
    xs = np.concatenate([[lo], x[inner], [hi]])
    ys = np.concatenate([[np.interp(lo, x, v)], v[inner], [np.interp(hi, x, v)]])
    area = float(np.sum(0.5 * (ys[1:] + ys[:-1]) * np.diff(xs)))
    return area / (hi - lo) if normalize else area


def cpmw(curve: MetricCurve, theta: float, mu_seq: float, delta: float,
         direction: str = "above", debounce: int = 3) -> CPMWReport:
    """Locate the confident window ``[x_theta, mu_seq + delta]`` and integrate over it.

    The end is clipped to the last curve point (and flagged) when the curve
    stops earlier.
    """
    rep = CPMWReport(curve.name, theta, delta, mu_seq, direction, exists=False)
    if curve.x.size == 0:
        return rep
    x_theta = cpmw_entry(curve, theta, direction, debounce)
    if x_theta is None:
        return rep
    end = mu_seq + delta
    if end > curve.x[-1]:
        end, rep.clipped = float(curve.x[-1]), True
    rep.x_theta, rep.end = x_theta, float(end)
    if end <= x_theta:
        return rep
    rep.exists = True
    try:
        rep.auc = cpmwauc(curve, x_theta, end)
        rep.auc_normalized = cpmwauc(curve, x_theta, end, normalize=True)
    except ValueError:
        rep.exists = False
    return rep


def write_curves_csv(path: str | Path, curves: Sequence[MetricCurve]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "i", "value", "count"])
        for c in curves:
            for name, i, v, n in c.rows():
                w.writerow([name, i, repr(v), n])


def read_curves_csv(path: str | Path) -> dict[str, MetricCurve]:
    rows: dict[str, list] = defaultdict(list)
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows[r["metric"]].append((int(r["i"]), float(r["value"]), int(r["count"])))
    out = {}
    for name, rs in rows.items():
        xs, vs, ns = zip(*rs)
        out[name] = MetricCurve(name, np.array(xs), np.array(vs), np.array(ns))
    return out
