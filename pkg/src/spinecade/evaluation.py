"""Edge-voxel ROC and per-fracture FROC scoring."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateLabelsError, IoError

DEFAULT_MATCH_RADIUS_MM = 10.0
DEFAULT_FP_TARGETS = (5.0, 10.0)
DEFAULT_THRESHOLDS = tuple(round(0.01 * k, 2) for k in range(1, 100))


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # score at each point after the origin
    auc: float
    n_pos: int
    n_neg: int

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc(scores, labels=None) -> RocCurve:
    """Threshold sweep over distinct scores; tied scores form one diagonal step.

    ``scores`` is either a sequence of (probability, label) pairs or, with
    ``labels`` given, a score array.
    """
    if labels is None:
        pairs = list(scores)
        s = np.array([p for p, _ in pairs], dtype=np.float64)
        y = np.array([bool(t) for _, t in pairs], dtype=bool)
    else:
        s = np.asarray(scores, dtype=np.float64)
        y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = int(len(y) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError(f"ROC needs both classes, got {n_pos} positives and {n_neg} negatives")

    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[last_of_group]
    fp = (last_of_group + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(fpr, tpr, s[last_of_group], auc, n_pos, n_neg)


@dataclass(frozen=True)
class FrocCurve:
    thresholds: tuple[float, ...]
    fp_per_patient: tuple[float, ...]
    sensitivity: tuple[float, ...]
    n_targets: int
    n_patients: int

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fp_per_patient, self.sensitivity))


def match_detections(detections, annotations, match_radius_mm: float = DEFAULT_MATCH_RADIUS_MM,
                     process_mode: bool = False) -> list:
    """Greedy matching in descending score order; one detection per annotation.

    Returns, per detection (in the given order), the matched annotation or
    None.  In process mode a detection may only claim annotations sharing
    the process label of its nearest annotation.
    """
    result = [None] * len(detections)
    if not annotations:
        return result
    ann_pos = np.array([a.position for a in annotations], dtype=np.float64)
    labels = [a.process_label for a in annotations]
    taken = np.zeros(len(annotations), dtype=bool)
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, tuple(detections[i].position[::-1])))
    for i in order:
        dist = np.linalg.norm(ann_pos - np.asarray(detections[i].position), axis=1)
        ok = (dist <= match_radius_mm) & ~taken
        if process_mode:
            nearest = labels[int(np.argmin(dist))]
            ok &= np.array([lab == nearest for lab in labels])
        if ok.any():
            j = int(np.flatnonzero(ok)[np.argmin(dist[ok])])
            taken[j] = True
            result[i] = annotations[j]
    return result


def froc(detections: dict, annotations: dict, match_radius_mm: float = DEFAULT_MATCH_RADIUS_MM,
         thresholds=None, process_mode: bool = False) -> FrocCurve:
    """Sensitivity and false positives per patient at each score threshold.

    ``detections`` and ``annotations`` map patient id to lists.  Points are
    ordered by descending threshold, i.e. along increasing false positives.
    """
    if match_radius_mm <= 0:
        raise ValueError("match_radius_mm must be positive")
    thresholds = sorted(DEFAULT_THRESHOLDS if thresholds is None else thresholds, reverse=True)
    if not thresholds:
        raise ValueError("thresholds must not be empty")
    patients = sorted(set(detections) | set(annotations))
    n_targets = sum(len(annotations.get(p, [])) for p in patients)
    n_patients = len(patients)
    fps, sens = [], []
    for t in thresholds:
        hits = false_pos = 0
        for p in patients:
            dets = [d for d in detections.get(p, []) if d.score >= t]
            matched = match_detections(dets, annotations.get(p, []), match_radius_mm, process_mode)
            n_hit = sum(m is not None for m in matched)
            hits += n_hit
            false_pos += len(dets) - n_hit
        fps.append(false_pos / n_patients if n_patients else 0.0)
        sens.append(hits / n_targets if n_targets else 0.0)
    return FrocCurve(tuple(float(t) for t in thresholds), tuple(fps), tuple(sens), n_targets, n_patients)


def sensitivity_at_fp(curve: FrocCurve, fp_targets=DEFAULT_FP_TARGETS) -> list[float]:
    """Best sensitivity reachable at or below each false-positive budget."""
    fp = np.asarray(curve.fp_per_patient)
    sens = np.asarray(curve.sensitivity)
    out = []
    for target in fp_targets:
        ok = fp <= target
        out.append(float(sens[ok].max()) if ok.any() else 0.0)
    return out


def summary(roc_curve: RocCurve, froc_curve: FrocCurve, fp_targets=DEFAULT_FP_TARGETS) -> dict:
    s5, s10 = sensitivity_at_fp(froc_curve, [5.0, 10.0])
    out = {
        "auc": roc_curve.auc,
        "sens_at_5fp": s5,
        "sens_at_10fp": s10,
        "n_targets": froc_curve.n_targets,
        "n_patients": froc_curve.n_patients,
    }
    for t, s in zip(fp_targets, sensitivity_at_fp(froc_curve, fp_targets)):
        out.setdefault(f"sens_at_{t:g}fp", s)
    return out


def write_curve_csv(xs, ys, path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y"])
            for x, y in zip(xs, ys):
                w.writerow([repr(float(x)), repr(float(y))])
    except OSError as exc:
        raise IoError(f"cannot write curve {path}: {exc}") from exc


def write_summary(data: dict, path) -> None:
    try:
        with open(path, "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write summary {path}: {exc}") from exc
