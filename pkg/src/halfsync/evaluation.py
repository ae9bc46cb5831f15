"""Disruption alarms, shot-level ROC curves and AUC."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .data import Shot
from .model import Parameters, fprop
from .numerics import PrecisionPolicy

__all__ = [
    "CUTOFF_MS",
    "RocCurve",
    "UndefinedAUC",
    "shot_score",
    "roc_auc",
    "predict_traces",
    "score_shots",
    "evaluate_auc",
    "write_roc_csv",
]

log = logging.getLogger(__name__)

CUTOFF_MS = 30  # alarms later than this before the disruption are too late


class UndefinedAUC(ValueError):
    pass


@dataclass
class RocCurve:
    thresholds: np.ndarray  # alarm iff score > threshold; first is +inf-like (no alarms)
    fpr: np.ndarray
    tpr: np.ndarray


def shot_score(trace, shot: Shot, cutoff: int = CUTOFF_MS) -> float | None:
    """Highest disruptivity in the region where an alarm still counts.

    Disruptive shots only look at timesteps ``<= t_disrupt - cutoff``; quiet
    shots look at the whole trace. Returns None (and warns) for a disruptive
    shot whose disruption comes before ``cutoff``.
    """
    trace = np.asarray(trace, dtype=np.float64).reshape(-1)
    if trace.size != shot.length:
        raise ValueError(f"trace length {trace.size} != shot length {shot.length}")
    if not shot.disruptive:
        return float(trace.max())
    last = shot.t_disrupt - cutoff
    if last < 0:
        log.warning("shot %s disrupts at %d ms, before the %d ms cutoff; excluded",
                    shot.id, shot.t_disrupt, cutoff)
        return None
    return float(trace[:last + 1].max())


def roc_auc(scores, labels) -> tuple[RocCurve, float]:
    """Threshold sweep over distinct scores, trapezoidal AUC.

    An alarm fires when score > threshold, so tied scores enter the curve
    together as one point.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUC("AUC needs at least one positive and one negative")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    lab = labels[order]
    tp = np.cumsum(lab)
    fp = np.cumsum(~lab)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tpr = np.r_[0.0, tp[ends] / n_pos]
    fpr = np.r_[0.0, fp[ends] / n_neg]
    thresholds = np.r_[s[0], s[ends[1:]], -np.inf] if ends.size > 1 else np.r_[s[0], -np.inf]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(thresholds, fpr, tpr), auc


def predict_traces(params: Parameters, shots: list[Shot], policy: PrecisionPolicy,
                   seq_len: int | None = None, max_batch: int = 512) -> list[np.ndarray]:
    """Disruptivity trace for every timestep of every shot.

    Shots are cut into end-aligned windows like the training chunks; the
    leading partial window is left-padded with zeros and the padding's
    outputs are discarded. State resets at every window.
    """
    seq_len = seq_len or params.config.seq_len
    d = params.config.feature_dim
    windows, where = [], []
    for k, s in enumerate(shots):
        for start in range(s.length - seq_len, -seq_len, -seq_len):
            if start >= 0:
                w = s.channels[start:start + seq_len]
                pad = 0
            else:
                pad = -start
                w = np.concatenate([np.zeros((pad, d), np.float32), s.channels[:seq_len - pad]])
            windows.append(w)
            where.append((k, max(start, 0), pad))
    out = np.empty((len(windows), seq_len), dtype=np.float64)
    x = np.stack(windows)
    for i in range(0, len(windows), max_batch):
        y, _ = fprop(params, x[i:i + max_batch], policy, train_mode=False)
        out[i:i + max_batch] = y[..., 0]
    traces = [np.empty(s.length) for s in shots]
    for (k, start, pad), y in zip(where, out):
        traces[k][start:start + seq_len - pad] = y[pad:]
    return traces


def score_shots(traces, shots: list[Shot], cutoff: int = CUTOFF_MS):
    """Per-shot scores and labels, skipping shots without a valid alarm window."""
    scores, labels = [], []
    for tr, s in zip(traces, shots):
        sc = shot_score(tr, s, cutoff)
        if sc is not None:
            scores.append(sc)
            labels.append(s.disruptive)
    return np.array(scores), np.array(labels, dtype=bool)


def evaluate_auc(params: Parameters, shots: list[Shot], policy: PrecisionPolicy,
                 cutoff: int = CUTOFF_MS) -> tuple[RocCurve, float]:
    traces = predict_traces(params, shots, policy)
    return roc_auc(*score_shots(traces, shots, cutoff))


def write_roc_csv(path, curve: RocCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(curve.thresholds, curve.fpr, curve.tpr):
            w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])
