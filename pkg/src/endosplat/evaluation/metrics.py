"""Point-tracking metrics: median trajectory error, position accuracy, survival.

All functions take predicted and ground-truth trajectories of shape
(N, T, 2) plus a visibility mask (N, T); only visible (point, frame) pairs
are scored.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ContractViolation

DELTA_THRESHOLDS = (1.0, 2.0, 4.0, 8.0, 16.0)
SURVIVAL_THRESHOLD_512 = 50.0


def _errors(pred, gt, visible=None):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[-1] != 2:
        raise ContractViolation(f"trajectory shapes differ or are not (N, T, 2): {pred.shape} vs {gt.shape}")
    if visible is None:
        visible = np.ones(gt.shape[:2], dtype=bool)
    visible = np.asarray(visible, dtype=bool)
    if visible.shape != gt.shape[:2]:
        raise ContractViolation("visibility mask does not match trajectories")
    err = np.linalg.norm(pred - gt, axis=-1)
    # a lost prediction (NaN) is infinitely wrong
    err = np.where(np.isnan(err), np.inf, err)
    return err, visible


def point_errors(pred, gt, visible=None):
    """(N, T) pixel errors, NaN where the point is not visible."""
    err, visible = _errors(pred, gt, visible)
    return np.where(visible, err, np.nan)


def mte(pred, gt, visible=None):
    """Median 2D error over visible (point, frame) pairs, in pixels."""
    err, visible = _errors(pred, gt, visible)
    e = err[visible]
    if e.size == 0:
        raise ContractViolation("no visible (point, frame) pairs to score")
    return float(np.median(e))


def delta_avg(pred, gt, visible=None, thresholds=DELTA_THRESHOLDS):
    """Mean over thresholds of the percentage of visible pairs within threshold."""
    err, visible = _errors(pred, gt, visible)
    e = err[visible]
    if e.size == 0:
        raise ContractViolation("no visible (point, frame) pairs to score")
    return float(np.mean([np.mean(e < th) for th in thresholds]) * 100.0)


def survival_threshold(width, threshold_512=SURVIVAL_THRESHOLD_512):
    return threshold_512 * width / 512.0


def survival(pred, gt, visible=None, threshold=SURVIVAL_THRESHOLD_512):
    """Mean fraction of the sequence each point survives before first failure, in percent.

    A point fails at the first visible frame where its error exceeds
    ``threshold``; a point that never fails survives the whole sequence.
    """
    err, visible = _errors(pred, gt, visible)
    N, T = err.shape
    if N == 0 or T == 0:
        raise ContractViolation("no trajectories to score")
    failed = visible & (err > threshold)
    first = np.where(failed.any(axis=1), np.argmax(failed, axis=1), T)
    return float(np.mean(first / T) * 100.0)


@dataclass
class MetricsReport:
    mte: float
    delta_avg: float
    survival: float
    n_points: int
    n_frames: int
    survival_threshold: float
    thresholds: list = field(default_factory=lambda: list(DELTA_THRESHOLDS))
    point_errors: np.ndarray = field(default=None, repr=False)  # (N, T), NaN where not visible

    def summary(self):
        d = asdict(self)
        d.pop("point_errors")
        return d


def evaluate(pred, gt, visible=None, thresholds=DELTA_THRESHOLDS, survival_px=None, width=None) -> MetricsReport:
    """All metrics at once. ``survival_px`` defaults to 50 px scaled by ``width``/512."""
    if survival_px is None:
        survival_px = survival_threshold(width if width is not None else 512)
    gt = np.asarray(gt, dtype=float)
    return MetricsReport(
        mte=mte(pred, gt, visible),
        delta_avg=delta_avg(pred, gt, visible, thresholds),
        survival=survival(pred, gt, visible, survival_px),
        n_points=gt.shape[0],
        n_frames=gt.shape[1],
        survival_threshold=float(survival_px),
        thresholds=[float(t) for t in thresholds],
        point_errors=point_errors(pred, gt, visible),
    )


__all__ = [
    "DELTA_THRESHOLDS",
    "MetricsReport",
    "delta_avg",
    "evaluate",
    "mte",
    "point_errors",
    "survival",
    "survival_threshold",
]
