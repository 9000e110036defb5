"""EER, minDCF and DET operating points.

Convention: a trial is accepted when ``score >= threshold``. Thresholds are
swept over every distinct score plus ``+inf`` (reject all).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_io import ScoreSet


@dataclass(frozen=True)
class DcfParams:
    p_target: float
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.p_target < 1.0:
            raise ValueError("p_target must lie in (0, 1)")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ValueError("costs must be positive")


DCF1 = DcfParams(0.01)
DCF2 = DcfParams(0.001)


def error_curve(s: ScoreSet):
    """(thresholds, frr, far) at each distinct score and at ``+inf``."""
    s.check_both_classes()
    tar = np.sort(s.target_scores)
    non = np.sort(s.nontarget_scores)
    thr = np.unique(s.scores)
    # FRR = #targets strictly below; FAR = #nontargets at or above
    frr = np.searchsorted(tar, thr, side="left") / len(tar)
    far = (len(non) - np.searchsorted(non, thr, side="left")) / len(non)
    thr = np.append(thr, np.inf)
    frr = np.append(frr, 1.0)
    far = np.append(far, 0.0)
    return thr, frr, far


def det_points(s: ScoreSet) -> list[tuple[float, float]]:
    _, frr, far = error_curve(s)
    return list(zip(far.tolist(), frr.tolist()))


def interpolate_crossing(thr, frr, far) -> tuple[float, float]:
    """Linear-interpolated FRR = FAR crossing on a swept curve."""
    diff = frr - far
    k = int(np.argmax(diff >= 0))  # diff ends at +1, so a crossing exists
    if diff[k] == 0 or k == 0:
        return float(frr[k]), float(thr[k])
    t = -diff[k - 1] / (diff[k] - diff[k - 1])
    value = frr[k - 1] + t * (frr[k] - frr[k - 1])
    if np.isfinite(thr[k]):
        threshold = thr[k - 1] + t * (thr[k] - thr[k - 1])
    else:
        threshold = thr[k - 1]
    return float(value), float(threshold)


def eer(s: ScoreSet) -> tuple[float, float]:
    """Equal error rate in [0, 1] and the (interpolated) threshold."""
    return interpolate_crossing(*error_curve(s))


def min_dcf(s: ScoreSet, p: DcfParams = DCF1) -> tuple[float, float]:
    """Normalized minimum detection cost and its threshold (ties -> lower)."""
    thr, frr, far = error_curve(s)
    thr = np.append(-np.inf, thr)
    frr = np.append(0.0, frr)
    far = np.append(1.0, far)
    w_miss = p.c_miss * p.p_target
    w_fa = p.c_fa * (1.0 - p.p_target)
    dcf = (w_miss * frr + w_fa * far) / min(w_miss, w_fa)
    k = int(np.argmin(dcf))
    return float(dcf[k]), float(thr[k])


def dcf_at(s: ScoreSet, threshold: float, p: DcfParams) -> float:
    frr = np.mean(s.target_scores < threshold)
    far = np.mean(s.nontarget_scores >= threshold)
    w_miss = p.c_miss * p.p_target
    w_fa = p.c_fa * (1.0 - p.p_target)
    return float((w_miss * frr + w_fa * far) / min(w_miss, w_fa))


def metrics_report(s: ScoreSet, dcf1: DcfParams = DCF1, dcf2: DcfParams = DCF2) -> str:
    e, _ = eer(s)
    d1, _ = min_dcf(s, dcf1)
    d2, _ = min_dcf(s, dcf2)
    return f"EER {100 * e:.4f} minDCF1 {d1:.4f} minDCF2 {d2:.4f}"
