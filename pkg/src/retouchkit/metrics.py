"""Saliency evaluation metrics: AUC-Judd, NSS, CC, SIM, KLD.

Fixations are integer pixel coordinates (in this toolkit, annotated
distortion-region centers); density ground truth for CC/SIM/KLD is the
rasterized region mask, optionally Gaussian-blurred.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .saliency import SaliencyMap, _check_same_dims, _kld_term


@dataclass(frozen=True)
class FixationSet:
    points: tuple[tuple[int, int], ...]  # (x, y) pixel coordinates

    def __init__(self, points: Iterable[tuple[int, int]]):
        object.__setattr__(self, "points", tuple((int(x), int(y)) for x, y in points))

    def __len__(self) -> int:
        return len(self.points)

    def validate_bounds(self, width: int, height: int) -> None:
        for x, y in self.points:
            if not (0 <= x < width and 0 <= y < height):
                raise ValueError("fixation (%d, %d) outside %dx%d map" % (x, y, width, height))


@dataclass(frozen=True)
class MetricReport:
    auc_judd: float
    nss: float
    cc: float
    sim: float
    kld: float

    def as_tsv_row(self) -> str:
        return "\t".join(
            "%.6f" % v for v in (self.auc_judd, self.nss, self.cc, self.sim, self.kld)
        )


TSV_HEADER = "image\tauc_judd\tnss\tcc\tsim\tkld"


def cc(pred: SaliencyMap, truth: SaliencyMap) -> float:
    """Pearson correlation of the two pixel populations."""
    _check_same_dims(pred, truth)
    p = pred.to_array().astype(np.float64).ravel()
    g = truth.to_array().astype(np.float64).ravel()
    pc = p - p.mean()
    gc = g - g.mean()
    denom = np.sqrt((pc**2).sum() * (gc**2).sum())
    if denom == 0.0:
        raise ValueError("cc undefined for a constant map")
    return float((pc * gc).sum() / denom)


def sim(pred: SaliencyMap, truth: SaliencyMap) -> float:
    """Histogram intersection of the sum-normalized maps."""
    _check_same_dims(pred, truth)
    p = pred.to_array().astype(np.float64).ravel()
    g = truth.to_array().astype(np.float64).ravel()
    if p.sum() <= 0.0 or g.sum() <= 0.0:
        raise ValueError("sim undefined for a zero-sum map")
    return float(np.minimum(p / p.sum(), g / g.sum()).sum())


def kld(pred: SaliencyMap, truth: SaliencyMap, epsilon: float = 1e-7) -> float:
    """KL(truth || pred) over sum-normalized maps; shared with the hybrid
    training loss so evaluation and training agree exactly."""
    _check_same_dims(pred, truth)
    return _kld_term(
        pred.to_array().astype(np.float64), truth.to_array().astype(np.float64), epsilon
    )


def nss(pred: SaliencyMap, fix: FixationSet) -> float:
    """Mean z-scored saliency at fixation points (population std)."""
    if len(fix) == 0:
        raise ValueError("nss needs at least one fixation")
    fix.validate_bounds(pred.width, pred.height)
    p = pred.to_array().astype(np.float64)
    sigma = p.std()  # population std
    if sigma == 0.0:
        raise ValueError("nss undefined for a constant map")
    mu = p.mean()
    vals = [(p[y, x] - mu) / sigma for x, y in fix.points]
    return float(np.mean(vals))


def auc_judd(pred: SaliencyMap, fix: FixationSet) -> float:
    """ROC area with fixated pixels as positives, all other pixels as
    negatives. Thresholds sweep every distinct saliency value plus the
    extremes; trapezoidal integration then gives ties exactly half credit
    (Mann-Whitney convention), so a constant map scores 0.5."""
    if len(fix) == 0:
        raise ValueError("auc_judd needs at least one fixation")
    fix.validate_bounds(pred.width, pred.height)
    p = pred.to_array().astype(np.float64)
    pos_mask = np.zeros(p.shape, dtype=bool)
    for x, y in fix.points:
        pos_mask[y, x] = True
    pos = p[pos_mask]
    neg = p[~pos_mask]
    if neg.size == 0:
        raise ValueError("auc_judd needs at least one non-fixated pixel")

    # integer trapezoid so ties get exactly half credit and the result is
    # a single correctly-rounded division (bit-equal to the pairwise
    # Mann-Whitney statistic)
    thresholds = np.concatenate(([np.inf], np.unique(p)[::-1]))
    tp = [int((pos >= t).sum()) for t in thresholds]
    fp = [int((neg >= t).sum()) for t in thresholds]
    num = sum(
        (tp[i] + tp[i + 1]) * (fp[i + 1] - fp[i]) for i in range(len(thresholds) - 1)
    )
    return num / (2 * pos.size * neg.size)


def evaluate_all(
    pred: SaliencyMap, truth: SaliencyMap, fix: FixationSet, epsilon: float = 1e-7
) -> MetricReport:
    """Bundle of the five metrics for one image."""
    return MetricReport(
        auc_judd=auc_judd(pred, fix),
        nss=nss(pred, fix),
        cc=cc(pred, truth),
        sim=sim(pred, truth),
        kld=kld(pred, truth, epsilon),
    )


def aggregate_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Unweighted mean of per-image reports."""
    if not reports:
        raise ValueError("nothing to aggregate")
    return MetricReport(
        auc_judd=float(np.mean([r.auc_judd for r in reports])),
        nss=float(np.mean([r.nss for r in reports])),
        cc=float(np.mean([r.cc for r in reports])),
        sim=float(np.mean([r.sim for r in reports])),
        kld=float(np.mean([r.kld for r in reports])),
    )
