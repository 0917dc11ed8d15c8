##############################################################################
# metrics.py
# AUROC and DeLong's paired test, via midranks
##############################################################################
import logging
from typing import NamedTuple, Sequence, Tuple, Union

import numpy
from scipy import stats

from bimamba._exceptions import (
    DegenerateTestError,
    ShapeError,
    UndefinedMetricError,
)

__all__ = [
    "DeLongResult",
    "DeLongComponents",
    "auroc",
    "delong_components",
    "delong_test",
]

logger = logging.getLogger(__name__)

ArrayLike = Union[Sequence[float], numpy.ndarray]


class DeLongComponents(NamedTuple):
    """
    Structural components of one score set.

    ``v10[i]`` is the fraction of negatives that positive ``i`` outranks,
    ``v01[j]`` the fraction of positives that outrank negative ``j``
    (ties count one half). Both average to the AUROC.
    """

    auc: float
    v10: numpy.ndarray
    v01: numpy.ndarray


class DeLongResult(NamedTuple):
    auc_a: float
    auc_b: float
    z: float
    p_value: float


def _split(
    scores: ArrayLike, labels: ArrayLike
) -> Tuple[numpy.ndarray, numpy.ndarray, numpy.ndarray]:
    scores = numpy.asarray(scores, dtype=numpy.float64).ravel()
    labels = numpy.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ShapeError(
            f"{scores.size} scores but {labels.size} labels"
        )
    if not numpy.all(numpy.isfinite(scores)):
        raise UndefinedMetricError("Scores contain non-finite values")
    if not numpy.all((labels == 0) | (labels == 1)):
        raise UndefinedMetricError("Labels must be 0 or 1")
    positive = labels == 1
    if positive.all() or not positive.any():
        raise UndefinedMetricError(
            "AUROC is undefined without both positive and negative labels"
            f" ({int(positive.sum())} positives, {int((~positive).sum())}"
            " negatives)"
        )
    return scores, scores[positive], scores[~positive]


def auroc(scores: ArrayLike, labels: ArrayLike) -> float:
    """
    Area under the ROC curve as the Mann-Whitney statistic: the fraction of
    (positive, negative) pairs ranked correctly, ties counting one half.
    """
    scores, pos, neg = _split(scores, labels)
    ranks = stats.rankdata(scores)
    m, n = pos.size, neg.size
    positive_rank_sum = ranks[numpy.asarray(labels).ravel() == 1].sum()
    return float((positive_rank_sum - m * (m + 1) / 2.0) / (m * n))


def delong_components(
    scores: ArrayLike, labels: ArrayLike
) -> DeLongComponents:
    """Midrank computation of the structural components, O(n log n)."""
    scores, pos, neg = _split(scores, labels)
    m, n = pos.size, neg.size
    labels = numpy.asarray(labels).ravel()
    combined = stats.rankdata(scores)
    tz_pos, tz_neg = combined[labels == 1], combined[labels == 0]
    tx = stats.rankdata(pos)
    ty = stats.rankdata(neg)
    v10 = (tz_pos - tx) / n
    v01 = 1.0 - (tz_neg - ty) / m
    return DeLongComponents(float(v10.mean()), v10, v01)


def _component_variance(values: numpy.ndarray) -> float:
    if values.size < 2:
        return 0.0
    return float(numpy.var(values, ddof=1))


def delong_test(
    scores_a: ArrayLike, scores_b: ArrayLike, labels: ArrayLike
) -> DeLongResult:
    """
    DeLong's test for two correlated AUROCs on the same labels.

    The variance of ``auc_a - auc_b`` is estimated from the differences of
    the paired components, which equals ``var_a + var_b - 2 cov``. The
    two-sided p-value uses the normal approximation, which is rough below
    about 30 samples per class.

    Raises:
        DegenerateTestError: When that variance is zero (e.g. identical
            score sets); the exception carries both AUROCs.
    """
    a = delong_components(scores_a, labels)
    b = delong_components(scores_b, labels)
    m, n = a.v10.size, a.v01.size
    variance = (
        _component_variance(a.v10 - b.v10) / m
        + _component_variance(a.v01 - b.v01) / n
    )
    if not variance > 0.0:
        raise DegenerateTestError(
            "DeLong test is degenerate: the AUROC difference has zero"
            f" variance (auc_a={a.auc:.6f}, auc_b={b.auc:.6f})",
            auc_a=a.auc,
            auc_b=b.auc,
        )
    z = (a.auc - b.auc) / numpy.sqrt(variance)
    p = max(2.0 * float(stats.norm.sf(abs(z))), numpy.finfo(float).tiny)
    logger.debug(
        f"DeLong: auc_a={a.auc:.4f} auc_b={b.auc:.4f} z={z:.4f} p={p:.3g}"
    )
    return DeLongResult(a.auc, b.auc, float(z), min(p, 1.0))
