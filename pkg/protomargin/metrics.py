"""
Evaluation metrics for protomargin.

Provides exact-count top-fraction thresholding, activation precision, rank-based
AUROC (one-vs-all and averaged), ROC curves, Cohen's kappa, and percentile
bootstrap intervals including a paired two-model comparison.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Literal, TypeVar

import numpy as np
from scipy.stats import rankdata


logger = logging.getLogger("protomargin.metrics")

DEFAULT_TAU = 0.95
DEFAULT_RESAMPLES = 5000
DEFAULT_LEVEL = 0.95

R = TypeVar("R")
Scale = Literal["lesion", "fine"]


class MetricUndefinedError(ValueError):
    """Raised when a metric has no value for its input (one-class AUROC, degenerate kappa)."""


@dataclass
class EvalRecord:
    """
    Per-sample evaluation output.

    Attributes:
        sample_id: Sample identifier.
        margin_probabilities: Softmax of the margin logits (sums to 1).
        margin_logits: Unnormalized margin scores.
        predicted_class: Argmax of the margin probabilities.
        true_class: Ground-truth margin class.
        malignancy_probability: h2 output.
        true_malignancy: Ground-truth malignancy (0 or 1).
        pams: Same-class prototype index -> image-resolution activation map.
        lesion_mask: 1 outside the lesion.
        fine_mask: 0 on margin-relevant pixels; None when not annotated.
    """

    sample_id: str
    margin_probabilities: np.ndarray
    margin_logits: np.ndarray
    predicted_class: int
    true_class: int
    malignancy_probability: float
    true_malignancy: int
    pams: dict[int, np.ndarray] = field(default_factory=dict)
    lesion_mask: np.ndarray | None = None
    fine_mask: np.ndarray | None = None


# ============================================================================
# Activation precision
# ============================================================================


def threshold_count(cells: int, tau: float) -> int:
    """ceil((1 - tau) * cells), immune to representation error in (1 - tau)."""
    return int(math.ceil(round((1.0 - tau) * cells, 9)))


def threshold_top(values: np.ndarray, tau: float = DEFAULT_TAU) -> np.ndarray:
    """
    Mark the top (1 - tau) fraction of cells with 1.

    Exactly ceil((1 - tau) * N) cells are set, by descending value; ties go to the
    earlier cell in row-major order.

    Raises:
        ValueError: If the map is empty or tau is not in (0, 1).
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("threshold_top needs a nonempty map")
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    count = threshold_count(values.size, tau)
    chosen = np.argsort(-values.reshape(-1), kind="stable")[:count]
    out = np.zeros(values.size, dtype=np.uint8)
    out[chosen] = 1
    return out.reshape(values.shape)


def map_precision(pam: np.ndarray, mask: np.ndarray, tau: float = DEFAULT_TAU) -> float:
    """Fraction of the top-activated pixels of one map that are relevant (mask == 0)."""
    pam = np.asarray(pam)
    mask = np.asarray(mask)
    if pam.shape != mask.shape:
        raise ValueError(f"map shape {pam.shape} does not match mask shape {mask.shape}")
    top = threshold_top(pam, tau)
    return float(np.sum((1 - mask) * top) / np.sum(top))


def activation_precision(
    record: EvalRecord, scale: Scale = "fine", tau: float = DEFAULT_TAU
) -> float:
    """
    Mean over same-class prototypes of the relevant share of top-activated pixels.

    The lesion scale uses the lesion mask, the fine scale the fine mask. The
    denominator is the number of thresholded pixels, not the relevant-pixel count.

    Raises:
        ValueError: If the record has no same-class PAM or lacks the mask.
    """
    if scale == "lesion":
        mask = record.lesion_mask
    elif scale == "fine":
        mask = record.fine_mask
    else:
        raise ValueError(f"Unknown activation-precision scale: {scale}")
    if mask is None:
        raise ValueError(f"record {record.sample_id} has no {scale} mask")
    if not record.pams:
        raise ValueError(f"record {record.sample_id} has no same-class prototype")
    return float(np.mean([map_precision(pam, mask, tau) for pam in record.pams.values()]))


def mean_activation_precision(
    records: Sequence[EvalRecord], scale: Scale = "fine", tau: float = DEFAULT_TAU
) -> float:
    """Average activation precision over the records that carry the scale's mask."""
    usable = [
        r for r in records if (r.lesion_mask if scale == "lesion" else r.fine_mask) is not None
    ]
    if not usable:
        raise MetricUndefinedError(f"no records carry a {scale} mask")
    return float(np.mean([activation_precision(r, scale, tau) for r in usable]))


# ============================================================================
# ROC analysis
# ============================================================================


def _binary(scores: Sequence[float] | np.ndarray, labels: Sequence[int] | np.ndarray):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores {s.shape} and labels {y.shape} must be equal-length vectors")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUROC needs both positive and negative labels")
    return s, y, n_pos, n_neg


def auroc(scores: Sequence[float] | np.ndarray, labels: Sequence[int] | np.ndarray) -> float:
    """
    Mann-Whitney AUROC: fraction of (positive, negative) pairs ordered correctly,
    ties counted one half.

    Raises:
        MetricUndefinedError: If only one class is present.

    Example:
        ```python
        auroc([0.9, 0.6, 0.4, 0.1], [1, 0, 1, 0])  # 0.75
        ```
    """
    s, y, n_pos, n_neg = _binary(scores, labels)
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def one_vs_all_auroc(
    probabilities: np.ndarray, labels: Sequence[int] | np.ndarray
) -> tuple[list[float], float]:
    """Per-class one-vs-all AUROCs and their average."""
    probs = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    per_class = [auroc(probs[:, c], (y == c).astype(int)) for c in range(probs.shape[1])]
    return per_class, float(np.mean(per_class))


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray


def roc_curve(scores: Sequence[float] | np.ndarray, labels: Sequence[int] | np.ndarray) -> RocCurve:
    """
    ROC points at every distinct score, from (0, 0) to (1, 1).

    The trapezoidal area under the returned curve equals `auroc`.
    """
    s, y, n_pos, n_neg = _binary(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    distinct = np.flatnonzero(np.diff(s)) if s.size > 1 else np.array([], dtype=int)
    cut = np.r_[distinct, s.size - 1]
    tps = np.cumsum(y)[cut]
    fps = (cut + 1) - tps
    return RocCurve(
        fpr=np.r_[0.0, fps / n_neg],
        tpr=np.r_[0.0, tps / n_pos],
        thresholds=np.r_[np.inf, s[cut]],
    )


# ============================================================================
# Agreement
# ============================================================================


def confusion_matrix(
    predicted: Sequence[int] | np.ndarray,
    actual: Sequence[int] | np.ndarray,
    num_classes: int | None = None,
) -> np.ndarray:
    """[actual, predicted] count matrix."""
    pred = np.asarray(predicted).astype(int)
    true = np.asarray(actual).astype(int)
    if pred.shape != true.shape:
        raise ValueError(f"predicted {pred.shape} and actual {true.shape} differ in length")
    k = num_classes or int(max(pred.max(initial=0), true.max(initial=0)) + 1)
    matrix = np.zeros((k, k), dtype=np.int64)
    np.add.at(matrix, (true, pred), 1)
    return matrix


def cohens_kappa(
    predicted: Sequence[int] | np.ndarray,
    actual: Sequence[int] | np.ndarray,
    num_classes: int | None = None,
) -> float:
    """
    Cohen's kappa (p_o - p_e) / (1 - p_e) with marginal-product expected agreement.

    Raises:
        ValueError: With fewer than two samples.
        MetricUndefinedError: If p_e = 1 (both raters constant on one class).

    Example:
        ```python
        cohens_kappa([0, 0, 1, 1, 0, 1], [0, 0, 0, 1, 1, 1])  # 1/3
        ```
    """
    matrix = confusion_matrix(predicted, actual, num_classes)
    n = matrix.sum()
    if n < 2:
        raise ValueError("cohens_kappa needs at least two samples")
    p_o = np.trace(matrix) / n
    p_e = float(np.sum(matrix.sum(axis=0) * matrix.sum(axis=1))) / float(n * n)
    if math.isclose(p_e, 1.0):
        raise MetricUndefinedError("kappa is undefined when expected agreement is 1")
    return float((p_o - p_e) / (1.0 - p_e))


# ============================================================================
# Bootstrap
# ============================================================================


def _resample_metric(
    metric: Callable[[list[R]], float],
    pools: Sequence[Sequence[R]],
    n_resamples: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, int]:
    n = len(pools[0])
    values = np.empty((n_resamples, len(pools)))
    redraws = 0
    done = 0
    while done < n_resamples:
        idx = rng.integers(0, n, size=n)
        try:
            values[done] = [metric([pool[i] for i in idx]) for pool in pools]
        except MetricUndefinedError:
            redraws += 1
            if redraws > 10 * n_resamples:
                raise MetricUndefinedError(
                    "metric undefined on too many bootstrap resamples"
                ) from None
            continue
        done += 1
    return values, redraws


def bootstrap_ci(
    metric: Callable[[list[R]], float],
    records: Sequence[R],
    n_resamples: int = DEFAULT_RESAMPLES,
    level: float = DEFAULT_LEVEL,
    seed: int = 0,
) -> tuple[float, float]:
    """
    Percentile bootstrap interval of `metric` over resamples with replacement.

    Resamples on which the metric is undefined are redrawn; the redraw count is
    logged. Deterministic for a given seed.

    Raises:
        ValueError: If n_resamples < 100, level is not in (0, 1) or records is empty.

    Example:
        ```python
        lo, hi = bootstrap_ci(lambda rs: auroc(*zip(*rs)), list(zip(scores, labels)))
        ```
    """
    if n_resamples < 100:
        raise ValueError(f"n_resamples must be at least 100, got {n_resamples}")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    if not records:
        raise ValueError("bootstrap_ci needs at least one record")

    rng = np.random.default_rng(seed)
    values, redraws = _resample_metric(metric, [records], n_resamples, rng)
    if redraws:
        logger.info("bootstrap redrew undefined resamples", extra={"redraws": redraws})
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(values[:, 0], [100.0 * alpha, 100.0 * (1.0 - alpha)])
    return float(lo), float(hi)


@dataclass
class PairedBootstrapResult:
    """Difference (b - a) of a metric between two models on the same records."""

    observed: float
    mean_difference: float
    ci_low: float
    ci_high: float
    p_value: float


def paired_bootstrap_difference(
    metric: Callable[[list[R]], float],
    records_a: Sequence[R],
    records_b: Sequence[R],
    n_resamples: int = DEFAULT_RESAMPLES,
    level: float = DEFAULT_LEVEL,
    seed: int = 0,
) -> PairedBootstrapResult:
    """
    Paired bootstrap of metric(b) - metric(a): both record lists are resampled with
    the same indices. The one-sided p-value is the share of resampled differences
    that are <= 0.

    Raises:
        ValueError: If the record lists differ in length.
    """
    if len(records_a) != len(records_b):
        raise ValueError(
            f"paired bootstrap needs equal-length record lists, got {len(records_a)} "
            f"and {len(records_b)}"
        )
    if n_resamples < 100:
        raise ValueError(f"n_resamples must be at least 100, got {n_resamples}")
    rng = np.random.default_rng(seed)
    values, redraws = _resample_metric(metric, [records_a, records_b], n_resamples, rng)
    if redraws:
        logger.info("bootstrap redrew undefined resamples", extra={"redraws": redraws})
    diffs = values[:, 1] - values[:, 0]
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(diffs, [100.0 * alpha, 100.0 * (1.0 - alpha)])
    return PairedBootstrapResult(
        observed=metric(list(records_b)) - metric(list(records_a)),
        mean_difference=float(diffs.mean()),
        ci_low=float(lo),
        ci_high=float(hi),
        p_value=float(np.mean(diffs <= 0)),
    )
