"""
Training objective for protomargin.

Provides the cross-entropy, cluster, separation and fine-annotation terms and the
weighted stage-A1 objective. All terms are built on one differentiable graph.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from protomargin import functional as F
from protomargin.tensor import ShapeError, Tensor, no_grad


DEFAULT_LAMBDA_C = 0.8
DEFAULT_LAMBDA_S = 0.08
DEFAULT_LAMBDA_F = 0.001


@dataclass
class LossBreakdown:
    """
    Individual loss terms and their weighted sum.

    Attributes:
        cross_entropy: Margin cross-entropy.
        cluster: Cluster cost (>= 0).
        separation: Separation cost (<= 0).
        fine: Fine-annotation loss (>= 0).
        total: cross_entropy + lambda_c * cluster + lambda_s * separation + lambda_f * fine.
    """

    cross_entropy: Tensor
    cluster: Tensor
    separation: Tensor
    fine: Tensor
    total: Tensor
    lambda_c: float = DEFAULT_LAMBDA_C
    lambda_s: float = DEFAULT_LAMBDA_S
    lambda_f: float = DEFAULT_LAMBDA_F

    def values(self) -> dict[str, float]:
        return {
            "cross_entropy": self.cross_entropy.item(),
            "cluster": self.cluster.item(),
            "separation": self.separation.item(),
            "fine": self.fine.item(),
            "total": self.total.item(),
        }


def _class_membership(
    labels: Sequence[int] | np.ndarray, prototype_classes: np.ndarray
) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.asarray(prototype_classes, dtype=np.int64)
    missing = sorted(set(labels.tolist()) - set(classes.tolist()))
    if missing:
        raise ValueError(f"classes without prototypes: {missing}")
    return labels[:, None] == classes[None, :]


def cluster_cost(
    distances: Tensor,
    labels: Sequence[int] | np.ndarray,
    prototype_classes: np.ndarray,
    k: int,
) -> Tensor:
    """
    Mean over images of the smallest same-class mink distance.

    `distances` is the [N, m, g, g] squared-distance stack; each prototype's
    distance to an image is the mean of its k smallest patch distances. With k = 1
    this is the minimum-patch cluster cost.

    Raises:
        ValueError: If a label's class has no prototype.
    """
    same = _class_membership(labels, prototype_classes)
    gamma = F.mink_mean(distances, k)
    return F.mean(F.masked_min(gamma, same))


def separation_cost(
    distances: Tensor,
    labels: Sequence[int] | np.ndarray,
    prototype_classes: np.ndarray,
    k: int,
) -> Tensor:
    """
    Negated mean over images of the smallest wrong-class mink distance.

    Raises:
        ValueError: If no wrong-class prototype exists for some image.
    """
    same = _class_membership(labels, prototype_classes)
    if not np.all((~same).any(axis=1)):
        raise ValueError("separation cost needs at least one wrong-class prototype per image")
    gamma = F.mink_mean(distances, k)
    return F.neg(F.mean(F.masked_min(gamma, ~same)))


def fine_annotation_loss(
    similarities: Tensor,
    labels: Sequence[int] | np.ndarray,
    prototype_classes: np.ndarray,
    masks: Sequence[np.ndarray | None],
    normalize: bool = True,
) -> Tensor:
    """
    Penalize activation outside relevant pixels, and all wrong-class activation.

    For every image with a mask m (0 = relevant), each same-class prototype adds the
    Frobenius norm of m * PAM and each other-class prototype adds the norm of its
    whole PAM. PAMs are the raw similarity grids bilinearly upsampled to mask size.
    Per-image contributions are divided by the pixel count when `normalize` is set,
    then summed over images. Images whose mask is None contribute nothing.

    Raises:
        ShapeError: If masks differ in size or are not 2-D.
    """
    labels_arr = np.asarray(labels, dtype=np.int64)
    classes = np.asarray(prototype_classes, dtype=np.int64)
    if len(masks) != similarities.shape[0]:
        raise ShapeError(
            f"got {len(masks)} masks for a batch of {similarities.shape[0]} similarity stacks"
        )

    terms: list[Tensor] = []
    for i, mask in enumerate(masks):
        if mask is None:
            continue
        mask = np.asarray(mask, dtype=np.float64)
        if mask.ndim != 2:
            raise ShapeError(f"mask {i} must be 2-D, got shape {mask.shape}")
        height, width = mask.shape
        pam = F.bilinear_upsample(similarities[i], height, width)
        same = (classes == labels_arr[i])[:, None, None]
        weight = np.where(same, mask[None, :, :], 1.0)
        norms = F.frobenius_norm(pam * Tensor(weight))
        term = norms.sum()
        if normalize:
            term = term / float(height * width)
        terms.append(term)

    if not terms:
        return Tensor(np.zeros(()))
    return F.stack(terms).sum()


def total_objective(
    logits: Tensor,
    distances: Tensor,
    similarities: Tensor,
    labels: Sequence[int] | np.ndarray,
    masks: Sequence[np.ndarray | None],
    prototype_classes: np.ndarray,
    k: int = 5,
    lambda_c: float = DEFAULT_LAMBDA_C,
    lambda_s: float = DEFAULT_LAMBDA_S,
    lambda_f: float = DEFAULT_LAMBDA_F,
) -> LossBreakdown:
    """
    Weighted training loss: CE + lambda_c * Clst + lambda_s * Sep + lambda_f * Fine.

    With lambda_f = 0 the fine term is still evaluated for logging but kept off the
    graph.

    Example:
        ```python
        result = net.forward(batch.images)
        loss = total_objective(
            result.logits, result.distances, result.similarities,
            batch.labels, batch.masks, params.prototype_classes, k=5,
        )
        loss.total.backward()
        ```
    """
    ce = F.softmax_cross_entropy(logits, labels)
    clst = cluster_cost(distances, labels, prototype_classes, k)
    sep = separation_cost(distances, labels, prototype_classes, k)
    if lambda_f == 0:
        with no_grad():
            fine = fine_annotation_loss(similarities, labels, prototype_classes, masks)
        total = ce + lambda_c * clst + lambda_s * sep
    else:
        fine = fine_annotation_loss(similarities, labels, prototype_classes, masks)
        total = ce + lambda_c * clst + lambda_s * sep + lambda_f * fine
    return LossBreakdown(
        cross_entropy=ce,
        cluster=clst,
        separation=sep,
        fine=fine,
        total=total,
        lambda_c=lambda_c,
        lambda_s=lambda_s,
        lambda_f=lambda_f,
    )
