"""
Four-stage training protocol for protomargin.

Stage A1 trains the backbone and prototypes on the weighted objective with both
heads frozen, A2 projects every prototype onto its nearest same-class training
patch (optionally pruning duplicates), A3 tunes the margin head alone, and after
the A-cycles converge stage B fits the malignancy head as a logistic regression on
the unnormalized margin logits.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Any

import numpy as np

from protomargin import functional as F
from protomargin.checkpoint import save_checkpoint
from protomargin.losses import (
    DEFAULT_LAMBDA_C,
    DEFAULT_LAMBDA_F,
    DEFAULT_LAMBDA_S,
    LossBreakdown,
    total_objective,
)
from protomargin.optim import Adam, Optimizer
from protomargin.parallel import map_ordered
from protomargin.protonet import (
    ModelParams,
    ProtoNet,
    ProtoNetConfig,
    Provenance,
    class_connection_matrix,
    init_params,
)
from protomargin.seeding import stream_rng
from protomargin.synthgen import SynthSample, augment
from protomargin.tensor import Tensor, no_grad


logger = logging.getLogger("protomargin.trainer")

LOG_COLUMNS = ("step", "stage", "cross_entropy", "cluster", "separation", "fine", "total")


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss turns non-finite."""

    def __init__(self, message: str, last_checkpoint: Path | None = None) -> None:
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    """
    Configuration for the training protocol.

    Attributes:
        lambda_c: Cluster cost coefficient.
        lambda_s: Separation cost coefficient.
        lambda_f: Fine-annotation loss coefficient (0 gives the plain prototype
            network ablation).
        k: Top-k pooling count, also used for the mink distance in the costs.
        a1_epochs: A1 epochs per A-cycle.
        max_cycles: Maximum number of A1 -> A2 -> A3 cycles.
        tol: Stop cycling once the relative margin-loss improvement over a cycle
            falls below this.
        coarse_per_batch: Items per batch drawn from D (lesion masks).
        fine_per_batch: Items per batch drawn from D' (fine masks).
        lr_a1: Adam learning rate in stage A1.
        lr_a3: Adam learning rate in stage A3.
        lr_b: Adam learning rate in stage B.
        a3_epochs: Passes over the training set in stage A3.
        a3_batch_size: Minibatch size in stage A3.
        b_steps: Full-batch steps in stage B.
        prune_enabled: Remove provenance-duplicate prototypes after projection.
        augment: Apply random flip / rotation / crop to A1 batch items.
        crop_fraction: Crop side as a fraction of the image side.
        train_on_union: Train on the union of the train and val splits.
        channels: Backbone block channels.
        prototype_dim: Latent channels c.
        prototypes_per_class: Prototypes per class at initialization.
        epsilon: Similarity epsilon.
        image_size: Side of the training images.
        seed: Master seed.
        logger_name: Logger to report progress on.

    Example:
        ```python
        from protomargin.trainer import TrainConfig

        config = TrainConfig(lambda_f=0.0, k=1, a1_epochs=5, seed=3)
        ```
    """

    lambda_c: float = DEFAULT_LAMBDA_C
    lambda_s: float = DEFAULT_LAMBDA_S
    lambda_f: float = DEFAULT_LAMBDA_F
    k: int = 5
    a1_epochs: int = 20
    max_cycles: int = 3
    tol: float = 1e-3
    coarse_per_batch: int = 75
    fine_per_batch: int = 10
    lr_a1: float = 1e-3
    lr_a3: float = 1e-3
    lr_b: float = 1e-2
    a3_epochs: int = 10
    a3_batch_size: int = 64
    b_steps: int = 500
    prune_enabled: bool = True
    augment: bool = True
    crop_fraction: float = 0.8
    train_on_union: bool = False
    channels: tuple[int, ...] = (16, 32, 64)
    prototype_dim: int = 64
    prototypes_per_class: int = 5
    epsilon: float = 1e-4
    image_size: int = 112
    seed: int = 0
    logger_name: str = "protomargin.trainer"

    def __post_init__(self) -> None:
        self.channels = tuple(int(c) for c in self.channels)
        for name in ("lambda_c", "lambda_s", "lambda_f", "tol"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")
        for name in ("lr_a1", "lr_a3", "lr_b"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("max_cycles", "coarse_per_batch", "a3_batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1, got {getattr(self, name)}")
        for name in ("a1_epochs", "a3_epochs", "b_steps", "fine_per_batch"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.seed < 0:
            raise ValueError(f"seed must be nonnegative, got {self.seed}")
        # Architecture checks (k range, epsilon, channel layout) live in ProtoNetConfig.
        self.model_config()

    def model_config(self) -> ProtoNetConfig:
        return ProtoNetConfig(
            channels=self.channels,
            prototype_dim=self.prototype_dim,
            prototypes_per_class=self.prototypes_per_class,
            k=self.k,
            epsilon=self.epsilon,
            image_size=self.image_size,
        )

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["channels"] = list(self.channels)
        data.pop("logger_name")
        return data


# ============================================================================
# Data and batches
# ============================================================================


@dataclass
class TrainingData:
    """The coarse set D (every training sample) and the fine subset D'."""

    coarse: list[SynthSample]
    fine: list[SynthSample]

    @classmethod
    def from_samples(cls, samples: Sequence[SynthSample]) -> TrainingData:
        ordered = sorted(samples, key=lambda s: s.sample_id)
        return cls(coarse=ordered, fine=[s for s in ordered if s.fine_mask is not None])


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    malignant: np.ndarray
    masks: list[np.ndarray]
    fine_flags: np.ndarray
    sample_ids: list[str]

    def __len__(self) -> int:
        return len(self.sample_ids)


def batch_composition(config: TrainConfig, n_coarse: int, n_fine: int) -> tuple[int, int]:
    """
    Coarse and fine items per batch.

    When the training set is smaller than one full batch, both counts shrink in
    proportion; no fine items are drawn when D' is empty.
    """
    coarse, fine = config.coarse_per_batch, config.fine_per_batch if n_fine else 0
    full = coarse + fine
    if n_coarse < full:
        scale = n_coarse / full
        coarse = max(1, round(coarse * scale))
        fine = round(fine * scale)
    return coarse, fine


def build_batch(
    data: TrainingData,
    config: TrainConfig,
    rng: np.random.Generator,
    augment_rng: np.random.Generator | None = None,
) -> Batch:
    """
    Draw one batch: coarse items from D with lesion masks, fine items from D' with
    fine masks, in an order shuffled by `rng`.

    Fine items are drawn without replacement unless D' is smaller than the fine
    count. With `augment_rng`, every item receives its own random transform.

    Raises:
        ValueError: If D is empty.
    """
    if not data.coarse:
        raise ValueError("cannot build a batch from an empty training set")
    n_coarse, n_fine = batch_composition(config, len(data.coarse), len(data.fine))

    picks: list[tuple[SynthSample, bool]] = []
    coarse_idx = rng.choice(len(data.coarse), size=min(n_coarse, len(data.coarse)), replace=False)
    picks.extend((data.coarse[i], False) for i in coarse_idx)
    if n_fine:
        replace = n_fine > len(data.fine)
        fine_idx = rng.choice(len(data.fine), size=n_fine, replace=replace)
        picks.extend((data.fine[i], True) for i in fine_idx)
    order = rng.permutation(len(picks))

    images, labels, malignant, masks, flags, ids = [], [], [], [], [], []
    for i in order:
        sample, is_fine = picks[i]
        if augment_rng is not None:
            sample = augment(sample, int(augment_rng.integers(0, 2**62)), config.crop_fraction)
        mask = sample.fine_mask if is_fine else sample.lesion_mask
        images.append(sample.image)
        labels.append(sample.y_margin)
        malignant.append(sample.y_mal)
        masks.append(np.asarray(mask))
        flags.append(is_fine)
        ids.append(sample.sample_id)

    return Batch(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        malignant=np.asarray(malignant, dtype=np.int64),
        masks=masks,
        fine_flags=np.asarray(flags, dtype=bool),
        sample_ids=ids,
    )


# ============================================================================
# Loss log
# ============================================================================


class LossLog:
    """Per-step CSV loss log (in memory when no path is given)."""

    def __init__(self, path: str | Path | None = None) -> None:
        self.rows: list[dict[str, Any]] = []
        self.step = 0
        self._file: IO[str] | None = None
        self._writer: csv.DictWriter[str] | None = None
        if path is not None:
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            self._file = path.open("w", newline="", encoding="utf-8")
            self._writer = csv.DictWriter(self._file, fieldnames=LOG_COLUMNS)
            self._writer.writeheader()

    def record(self, stage: str, values: dict[str, float]) -> None:
        self.step += 1
        row: dict[str, Any] = {"step": self.step, "stage": stage}
        for key in LOG_COLUMNS[2:]:
            row[key] = f"{values[key]:.17g}" if key in values else ""
        self.rows.append(row)
        if self._writer is not None:
            self._writer.writerow(row)

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None

    def __enter__(self) -> LossLog:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


# ============================================================================
# Stage A1
# ============================================================================


def _objective(net: ProtoNet, batch: Batch, config: TrainConfig) -> LossBreakdown:
    result = net.forward(batch.images)
    return total_objective(
        result.logits,
        result.distances,
        result.similarities,
        batch.labels,
        batch.masks,
        net.params.prototype_classes,
        k=config.k,
        lambda_c=config.lambda_c,
        lambda_s=config.lambda_s,
        lambda_f=config.lambda_f,
    )


def a1_step(
    net: ProtoNet, batch: Batch, config: TrainConfig, optimizer: Optimizer
) -> LossBreakdown:
    """One gradient step on the weighted objective; prototypes clamped to [0, 1]."""
    params = net.params
    optimizer.zero_grad()
    try:
        loss = _objective(net, batch, config)
    except FloatingPointError as exc:
        raise TrainingDivergedError(f"non-finite values in stage A1: {exc}") from exc
    if not math.isfinite(loss.total.item()):
        raise TrainingDivergedError("non-finite loss in stage A1")
    loss.total.backward()
    optimizer.step()
    params.prototypes.data = np.clip(params.prototypes.data, 0.0, 1.0)
    return loss


def stage_a1_epoch(
    net: ProtoNet,
    data: TrainingData,
    config: TrainConfig,
    optimizer: Optimizer,
    rng: np.random.Generator,
    augment_rng: np.random.Generator | None = None,
    log: LossLog | None = None,
) -> dict[str, float]:
    """
    One A1 epoch: ceil(|D| / coarse_per_batch) steps with h1 and h2 frozen.

    Returns the mean of every loss term over the epoch.

    Raises:
        TrainingDivergedError: If the loss becomes non-finite.
    """
    net.params.set_trainable("backbone", "prototypes")
    n_coarse, _ = batch_composition(config, len(data.coarse), len(data.fine))
    steps = math.ceil(len(data.coarse) / n_coarse)
    totals: dict[str, float] = {}
    for _ in range(steps):
        batch = build_batch(data, config, rng, augment_rng)
        values = a1_step(net, batch, config, optimizer).values()
        if log is not None:
            log.record("A1", values)
        for key, value in values.items():
            totals[key] = totals.get(key, 0.0) + value
    return {key: value / steps for key, value in totals.items()}


# ============================================================================
# Stage A2: projection and pruning
# ============================================================================


@dataclass
class ProjectionResult:
    distances: list[float]
    provenance: list[Provenance]


def project_prototypes(
    net: ProtoNet, samples: Sequence[SynthSample], threads: int | None = None
) -> ProjectionResult:
    """
    Replace every prototype by its nearest same-class training patch.

    Latents are computed per image from the original images. Ties go to the lowest
    sample id, then the first cell in row-major order. Afterwards every prototype
    equals a training latent patch bit for bit.
    """
    params = net.params
    ordered = sorted(samples, key=lambda s: s.sample_id)
    latents = map_ordered(lambda s: net.latent_of(s.image), ordered, threads)

    c = params.prototypes.shape[1]
    best_dist = np.full(params.num_prototypes, np.inf)
    best: list[tuple[int, int] | None] = [None] * params.num_prototypes
    protos = params.prototypes.data
    for idx, (sample, latent) in enumerate(zip(ordered, latents, strict=True)):
        members = np.flatnonzero(params.prototype_classes == sample.y_margin)
        if not members.size:
            continue
        patches = latent.reshape(c, -1).T
        diff = patches[None, :, :] - protos[members][:, None, :]
        dist = np.einsum("mlc,mlc->ml", diff, diff)
        cell = np.argmin(dist, axis=1)
        for j, l, d in zip(members, cell, dist[np.arange(len(members)), cell], strict=True):
            if d < best_dist[j]:
                best_dist[j] = d
                best[j] = (idx, int(l))

    grid = latents[0].shape[2] if latents else 0
    new_protos = protos.copy()
    provenance: list[Provenance] = []
    for j, choice in enumerate(best):
        if choice is None:
            raise ValueError(f"no training image of class {params.prototype_classes[j]}")
        idx, l = choice
        row, col = divmod(l, grid)
        new_protos[j] = latents[idx][:, row, col]
        provenance.append(Provenance(ordered[idx].sample_id, row, col))

    params.prototypes.data = new_protos
    params.provenance = list(provenance)
    logger.info(
        "projected prototypes",
        extra={"prototypes": params.num_prototypes, "mean_distance": float(best_dist.mean())},
    )
    return ProjectionResult(distances=best_dist.tolist(), provenance=provenance)


def prune_duplicates(params: ModelParams) -> list[int]:
    """
    Drop same-class prototypes whose provenance repeats an earlier one.

    The first prototype of each (class, provenance) group survives, so every class
    keeps at least one. W1 columns of removed prototypes are deleted. Returns the
    ids of the removed prototypes.
    """
    seen: set[tuple[int, Provenance]] = set()
    keep: list[int] = []
    for j, (cls, prov) in enumerate(zip(params.prototype_classes, params.provenance, strict=True)):
        key = (int(cls), prov)
        if prov is not None and key in seen:
            continue
        if prov is not None:
            seen.add(key)
        keep.append(j)

    removed = [params.prototype_ids[j] for j in range(params.num_prototypes) if j not in keep]
    if removed:
        params.prototypes = Tensor(params.prototypes.data[keep], requires_grad=True)
        params.last_layer = Tensor(params.last_layer.data[:, keep], requires_grad=True)
        params.prototype_classes = params.prototype_classes[keep]
        params.prototype_ids = [params.prototype_ids[j] for j in keep]
        params.provenance = [params.provenance[j] for j in keep]
        logger.info(
            "pruned duplicate prototypes",
            extra={"removed": removed, "class_counts": params.class_counts()},
        )
    return removed


# ============================================================================
# Stage A3
# ============================================================================


def pooled_scores(net: ProtoNet, samples: Sequence[SynthSample], chunk: int = 64) -> np.ndarray:
    """[N, m] top-k pooled similarities of unaugmented images."""
    rows = []
    for start in range(0, len(samples), chunk):
        images = np.stack([s.image for s in samples[start : start + chunk]])
        rows.append(net.predict(images).scores.data)
    return np.concatenate(rows, axis=0)


@dataclass
class A3Result:
    loss_before: float
    loss_after: float
    initialized: bool


def _margin_ce(scores: np.ndarray, weights: np.ndarray, labels: np.ndarray) -> float:
    with no_grad():
        return F.softmax_cross_entropy(F.linear(Tensor(scores), Tensor(weights)), labels).item()


def stage_a3(
    net: ProtoNet,
    samples: Sequence[SynthSample],
    config: TrainConfig,
    rng: np.random.Generator,
    log: LossLog | None = None,
) -> A3Result:
    """
    Tune W1 alone on the margin cross-entropy of the training images.

    On the first entry W1 is set to +1 for own-class and -1 for other-class
    connections. The weights with the lowest full-data cross-entropy seen (the
    starting point included) are kept.
    """
    params = net.params
    initialized = False
    if not params.last_layer_initialized:
        params.last_layer.data = class_connection_matrix(
            params.prototype_classes, params.config.num_classes
        )
        params.last_layer_initialized = True
        initialized = True
    params.set_trainable("last_layer")

    scores = pooled_scores(net, samples)
    labels = np.asarray([s.y_margin for s in samples], dtype=np.int64)
    before = _margin_ce(scores, params.last_layer.data, labels)
    best_loss, best_weights = before, params.last_layer.data.copy()

    optimizer = Adam([params.last_layer], lr=config.lr_a3)
    for _ in range(config.a3_epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(order), config.a3_batch_size):
            idx = order[start : start + config.a3_batch_size]
            optimizer.zero_grad()
            loss = F.softmax_cross_entropy(
                F.linear(Tensor(scores[idx]), params.last_layer), labels[idx]
            )
            loss.backward()
            optimizer.step()
            if log is not None:
                log.record("A3", {"cross_entropy": loss.item(), "total": loss.item()})
        epoch_loss = _margin_ce(scores, params.last_layer.data, labels)
        if epoch_loss < best_loss:
            best_loss, best_weights = epoch_loss, params.last_layer.data.copy()

    params.last_layer.data = best_weights
    params.last_layer.zero_grad()
    logger.info("stage A3 finished", extra={"loss_before": before, "loss_after": best_loss})
    return A3Result(loss_before=before, loss_after=best_loss, initialized=initialized)


# ============================================================================
# Stage B
# ============================================================================


@dataclass
class StageBResult:
    weights: np.ndarray
    intercept: float
    log_loss: float


def fit_logistic(
    features: np.ndarray,
    targets: np.ndarray,
    lr: float = 1e-2,
    steps: int = 500,
    log: LossLog | None = None,
) -> StageBResult:
    """
    Affine logistic regression by full-batch Adam on the mean log-loss.

    Features are standardized for the fit and the coefficients mapped back;
    zero-variance features keep a zero weight. Parameters start at zero.

    Raises:
        ValueError: If all targets are equal.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if y.min() == y.max():
        raise ValueError("stage B needs both malignant and benign training samples")

    mean = x.mean(axis=0)
    std = x.std(axis=0)
    active = std > 1e-12
    z = np.zeros_like(x)
    z[:, active] = (x[:, active] - mean[active]) / std[active]

    w = Tensor(np.zeros((x.shape[1], 1)), requires_grad=True)
    b = Tensor(np.zeros(()), requires_grad=True)
    optimizer = Adam([w, b], lr=lr)
    inputs = Tensor(z)
    for _ in range(steps):
        optimizer.zero_grad()
        logits = F.reshape(inputs @ w, (len(y),)) + b
        loss = F.binary_cross_entropy_with_logits(logits, y)
        loss.backward()
        w.grad = np.where(active[:, None], w.grad, 0.0) if w.grad is not None else None
        optimizer.step()
        if log is not None:
            log.record("B", {"cross_entropy": loss.item(), "total": loss.item()})

    w_std = w.data[:, 0]
    weights = np.zeros(x.shape[1])
    weights[active] = w_std[active] / std[active]
    intercept = float(b.data) - float(np.sum(w_std[active] * mean[active] / std[active]))
    with no_grad():
        final = F.binary_cross_entropy_with_logits(Tensor(x @ weights + intercept), y).item()
    return StageBResult(weights=weights, intercept=intercept, log_loss=final)


def stage_b(
    net: ProtoNet,
    samples: Sequence[SynthSample],
    config: TrainConfig,
    log: LossLog | None = None,
) -> StageBResult:
    """
    Fit h2 on (margin logits, malignancy labels) of the unaugmented training images.

    Only the malignancy weights and intercept change.
    """
    params = net.params
    params.set_trainable()
    logits = pooled_scores(net, samples) @ params.last_layer.data.T
    targets = np.asarray([s.y_mal for s in samples], dtype=np.float64)
    result = fit_logistic(logits, targets, lr=config.lr_b, steps=config.b_steps, log=log)
    params.malignancy_weights.data = result.weights.copy()
    params.malignancy_intercept.data = np.asarray(result.intercept)
    params.malignancy_scale = 1.0
    logger.info(
        "stage B finished",
        extra={
            "weights": result.weights.tolist(),
            "intercept": result.intercept,
            "log_loss": result.log_loss,
        },
    )
    return result


# ============================================================================
# Orchestration
# ============================================================================


@dataclass
class CycleSummary:
    cycle: int
    a1: dict[str, float]
    projection_mean_distance: float
    pruned: list[int]
    a3: A3Result
    margin_loss: float


@dataclass
class TrainResult:
    params: ModelParams
    cycles: list[CycleSummary] = field(default_factory=list)
    stage_b: StageBResult | None = None
    checkpoints: list[Path] = field(default_factory=list)
    log_rows: int = 0


class Trainer:
    """
    Runs A-cycles until the margin loss stops improving, then stage B once.

    With an output directory, writes a checkpoint after every stage, the per-step
    loss log `train_log.csv`, the final checkpoint `final.ckpt` and
    `run_manifest.json`.

    Example:
        ```python
        from protomargin.trainer import Trainer, TrainConfig

        result = Trainer(TrainConfig(seed=1)).run(train_samples, out_dir="runs/a")
        ```
    """

    def __init__(self, config: TrainConfig) -> None:
        self.config = config
        self._logger = logging.getLogger(config.logger_name)
        self._last_checkpoint: Path | None = None

    def _checkpoint(
        self, params: ModelParams, out_dir: Path | None, name: str, result: TrainResult
    ) -> None:
        if out_dir is None:
            return
        path = save_checkpoint(params, out_dir / f"{name}.ckpt", metadata={"stage": name})
        self._last_checkpoint = path
        result.checkpoints.append(path)

    def run(
        self,
        samples: Sequence[SynthSample],
        out_dir: str | Path | None = None,
        dataset_hash: str | None = None,
        params: ModelParams | None = None,
    ) -> TrainResult:
        config = self.config
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)

        data = TrainingData.from_samples(samples)
        params = params or init_params(config.model_config(), config.seed)
        net = ProtoNet(params)
        batch_rng = stream_rng(config.seed, "batching")
        augment_rng = stream_rng(config.seed, "augment") if config.augment else None
        result = TrainResult(params=params)

        self._logger.info(
            "training started",
            extra={
                "samples": len(data.coarse),
                "fine_annotated": len(data.fine),
                "lambda_f": config.lambda_f,
                "k": config.k,
            },
        )
        log = LossLog(out / "train_log.csv" if out is not None else None)
        try:
            previous: float | None = None
            for cycle in range(config.max_cycles):
                trainable = params.group("backbone") + params.group("prototypes")
                optimizer = Adam(trainable, config.lr_a1)
                a1: dict[str, float] = {}
                for epoch in range(config.a1_epochs):
                    try:
                        a1 = stage_a1_epoch(
                            net, data, config, optimizer, batch_rng, augment_rng, log
                        )
                    except TrainingDivergedError as exc:
                        exc.last_checkpoint = self._last_checkpoint
                        raise
                    self._logger.info(
                        "A1 epoch", extra={"cycle": cycle, "epoch": epoch, **a1}
                    )
                self._checkpoint(params, out, f"cycle{cycle}_a1", result)

                projection = project_prototypes(net, data.coarse)
                pruned = prune_duplicates(params) if config.prune_enabled else []
                self._checkpoint(params, out, f"cycle{cycle}_a2", result)

                a3 = stage_a3(net, data.coarse, config, batch_rng, log)
                self._checkpoint(params, out, f"cycle{cycle}_a3", result)

                result.cycles.append(
                    CycleSummary(
                        cycle=cycle,
                        a1=a1,
                        projection_mean_distance=float(np.mean(projection.distances)),
                        pruned=pruned,
                        a3=a3,
                        margin_loss=a3.loss_after,
                    )
                )
                if previous is not None:
                    improvement = (previous - a3.loss_after) / max(abs(previous), 1e-12)
                    if improvement < config.tol:
                        self._logger.info(
                            "A-cycles converged", extra={"cycle": cycle, "improvement": improvement}
                        )
                        break
                previous = a3.loss_after

            result.stage_b = stage_b(net, data.coarse, config, log)
            params.set_trainable()
            if out is not None:
                final = save_checkpoint(params, out / "final.ckpt", metadata={"stage": "final"})
                result.checkpoints.append(final)
                self._write_manifest(out, result, dataset_hash)
        finally:
            log.close()
        result.log_rows = len(log.rows)
        return result

    def _write_manifest(self, out: Path, result: TrainResult, dataset_hash: str | None) -> None:
        params = result.params
        manifest = {
            "train_config": self.config.to_dict(),
            "dataset_manifest_sha256": dataset_hash,
            "cycles": [
                {
                    "cycle": c.cycle,
                    "a1": c.a1,
                    "projection_mean_distance": c.projection_mean_distance,
                    "pruned": c.pruned,
                    "a3_loss_before": c.a3.loss_before,
                    "a3_loss_after": c.a3.loss_after,
                }
                for c in result.cycles
            ],
            "stage_b": {
                "weights": result.stage_b.weights.tolist() if result.stage_b else None,
                "intercept": result.stage_b.intercept if result.stage_b else None,
                "log_loss": result.stage_b.log_loss if result.stage_b else None,
            },
            "prototype_class_counts": params.class_counts(),
            "checkpoints": [p.name for p in result.checkpoints],
        }
        (out / "run_manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
