"""
Model evaluation for protomargin.

Runs a checkpointed network over a split, turns every sample into an EvalRecord
and summarizes the records into the JSON report (margin and malignancy AUROC,
Cohen's kappa, activation precision at lesion and fine scale, bootstrap intervals)
and a per-sample CSV.
"""

from __future__ import annotations

import csv
import json
import logging
import zlib
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np

from protomargin.metrics import (
    DEFAULT_LEVEL,
    DEFAULT_RESAMPLES,
    DEFAULT_TAU,
    EvalRecord,
    MetricUndefinedError,
    activation_precision,
    auroc,
    bootstrap_ci,
    cohens_kappa,
    confusion_matrix,
    one_vs_all_auroc,
    paired_bootstrap_difference,
    roc_curve,
)
from protomargin.protonet import ProtoNet, compute_pam, prototypes_by_class
from protomargin.seeding import derive_seed
from protomargin.synthgen import MarginClass, SynthSample


logger = logging.getLogger("protomargin.evaluation")

RECORD_COLUMNS = (
    "sample_id",
    "true_class",
    "predicted_class",
    "p_circumscribed",
    "p_indistinct",
    "p_spiculated",
    "malignancy_probability",
    "true_malignancy",
    "ap_lesion",
    "ap_fine",
)


@dataclass
class EvalConfig:
    """
    Configuration for evaluation.

    Attributes:
        tau: Activation-precision threshold; the top (1 - tau) of PAM pixels count.
        n_resamples: Bootstrap resamples per interval.
        level: Confidence level of the bootstrap intervals.
        seed: Master seed; intervals use the "bootstrap" stream.
        chunk: Images per forward pass.
        logger_name: Logger used for progress messages.

    Example:
        ```python
        from protomargin.evaluation import EvalConfig, evaluate

        report = evaluate(net, test_samples, EvalConfig(n_resamples=1000)).report
        ```
    """

    tau: float = DEFAULT_TAU
    n_resamples: int = DEFAULT_RESAMPLES
    level: float = DEFAULT_LEVEL
    seed: int = 0
    chunk: int = 32
    logger_name: str = "protomargin.evaluation"

    def __post_init__(self) -> None:
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.n_resamples < 100:
            raise ValueError(f"n_resamples must be at least 100, got {self.n_resamples}")
        if not 0.0 < self.level < 1.0:
            raise ValueError(f"level must lie in (0, 1), got {self.level}")
        if self.chunk < 1:
            raise ValueError(f"chunk must be positive, got {self.chunk}")


@dataclass
class EvalResult:
    records: list[EvalRecord]
    report: dict[str, Any]


# ============================================================================
# Records
# ============================================================================


def build_records(
    net: ProtoNet, samples: Sequence[SynthSample], chunk: int = 32
) -> list[EvalRecord]:
    """
    Forward every sample and keep the PAMs of its true class's prototypes.

    Raises:
        ValueError: If the sample list is empty.
    """
    if not samples:
        raise ValueError("evaluation needs at least one sample")
    grouped = prototypes_by_class(net.params)
    size = net.config.image_size
    records: list[EvalRecord] = []
    for start in range(0, len(samples), chunk):
        part = samples[start : start + chunk]
        result = net.predict(np.stack([s.image for s in part]))
        for i, sample in enumerate(part):
            sims = result.similarities.data[i]
            pams = {
                j: compute_pam(sims, j, size, sample.sample_id).values
                for j in grouped[sample.y_margin]
            }
            probs = result.probabilities[i]
            records.append(
                EvalRecord(
                    sample_id=sample.sample_id,
                    margin_probabilities=probs,
                    margin_logits=result.logits.data[i].copy(),
                    predicted_class=int(np.argmax(probs)),
                    true_class=int(sample.y_margin),
                    malignancy_probability=float(result.malignancy[i]),
                    true_malignancy=int(sample.y_mal),
                    pams=pams,
                    lesion_mask=sample.lesion_mask,
                    fine_mask=sample.fine_mask,
                )
            )
    return records


def _precision_or_none(record: EvalRecord, scale: str, tau: float) -> float | None:
    mask = record.lesion_mask if scale == "lesion" else record.fine_mask
    if mask is None or not record.pams:
        return None
    return activation_precision(record, scale, tau)  # type: ignore[arg-type]


# ============================================================================
# Summary
# ============================================================================


def _average_auroc(records: list[EvalRecord]) -> float:
    probs = np.stack([r.margin_probabilities for r in records])
    return one_vs_all_auroc(probs, [r.true_class for r in records])[1]


def _class_auroc(c: int) -> Callable[[list[EvalRecord]], float]:
    """One-vs-all AUROC of class `c` as a bootstrap-ready metric."""

    def metric(records: list[EvalRecord]) -> float:
        return auroc(
            [r.margin_probabilities[c] for r in records],
            [int(r.true_class == c) for r in records],
        )

    return metric


def _malignancy_auroc(records: list[EvalRecord]) -> float:
    return auroc(
        [r.malignancy_probability for r in records], [r.true_malignancy for r in records]
    )


def _kappa(records: list[EvalRecord]) -> float:
    return cohens_kappa(
        [r.predicted_class for r in records],
        [r.true_class for r in records],
        len(MarginClass),
    )


def _mean(values: list[float]) -> float:
    return float(np.mean(values))


def _estimate(
    name: str,
    metric: Callable[[list[Any]], float],
    items: list[Any],
    config: EvalConfig,
) -> dict[str, Any]:
    try:
        value = metric(items)
    except MetricUndefinedError as exc:
        logger.warning("metric undefined", extra={"metric": name, "reason": str(exc)})
        return {"value": None, "ci": None}
    seed = derive_seed(config.seed, "bootstrap", zlib.crc32(name.encode("utf-8")))
    lo, hi = bootstrap_ci(metric, items, config.n_resamples, config.level, seed)
    return {"value": value, "ci": [lo, hi]}


def summarize(records: Sequence[EvalRecord], config: EvalConfig | None = None) -> dict[str, Any]:
    """Build the evaluation report dictionary from per-sample records."""
    config = config or EvalConfig()
    records = list(records)
    labels = [c.label for c in MarginClass]
    probs = np.stack([r.margin_probabilities for r in records])
    truth = np.asarray([r.true_class for r in records])

    per_class: dict[str, dict[str, Any]] = {}
    roc: dict[str, dict[str, list[float]]] = {}
    for c, label in enumerate(labels):
        per_class[label] = _estimate(f"margin_auroc_{label}", _class_auroc(c), records, config)
        if per_class[label]["value"] is not None:
            curve = roc_curve(probs[:, c], (truth == c).astype(int))
            roc[label] = {"fpr": curve.fpr.tolist(), "tpr": curve.tpr.tolist()}

    precision: dict[str, Any] = {}
    for scale in ("lesion", "fine"):
        values = [_precision_or_none(r, scale, config.tau) for r in records]
        kept = [(r, v) for r, v in zip(records, values, strict=True) if v is not None]
        by_class = {
            label: _mean([v for r, v in kept if r.true_class == c])
            if any(r.true_class == c for r, _ in kept)
            else None
            for c, label in enumerate(labels)
        }
        if kept:
            entry = _estimate(f"ap_{scale}", _mean, [v for _, v in kept], config)
        else:
            entry = {"value": None, "ci": None}
        precision[scale] = {**entry, "per_class": by_class, "samples": len(kept)}

    report = {
        "num_samples": len(records),
        "class_counts": {label: int(np.sum(truth == c)) for c, label in enumerate(labels)},
        "margin_auroc": {
            "per_class": per_class,
            "average": _estimate("margin_auroc", _average_auroc, records, config),
            "roc": roc,
        },
        "malignancy_auroc": _estimate("malignancy_auroc", _malignancy_auroc, records, config),
        "kappa": _estimate("kappa", _kappa, records, config),
        "confusion_matrix": confusion_matrix(
            [r.predicted_class for r in records], truth, len(labels)
        ).tolist(),
        "activation_precision": precision,
        "eval_config": {k: v for k, v in asdict(config).items() if k != "logger_name"},
    }
    return report


def evaluate(
    net: ProtoNet, samples: Sequence[SynthSample], config: EvalConfig | None = None
) -> EvalResult:
    """
    Evaluate a network on samples.

    Example:
        ```python
        from protomargin.checkpoint import load_checkpoint
        from protomargin.dataset import read_dataset
        from protomargin.evaluation import evaluate, write_report
        from protomargin.protonet import ProtoNet

        net = ProtoNet(load_checkpoint("runs/a/final.ckpt").params)
        result = evaluate(net, read_dataset("data/manifest.json", "test"))
        write_report(result, "runs/a/eval")
        ```
    """
    config = config or EvalConfig()
    log = logging.getLogger(config.logger_name)
    records = build_records(net, samples, config.chunk)
    report = summarize(records, config)
    log.info(
        "evaluation finished",
        extra={
            "samples": len(records),
            "margin_auroc": report["margin_auroc"]["average"]["value"],
            "ap_fine": report["activation_precision"]["fine"]["value"],
        },
    )
    return EvalResult(records=records, report=report)


# ============================================================================
# Two-model comparison
# ============================================================================


def compare_records(
    records_a: Sequence[EvalRecord],
    records_b: Sequence[EvalRecord],
    config: EvalConfig | None = None,
) -> dict[str, Any]:
    """
    Paired bootstrap differences (b - a) of average margin AUROC and activation
    precision at both scales.

    Raises:
        ValueError: If the two record lists are not over the same samples.
    """
    config = config or EvalConfig()
    ids_a = [r.sample_id for r in records_a]
    if ids_a != [r.sample_id for r in records_b]:
        raise ValueError("compared evaluations must cover the same samples in the same order")

    def precision_metric(scale: str) -> Callable[[list[EvalRecord]], float]:
        def metric(rs: list[EvalRecord]) -> float:
            computed = (_precision_or_none(r, scale, config.tau) for r in rs)
            values = [v for v in computed if v is not None]
            if not values:
                raise MetricUndefinedError(f"no {scale} masks in resample")
            return _mean(values)

        return metric

    metrics: dict[str, Callable[[list[EvalRecord]], float]] = {
        "margin_auroc": _average_auroc,
        "ap_lesion": precision_metric("lesion"),
        "ap_fine": precision_metric("fine"),
    }
    out: dict[str, Any] = {}
    for name, metric in metrics.items():
        seed = derive_seed(config.seed, "bootstrap", zlib.crc32(name.encode("utf-8")))
        try:
            diff = paired_bootstrap_difference(
                metric, list(records_a), list(records_b), config.n_resamples, config.level, seed
            )
        except MetricUndefinedError as exc:
            logger.warning("comparison undefined", extra={"metric": name, "reason": str(exc)})
            out[name] = None
            continue
        out[name] = {
            "a": metric(list(records_a)),
            "b": metric(list(records_b)),
            **asdict(diff),
        }
    return out


# ============================================================================
# Output files
# ============================================================================


def _fmt(value: float | None) -> str:
    return "" if value is None else format(value, ".17g")


def write_records_csv(
    records: Sequence[EvalRecord], path: str | Path, tau: float = DEFAULT_TAU
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=RECORD_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in records:
            p = r.margin_probabilities
            writer.writerow(
                {
                    "sample_id": r.sample_id,
                    "true_class": MarginClass(r.true_class).label,
                    "predicted_class": MarginClass(r.predicted_class).label,
                    "p_circumscribed": _fmt(float(p[0])),
                    "p_indistinct": _fmt(float(p[1])),
                    "p_spiculated": _fmt(float(p[2])),
                    "malignancy_probability": _fmt(r.malignancy_probability),
                    "true_malignancy": r.true_malignancy,
                    "ap_lesion": _fmt(_precision_or_none(r, "lesion", tau)),
                    "ap_fine": _fmt(_precision_or_none(r, "fine", tau)),
                }
            )
    return path


def write_json(data: dict[str, Any], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_report(
    result: EvalResult, out_dir: str | Path, tau: float = DEFAULT_TAU
) -> tuple[Path, Path]:
    """Write `eval_report.json` and `eval_records.csv` into out_dir."""
    out = Path(out_dir)
    return (
        write_json(result.report, out / "eval_report.json"),
        write_records_csv(result.records, out / "eval_records.csv", tau),
    )
