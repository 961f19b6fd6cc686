"""
Tests for network evaluation and report writing.
"""

import csv
import dataclasses
import json

import numpy as np
import pytest

from protomargin.evaluation import (
    RECORD_COLUMNS,
    EvalConfig,
    build_records,
    compare_records,
    evaluate,
    summarize,
    write_report,
)
from protomargin.metrics import EvalRecord, one_vs_all_auroc
from protomargin.protonet import prototypes_by_class


FAST = EvalConfig(n_resamples=100)


@pytest.fixture
def records(toy_net, toy_corpus):
    """Evaluation records of the untrained toy network on the toy corpus."""
    return build_records(toy_net, toy_corpus, chunk=5)


def synthetic_records() -> list[EvalRecord]:
    """Nine records with confident, correct margin and malignancy predictions."""
    out = []
    for i in range(9):
        cls = i % 3
        probs = np.full(3, 0.1)
        probs[cls] = 0.8
        out.append(
            EvalRecord(
                sample_id=f"r{i}",
                margin_probabilities=probs,
                margin_logits=np.log(probs),
                predicted_class=cls,
                true_class=cls,
                malignancy_probability=0.9 if i % 2 else 0.1,
                true_malignancy=i % 2,
            )
        )
    return out


class TestEvalConfig:
    """Tests for EvalConfig."""

    @pytest.mark.parametrize(
        "kwargs", [{"tau": 1.0}, {"n_resamples": 10}, {"level": 0.0}, {"chunk": 0}]
    )
    def test_invalid(self, kwargs):
        """Test that out-of-range settings are rejected."""
        with pytest.raises(ValueError):
            EvalConfig(**kwargs)


class TestBuildRecords:
    """Tests for build_records."""

    def test_one_record_per_sample(self, records, toy_corpus):
        """Test ids, probabilities and labels of every record."""
        assert [r.sample_id for r in records] == [s.sample_id for s in toy_corpus]
        for r, sample in zip(records, toy_corpus):
            assert r.margin_probabilities.sum() == pytest.approx(1.0)
            assert r.predicted_class == int(np.argmax(r.margin_probabilities))
            assert r.true_class == sample.y_margin
            assert 0.0 <= r.malignancy_probability <= 1.0

    def test_same_class_pams_at_image_size(self, records, toy_net):
        """Test that PAMs cover exactly the true class's prototypes."""
        grouped = prototypes_by_class(toy_net.params)

        for r in records:
            assert sorted(r.pams) == grouped[r.true_class]
            assert all(pam.shape == (48, 48) for pam in r.pams.values())

    def test_chunking_does_not_matter(self, toy_net, toy_corpus, records):
        """Test that the batch size leaves the outputs unchanged."""
        whole = build_records(toy_net, toy_corpus, chunk=64)

        for a, b in zip(records, whole):
            np.testing.assert_allclose(a.margin_logits, b.margin_logits, rtol=1e-12)

    def test_empty(self, toy_net):
        """Test that evaluating nothing is rejected."""
        with pytest.raises(ValueError):
            build_records(toy_net, [])


class TestSummarize:
    """Tests for summarize."""

    def test_report_layout(self, records):
        """Test the report sections and their value ranges."""
        report = summarize(records, FAST)

        assert report["num_samples"] == 12
        assert report["class_counts"] == {"circumscribed": 4, "indistinct": 4, "spiculated": 4}
        assert 0.0 <= report["margin_auroc"]["average"]["value"] <= 1.0
        assert set(report["margin_auroc"]["per_class"]) == {
            "circumscribed",
            "indistinct",
            "spiculated",
        }
        assert np.sum(report["confusion_matrix"]) == 12
        for scale in ("lesion", "fine"):
            entry = report["activation_precision"][scale]
            assert entry["samples"] == 12
            assert 0.0 <= entry["value"] <= 1.0
        assert report["eval_config"]["n_resamples"] == 100

    def test_per_class_auroc_has_intervals(self, records):
        """Test that each class AUROC carries an ordered bootstrap interval."""
        report = summarize(records, FAST)

        for label, entry in report["margin_auroc"]["per_class"].items():
            lo, hi = entry["ci"]
            assert 0.0 <= lo <= hi <= 1.0, label
            assert 0.0 <= entry["value"] <= 1.0

    def test_per_class_interval_brackets_value(self):
        """Test that a perfectly separated class has value and interval at 1."""
        report = summarize(synthetic_records(), FAST)

        for entry in report["margin_auroc"]["per_class"].values():
            lo, hi = entry["ci"]
            assert lo <= entry["value"] <= hi
            assert entry["value"] == 1.0

    def test_per_class_auroc_matches_one_vs_all(self, records):
        """Test that per-class values agree with one_vs_all_auroc."""
        report = summarize(records, FAST)
        probs = np.stack([r.margin_probabilities for r in records])
        expected, _ = one_vs_all_auroc(probs, [r.true_class for r in records])

        values = [e["value"] for e in report["margin_auroc"]["per_class"].values()]
        assert values == pytest.approx(expected)

    def test_perfect_predictions(self):
        """Test AUROC 1 and kappa 1 on perfectly predicted records."""
        report = summarize(synthetic_records(), FAST)

        assert report["margin_auroc"]["average"]["value"] == 1.0
        assert report["malignancy_auroc"]["value"] == 1.0
        assert report["kappa"]["value"] == pytest.approx(1.0)
        assert report["activation_precision"]["fine"]["value"] is None

    def test_undefined_metric_reported_as_none(self):
        """Test that single-outcome malignancy gives a null AUROC."""
        recs = [dataclasses.replace(r, true_malignancy=0) for r in synthetic_records()]

        report = summarize(recs, FAST)

        assert report["malignancy_auroc"] == {"value": None, "ci": None}

    def test_deterministic(self, records):
        """Test that repeated summaries agree exactly."""
        assert summarize(records, FAST) == summarize(records, FAST)


class TestOutputs:
    """Tests for evaluate and write_report."""

    def test_write_report(self, tmp_path, toy_net, toy_corpus):
        """Test the JSON report and the per-sample CSV."""
        result = evaluate(toy_net, toy_corpus, FAST)

        report_path, csv_path = write_report(result, tmp_path / "eval")

        assert json.loads(report_path.read_text())["num_samples"] == 12
        with csv_path.open() as f:
            rows = list(csv.DictReader(f))
        assert tuple(rows[0]) == RECORD_COLUMNS
        assert len(rows) == 12
        assert rows[0]["true_class"] in ("circumscribed", "indistinct", "spiculated")
        assert float(rows[0]["ap_fine"]) >= 0.0


class TestCompareRecords:
    """Tests for compare_records."""

    def test_self_comparison(self, records):
        """Test that a model compared with itself differs by zero."""
        comparison = compare_records(records, records, FAST)

        for name in ("margin_auroc", "ap_lesion", "ap_fine"):
            assert comparison[name]["observed"] == 0.0
            assert comparison[name]["a"] == comparison[name]["b"]

    def test_missing_masks_give_none(self):
        """Test that precision comparisons without masks are null."""
        recs = synthetic_records()

        comparison = compare_records(recs, recs, FAST)

        assert comparison["ap_fine"] is None
        assert comparison["margin_auroc"]["observed"] == 0.0

    def test_different_samples_rejected(self, records):
        """Test that both evaluations must cover the same samples."""
        with pytest.raises(ValueError, match="same samples"):
            compare_records(records, list(reversed(records)), FAST)
