"""
Integration tests for full-size training runs on the confounded synthetic corpus.

These train the default architecture on 600 images several times and take a
while; they are excluded from quick runs with ``-m "not slow"``.
"""

import numpy as np
import pytest

from protomargin.dataset import read_dataset, write_dataset
from protomargin.evaluation import EvalConfig, evaluate
from protomargin.protonet import ProtoNet
from protomargin.synthgen import MarginClass, SynthConfig, generate_corpus
from protomargin.trainer import TrainConfig, Trainer


pytestmark = [pytest.mark.slow, pytest.mark.integration]

SPLIT_COUNTS = (600, 100, 125)
TRAIN_SEEDS = (0, 1, 2)
FINE_LAMBDA = 0.001
EVAL = EvalConfig(n_resamples=1000)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    """Write the default 825-sample corpus with confounder strength 0.9."""
    samples = generate_corpus(SynthConfig(confounder_strength=0.9), 0)
    manifest = write_dataset(
        samples, tmp_path_factory.mktemp("corpus"), counts=SPLIT_COUNTS, fine_annotated=30
    )
    return {
        "train": read_dataset(manifest.path, "train"),
        "test": read_dataset(manifest.path, "test"),
    }


@pytest.fixture(scope="module")
def runs(corpus):
    """Train (and evaluate on test) once per (seed, lambda_f), on demand."""
    cache = {}

    def get(seed: int, lambda_f: float):
        key = (seed, lambda_f)
        if key not in cache:
            result = Trainer(TrainConfig(seed=seed, lambda_f=lambda_f)).run(corpus["train"])
            report = evaluate(ProtoNet(result.params), corpus["test"], EVAL).report
            cache[key] = (result, report)
        return cache[key]

    return get


class TestEndToEnd:
    """Test a default run on the confounded corpus."""

    def test_margin_and_malignancy_auroc(self, runs):
        """Test that average margin AUROC reaches 0.90 and malignancy AUROC 0.75."""
        _, report = runs(0, FINE_LAMBDA)

        assert report["num_samples"] == SPLIT_COUNTS[2]
        assert report["margin_auroc"]["average"]["value"] >= 0.90
        assert report["malignancy_auroc"]["value"] >= 0.75

    def test_malignancy_weight_signs(self, runs):
        """Test that stage B learns negative, negative, positive class weights."""
        result, _ = runs(0, FINE_LAMBDA)
        weights = result.params.malignancy_weights.data

        assert result.stage_b is not None
        assert weights.shape == (len(MarginClass),)
        assert np.sign(weights).tolist() == [-1.0, -1.0, 1.0]


class TestFineAnnotationAblation:
    """Test what the fine-annotation loss buys on the confounded test set."""

    def test_fine_loss_moves_attention_to_the_margin(self, runs):
        """Test the fine-precision gain and lesion precision in at least two of three seeds."""
        passing = []
        for seed in TRAIN_SEEDS:
            _, with_fine = runs(seed, FINE_LAMBDA)
            _, without = runs(seed, 0.0)
            fine_gain = (
                with_fine["activation_precision"]["fine"]["value"]
                - without["activation_precision"]["fine"]["value"]
            )
            lesion = with_fine["activation_precision"]["lesion"]["value"]
            passing.append(fine_gain >= 0.10 and lesion >= 0.80)

        assert sum(passing) >= 2, passing
