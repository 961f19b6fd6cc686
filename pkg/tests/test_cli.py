"""
Tests for the protomargin command-line interface.
"""

import json
from pathlib import Path

import pytest

from protomargin.checkpoint import save_checkpoint
from protomargin.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, build_parser, main
from protomargin.dataset import MANIFEST_NAME
from protomargin.trainer import TrainingDivergedError


TINY_CONFIG = {
    "synth.class_counts": [4, 4, 4],
    "synth.image_size": 48,
    "synth.fine_annotated": 2,
    "synth.malignancy_rates": [0.0, 0.5, 1.0],
    "data.split_counts": [6, 3, 3],
    "train.channels": [3, 4],
    "train.prototype_dim": 4,
    "train.prototypes_per_class": 2,
    "train.k": 2,
    "train.a1_epochs": 1,
    "train.max_cycles": 1,
    "train.coarse_per_batch": 6,
    "train.fine_per_batch": 2,
    "train.a3_epochs": 1,
    "train.a3_batch_size": 6,
    "train.b_steps": 20,
    "train.augment": False,
    "eval.n_resamples": 100,
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Generate, train and evaluate a tiny run once for the module."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "tiny.json"
    config.write_text(json.dumps(TINY_CONFIG))
    data, run = root / "data", root / "run"
    common = ["--config", str(config), "--data", str(data), "--out", str(run)]

    codes = {
        "generate": main(["generate", "--config", str(config), "--out", str(data)]),
        "train": main(["train", *common]),
        "eval": main(["eval", *common, "--split", "test"]),
    }
    return {"root": root, "data": data, "run": run, "common": common, "codes": codes}


@pytest.mark.integration
@pytest.mark.slow
class TestPipeline:
    """End-to-end runs of generate, train, eval, explain and compare."""

    def test_commands_succeed(self, pipeline):
        """Test that every pipeline step exits 0."""
        assert pipeline["codes"] == {"generate": 0, "train": 0, "eval": 0}

    def test_generate_outputs(self, pipeline):
        """Test the manifest and split sizes written by generate."""
        manifest = json.loads((pipeline["data"] / MANIFEST_NAME).read_text())

        assert manifest["splits"] == {"train": 6, "val": 3, "test": 3}

    def test_train_outputs(self, pipeline):
        """Test the checkpoint, loss log, run manifest and saved config."""
        run = pipeline["run"]

        for name in ("final.ckpt", "train_log.csv", "run_manifest.json", "run_config.json"):
            assert (run / name).exists()
        saved = json.loads((run / "run_config.json").read_text())
        assert saved["train.k"] == 2
        manifest = json.loads((run / "run_manifest.json").read_text())
        assert manifest["dataset_manifest_sha256"]

    def test_eval_report(self, pipeline):
        """Test the evaluation report and the per-sample CSV."""
        out = pipeline["run"] / "eval" / "test"
        report = json.loads((out / "eval_report.json").read_text())

        assert report["num_samples"] == 3
        assert (out / "eval_records.csv").exists()

    def test_explain(self, pipeline):
        """Test case reports for a split plus the prototype gallery."""
        code = main(["explain", *pipeline["common"], "--split", "test", "--gallery"])
        out = pipeline["run"] / "explain"

        assert code == EXIT_OK
        assert (out / "gallery.html").exists()
        manifest = json.loads((pipeline["data"] / MANIFEST_NAME).read_text())
        for entry in manifest["samples"]:
            if entry["split"] == "test":
                assert (out / f"{entry['id']}.html").exists()

    def test_explain_image_file(self, pipeline):
        """Test explaining a raw image file from the dataset."""
        image = sorted((pipeline["data"] / "test").glob("*_image.pgm"))[0]

        code = main(["explain", *pipeline["common"], "--image", str(image)])

        assert code == EXIT_OK
        assert (pipeline["run"] / "explain" / f"{image.stem}.html").exists()

    def test_compare_with_itself(self, pipeline):
        """Test that comparing a checkpoint with itself gives zero differences."""
        final = str(pipeline["run"] / "final.ckpt")

        code = main(["compare", *pipeline["common"], "--checkpoint", final, "--against", final])
        result = json.loads((pipeline["run"] / "compare" / "test.json").read_text())

        assert code == EXIT_OK
        assert result["differences"]["ap_lesion"]["observed"] == 0.0


class TestExitCodes:
    """Tests for error handling and exit statuses."""

    def test_unknown_config_key(self, tmp_path, capsys):
        """Test that an unknown config key exits 2 with a message."""
        config = tmp_path / "bad.json"
        config.write_text(json.dumps({"train.lamda_f": 0.1}))

        code = main(["train", "--config", str(config)])

        assert code == EXIT_USAGE
        assert "lamda_f" in capsys.readouterr().err

    def test_missing_dataset(self, tmp_path, capsys):
        """Test that training without a dataset exits 2."""
        code = main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path)])

        assert code == EXIT_USAGE
        assert "protomargin: error:" in capsys.readouterr().err

    def test_missing_checkpoint(self, tmp_path):
        """Test that evaluating a missing checkpoint exits 2."""
        code = main(["eval", "--checkpoint", str(tmp_path / "absent.ckpt")])

        assert code == EXIT_USAGE

    def test_explain_needs_target(self, toy_dataset, toy_net, tmp_path, capsys):
        """Test that explain without --image, --split or --gallery exits 2."""
        checkpoint = save_checkpoint(toy_net.params, tmp_path / "net.ckpt")

        code = main(
            ["explain", "--data", str(toy_dataset.parent), "--checkpoint", str(checkpoint)]
        )

        assert code == EXIT_USAGE
        assert "--image, --split or --gallery" in capsys.readouterr().err

    def test_divergence_exits_1(self, toy_dataset, tmp_path, monkeypatch, capsys):
        """Test that a diverged run exits 1 and names the last checkpoint."""

        def diverge(self, *args, **kwargs):
            raise TrainingDivergedError("non-finite loss", Path("run/cycle0_a1.ckpt"))

        monkeypatch.setattr("protomargin.trainer.Trainer.run", diverge)

        code = main(
            [
                "train",
                "--data",
                str(toy_dataset.parent),
                "--out",
                str(tmp_path / "run"),
                "--preset",
                "protopnet",
            ]
        )

        assert code == EXIT_RUNTIME
        assert "cycle0_a1.ckpt" in capsys.readouterr().err

    def test_argparse_usage_error(self):
        """Test that an unknown subcommand exits 2."""
        with pytest.raises(SystemExit) as excinfo:
            main(["fly"])
        assert excinfo.value.code == 2

    def test_help_lists_config_keys(self):
        """Test that the help epilog documents config keys and the thread cap."""
        text = build_parser().format_help()

        assert "train.lambda_f" in text
        assert "PROTO_MARGIN_THREADS" in text


class TestTrainOnUnion:
    """Tests for training on the merged train and val splits."""

    def test_fine_subset_unchanged(self, toy_dataset, tmp_path, monkeypatch):
        """Test that the union adds val samples without adding fine masks."""
        seen = {}

        def capture(self, samples, out, **kwargs):
            seen["samples"] = samples
            raise TrainingDivergedError("stop", None)

        monkeypatch.setattr("protomargin.trainer.Trainer.run", capture)
        config = tmp_path / "union.json"
        config.write_text(json.dumps({"train.train_on_union": True}))

        code = main(
            [
                "train",
                "--config",
                str(config),
                "--data",
                str(toy_dataset.parent),
                "--out",
                str(tmp_path / "run"),
            ]
        )

        samples = seen["samples"]
        assert code == EXIT_RUNTIME
        assert len(samples) == 9
        assert sum(s.has_fine_mask for s in samples) == 2


@pytest.mark.integration
@pytest.mark.slow
class TestReproducibility:
    """Tests that a fixed seed reproduces every artifact byte for byte."""

    def test_second_run_is_byte_identical(self, pipeline, tmp_path):
        """Test that generate, train and eval rerun to identical files."""
        config = pipeline["root"] / "tiny.json"
        data, run = tmp_path / "data", tmp_path / "run"
        common = ["--config", str(config), "--data", str(data), "--out", str(run)]

        assert main(["generate", "--config", str(config), "--out", str(data)]) == EXIT_OK
        assert main(["train", *common]) == EXIT_OK
        assert main(["eval", *common, "--split", "test"]) == EXIT_OK

        pairs = [
            (pipeline["data"] / MANIFEST_NAME, data / MANIFEST_NAME),
            (pipeline["run"] / "final.ckpt", run / "final.ckpt"),
            (
                pipeline["run"] / "eval" / "test" / "eval_report.json",
                run / "eval" / "test" / "eval_report.json",
            ),
            (
                pipeline["run"] / "eval" / "test" / "eval_records.csv",
                run / "eval" / "test" / "eval_records.csv",
            ),
        ]
        for first, second in pairs:
            assert first.read_bytes() == second.read_bytes(), first.name
