"""
Tests for case explanations, reports and the prototype gallery.
"""

import math

import numpy as np
import pytest
from PIL import Image
from scipy.special import expit

from protomargin.dataset import DatasetError
from protomargin.explain import (
    ExplainConfig,
    case_report,
    class_activation_visualization,
    explain_case,
    heat_rgb,
    minmax,
    prototype_gallery,
    render_overlay,
)
from protomargin.tensor import ShapeError
from protomargin.trainer import project_prototypes


@pytest.fixture
def projected_net(toy_net, toy_corpus):
    """Toy network whose prototypes sit on training patches."""
    project_prototypes(toy_net, toy_corpus)
    return toy_net


@pytest.fixture
def sources(toy_corpus):
    return {s.sample_id: s.image for s in toy_corpus}


@pytest.fixture
def explanation(projected_net, toy_corpus, sources):
    """Explanation of the last toy sample."""
    sample = toy_corpus[-1]
    return explain_case(projected_net, sample.image, sample.sample_id, sources=sources)


class TestExplainConfig:
    """Tests for ExplainConfig."""

    @pytest.mark.parametrize("kwargs", [{"top_n": 0}, {"alpha": 1.5}, {"alpha": -0.1}])
    def test_invalid(self, kwargs):
        """Test that out-of-range settings are rejected."""
        with pytest.raises(ValueError):
            ExplainConfig(**kwargs)


class TestExplainCase:
    """Tests for explain_case."""

    def test_contributions_sum_to_logits(self, explanation):
        """Test that every class's contributions add up to its logit."""
        np.testing.assert_allclose(
            explanation.contributions.sum(axis=1), explanation.margin_logits, atol=1e-9
        )

    def test_matches_ordered_by_similarity(self, explanation):
        """Test the top-3 ordering and each match's own-class contribution."""
        sims = [m.similarity for m in explanation.matches]

        assert len(sims) == 3
        assert sims == sorted(sims, reverse=True)
        assert sims[0] == explanation.scores.max()
        for m in explanation.matches:
            assert m.contribution == explanation.contributions[m.prototype_class, m.index]
            assert m.pam.shape == (48, 48)

    def test_sources_attach_patches(self, explanation):
        """Test that projected prototypes carry source image, PAM and patch box."""
        for m in explanation.matches:
            assert m.provenance is not None
            assert m.source_image is not None
            assert m.source_pam.shape == (48, 48)
            top, left, bottom, right = m.patch_box
            assert 0 <= top < bottom <= 48
            assert 0 <= left < right <= 48

    def test_without_sources(self, projected_net, toy_corpus):
        """Test that source fields stay empty when no images are supplied."""
        e = explain_case(projected_net, toy_corpus[0].image, "c0", top_n=2)

        assert len(e.matches) == 2
        assert all(m.source_image is None and m.patch_box is None for m in e.matches)

    def test_malignancy_breakdown(self, explanation):
        """Test that the breakdown reproduces the h2 probability."""
        breakdown = explanation.malignancy_breakdown()

        assert set(breakdown["terms"]) == {"circumscribed", "indistinct", "spiculated"}
        linear = sum(breakdown["terms"].values()) + breakdown["intercept"]
        assert breakdown["linear"] == pytest.approx(linear, rel=1e-12)
        assert expit(breakdown["scale"] * breakdown["linear"]) == pytest.approx(
            breakdown["probability"], rel=1e-9
        )


class TestClassActivation:
    """Tests for class_activation_visualization and map helpers."""

    def test_normalized(self, explanation):
        """Test that the map spans [0, 1]."""
        cav = class_activation_visualization(explanation, 2)

        assert cav.shape == (48, 48)
        assert cav.min() == 0.0
        assert cav.max() == pytest.approx(1.0)

    def test_class_without_prototypes(self, explanation):
        """Test that a class with no prototypes is rejected."""
        explanation.prototype_classes = np.zeros_like(explanation.prototype_classes)

        with pytest.raises(ValueError, match="no prototypes"):
            class_activation_visualization(explanation, 1)

    def test_minmax(self):
        """Test rescaling and the constant-map case."""
        np.testing.assert_array_equal(minmax(np.array([2.0, 4.0, 3.0])), [0.0, 1.0, 0.5])
        np.testing.assert_array_equal(minmax(np.full((2, 2), 7.0)), np.zeros((2, 2)))

    def test_heat_colors(self):
        """Test that the maximum is red and the minimum blue."""
        rgb = heat_rgb(np.array([[0.0, 1.0]]))

        assert tuple(rgb[0, 0]) == (0, 0, 255)
        assert tuple(rgb[0, 1]) == (255, 0, 0)


class TestRendering:
    """Tests for render_overlay."""

    def test_writes_ppm(self, tmp_path, rng):
        """Test that the overlay is a readable RGB image of the input size."""
        image, values = rng.uniform(size=(2, 48, 48))

        path = render_overlay(image, values, tmp_path / "o.ppm")

        with Image.open(path) as img:
            assert img.size == (48, 48)
            assert img.mode == "RGB"

    def test_size_mismatch(self, tmp_path):
        """Test that map and image must agree in shape."""
        with pytest.raises(ShapeError):
            render_overlay(np.zeros((48, 48)), np.zeros((12, 12)), tmp_path / "o.ppm")


class TestCaseReport:
    """Tests for case_report."""

    def test_report_and_assets(self, tmp_path, explanation):
        """Test the HTML page and the per-prototype asset names."""
        report = case_report(explanation, tmp_path)
        case = explanation.case_id
        names = {p.name for p in report.assets}

        assert report.path.name == f"{case}.html"
        assert {f"{case}_input.ppm", f"{case}_cav.ppm"} <= names
        for m in explanation.matches:
            for role in ("pam", "patch", "source"):
                assert f"{case}_{m.prototype_id}_{role}.ppm" in names
        assert all(p.exists() for p in report.assets)
        page = report.path.read_text()
        assert "Malignancy" in page
        assert page.count("data:image/png;base64,") >= 2 + 3 * len(explanation.matches)

    def test_report_without_sources(self, tmp_path, projected_net, toy_corpus):
        """Test that missing source images are stated, not fabricated."""
        e = explain_case(projected_net, toy_corpus[0].image, "bare")

        report = case_report(e, tmp_path, ExplainConfig(top_n=1))

        assert "source image unavailable" in report.path.read_text()
        assert not any(p.name.endswith("_source.ppm") for p in report.assets)


class TestGallery:
    """Tests for prototype_gallery."""

    def test_entry_per_prototype(self, tmp_path, projected_net, sources):
        """Test gallery entries, their files and maximal self-similarity."""
        gallery = prototype_gallery(projected_net, sources, tmp_path)
        best = math.log(1.0 / projected_net.config.epsilon)

        assert len(gallery.entries) == projected_net.params.num_prototypes
        for entry in gallery.entries:
            pid = entry.prototype_id
            assert (tmp_path / f"proto{pid}_source.ppm").exists()
            assert (tmp_path / f"proto{pid}_selfpam.ppm").exists()
            assert entry.self_similarity == pytest.approx(best, rel=1e-6)
        assert "Prototype gallery" in gallery.path.read_text()

    def test_unprojected_rejected(self, tmp_path, toy_net, sources):
        """Test that prototypes without provenance cannot be shown."""
        with pytest.raises(ValueError, match="no provenance"):
            prototype_gallery(toy_net, sources, tmp_path)

    def test_missing_source(self, tmp_path, projected_net):
        """Test that a missing provenance image raises DatasetError."""
        with pytest.raises(DatasetError, match="missing source image"):
            prototype_gallery(projected_net, {}, tmp_path)
