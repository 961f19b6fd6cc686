"""
Tests for the prototype network.
"""

import math

import numpy as np
import pytest
from scipy.special import expit

from protomargin.protonet import (
    PUBLISHED_MALIGNANCY_INTERCEPT,
    PUBLISHED_MALIGNANCY_SCALE,
    PUBLISHED_MALIGNANCY_WEIGHTS,
    ProtoNetConfig,
    cell_to_pixel,
    class_connection_matrix,
    compute_pam,
    init_params,
    malignancy_probability,
    prototypes_by_class,
    receptive_field,
)
from protomargin.tensor import ShapeError, Tensor


class TestProtoNetConfig:
    """Tests for architecture configuration."""

    def test_defaults(self):
        """Test the default 14x14 grid and 15 prototypes."""
        config = ProtoNetConfig()

        assert config.grid_size == 14
        assert config.num_prototypes == 15
        assert config.k == 5
        assert config.epsilon == 1e-4

    def test_toy_grid(self, toy_model_config):
        """Test that two blocks on 48 px images give a 12x12 grid."""
        assert toy_model_config.grid_size == 12

    @pytest.mark.parametrize(
        "kwargs",
        [{"image_size": 100}, {"k": 0}, {"k": 197}, {"epsilon": 1.0}, {"prototypes_per_class": 0}],
    )
    def test_validation(self, kwargs):
        """Test that invalid settings are rejected."""
        with pytest.raises(ValueError):
            ProtoNetConfig(**kwargs)


class TestInitialization:
    """Tests for init_params."""

    def test_shapes(self):
        """Test parameter shapes for the default architecture."""
        params = init_params(ProtoNetConfig(), seed=0)

        assert [w.shape for w in params.conv_weights] == [
            (16, 1, 3, 3),
            (32, 16, 3, 3),
            (64, 32, 3, 3),
            (64, 64, 1, 1),
        ]
        assert params.prototypes.shape == (15, 64)
        assert params.last_layer.shape == (3, 15)
        assert params.class_counts() == [5, 5, 5]
        assert params.provenance == [None] * 15

    def test_prototypes_in_unit_hypercube(self, toy_net):
        """Test that prototypes start uniform on [0, 1]."""
        protos = toy_net.params.prototypes.data

        assert protos.min() >= 0.0 and protos.max() <= 1.0

    def test_class_connection_pattern(self):
        """Test +1 to the own class and -1 elsewhere."""
        matrix = class_connection_matrix(np.array([0, 0, 1, 2]), 3)

        np.testing.assert_array_equal(
            matrix, [[1, 1, -1, -1], [-1, -1, 1, -1], [-1, -1, -1, 1]]
        )

    def test_seeded(self, toy_model_config):
        """Test that the same seed gives identical parameters."""
        a = init_params(toy_model_config, seed=4)
        b = init_params(toy_model_config, seed=4)
        c = init_params(toy_model_config, seed=5)

        assert a.fingerprint() == b.fingerprint()
        assert a.fingerprint() != c.fingerprint()


class TestModelParams:
    """Tests for parameter groups, fingerprints and copies."""

    def test_groups(self, toy_net):
        """Test the contents of each parameter group."""
        params = toy_net.params

        assert len(params.group("backbone")) == 6
        assert params.group("prototypes") == [params.prototypes]
        malignancy = [params.malignancy_weights, params.malignancy_intercept]
        assert params.group("malignancy") == malignancy
        with pytest.raises(ValueError):
            params.group("decoder")

    def test_set_trainable(self, toy_net):
        """Test that only the named groups require gradients."""
        params = toy_net.params
        params.set_trainable("last_layer")

        assert params.last_layer.requires_grad
        assert not params.prototypes.requires_grad
        assert not any(t.requires_grad for t in params.group("backbone"))

    def test_fingerprint_tracks_group(self, toy_net):
        """Test that changing a group changes only that group's fingerprint."""
        params = toy_net.params
        before = {g: params.fingerprint([g]) for g in ("backbone", "prototypes", "last_layer")}
        params.last_layer.data[0, 0] += 1.0

        assert params.fingerprint(["last_layer"]) != before["last_layer"]
        assert params.fingerprint(["backbone"]) == before["backbone"]
        assert params.fingerprint(["prototypes"]) == before["prototypes"]

    def test_copy_is_deep(self, toy_net):
        """Test that copies do not share arrays."""
        clone = toy_net.params.copy()
        clone.prototypes.data[0, 0] = 42.0

        assert toy_net.params.prototypes.data[0, 0] != 42.0

    def test_prototypes_by_class(self, toy_net):
        """Test prototype grouping by class tag."""
        assert prototypes_by_class(toy_net.params) == {0: [0, 1], 1: [2, 3], 2: [4, 5]}


class TestForward:
    """Tests for the forward pass."""

    def test_output_shapes(self, toy_net, toy_corpus):
        """Test shapes of every forward output."""
        images = np.stack([s.image for s in toy_corpus[:3]])
        result = toy_net.predict(images)

        assert result.latent.shape == (3, 4, 12, 12)
        assert result.distances.shape == (3, 6, 12, 12)
        assert result.similarities.shape == (3, 6, 12, 12)
        assert result.scores.shape == (3, 6)
        assert result.logits.shape == (3, 3)
        assert result.malignancy.shape == (3,)

    def test_probabilities_sum_to_one(self, toy_net, toy_corpus):
        """Test that margin probabilities sum to 1."""
        images = np.stack([s.image for s in toy_corpus])
        result = toy_net.predict(images)

        np.testing.assert_allclose(result.probabilities.sum(axis=1), 1.0, atol=1e-12)

    def test_similarities_in_range(self, toy_net, toy_corpus):
        """Test that every similarity lies in (0, ln(1/eps)]."""
        result = toy_net.predict(toy_corpus[0].image)
        sims = result.similarities.data

        assert (sims > 0).all()
        assert sims.max() <= math.log(1 / toy_net.config.epsilon)

    def test_scores_are_topk_means(self, toy_net, toy_corpus):
        """Test that pooled scores equal the sort-oracle top-k mean."""
        result = toy_net.predict(toy_corpus[1].image)
        flat = result.similarities.data[0].reshape(6, -1)
        oracle = np.sort(flat, axis=1)[:, ::-1][:, : toy_net.config.k].mean(axis=1)

        np.testing.assert_allclose(result.scores.data[0], oracle, atol=1e-12)

    def test_logits_are_w1_times_scores(self, toy_net, toy_corpus):
        """Test that logits are W1 applied to the pooled scores."""
        result = toy_net.predict(toy_corpus[2].image)
        expected = result.scores.data @ toy_net.params.last_layer.data.T

        np.testing.assert_allclose(result.logits.data, expected, atol=1e-12)

    def test_matching_prototype_attains_maximum(self, toy_net, toy_corpus):
        """Test that a prototype equal to a latent patch scores ln(1/eps) there."""
        image = toy_corpus[5].image
        latent = toy_net.latent_of(image)
        toy_net.params.prototypes.data[3] = latent[:, 4, 7]

        result = toy_net.predict(image)

        assert result.distances.data[0, 3, 4, 7] == 0.0
        assert result.similarities.data[0, 3].max() == pytest.approx(math.log(1e4))
        assert result.similarities.data[0, 3, 4, 7] == result.similarities.data[0, 3].max()

    def test_own_class_scores_win(self, toy_net):
        """Test the sign argument: high own-class similarity yields the top logit."""
        scores = np.array([0.1, 0.1, 0.1, 0.1, 5.0, 5.0])
        logits = scores @ toy_net.params.last_layer.data.T

        assert int(np.argmax(logits)) == 2

    def test_deterministic(self, toy_net, toy_corpus):
        """Test that repeated forward passes are bit-identical."""
        a = toy_net.predict(toy_corpus[0].image)
        b = toy_net.predict(toy_corpus[0].image)

        assert a.logits.data.tobytes() == b.logits.data.tobytes()

    def test_latent_matches_batch(self, toy_net, toy_corpus):
        """Test that a single-image latent equals its row of a batch pass."""
        images = np.stack([s.image for s in toy_corpus[:4]])
        batch = toy_net.predict(images).latent.data

        np.testing.assert_allclose(toy_net.latent_of(images[2]), batch[2], rtol=0, atol=1e-12)

    def test_wrong_size_rejected(self, toy_net):
        """Test that images of the wrong size are rejected."""
        with pytest.raises(ShapeError):
            toy_net.predict(np.zeros((40, 40)))

    def test_out_of_range_rejected(self, toy_net):
        """Test that pixel values outside [0, 1] are rejected."""
        with pytest.raises(ValueError):
            toy_net.predict(np.full((48, 48), 2.0))


class TestMalignancyHead:
    """Tests for the h2 malignancy model."""

    def test_published_constants(self):
        """Test the published weights, intercept and scale."""
        assert PUBLISHED_MALIGNANCY_WEIGHTS == (-16.0, -10.0, 6.0)
        assert PUBLISHED_MALIGNANCY_INTERCEPT == -155.0
        assert PUBLISHED_MALIGNANCY_SCALE == 0.01

    def test_zero_logits(self):
        """Test that zero logits give sigmoid(-1.55) ~= 0.1750."""
        assert malignancy_probability(np.zeros(3)) == pytest.approx(0.1750, abs=1e-4)

    def test_circumscribed_dominant(self):
        """Test logits (10, 0, 0): sigmoid(0.01 * (-160 - 155))."""
        p = malignancy_probability(np.array([10.0, 0.0, 0.0]))

        assert p == pytest.approx(expit(-3.15), rel=1e-12)
        assert p == pytest.approx(0.0411, abs=1e-4)

    def test_spiculated_dominant_is_higher(self):
        """Test that spiculated-dominant logits give a higher probability."""
        circ = malignancy_probability(np.array([10.0, 0.0, 0.0]))
        spic = malignancy_probability(np.array([0.0, 0.0, 10.0]))

        assert spic == pytest.approx(expit(-0.95), rel=1e-12)
        assert circ < spic

    def test_monotone_in_spiculated_logit(self):
        """Test that raising the spiculated logit strictly raises the probability."""
        logits = np.zeros((20, 3))
        logits[:, 2] = np.linspace(-10, 10, 20)
        p = malignancy_probability(logits)

        assert (np.diff(p) > 0).all()

    def test_network_uses_its_own_head(self, toy_net):
        """Test that the net applies its learned h2 to unnormalized logits."""
        params = toy_net.params
        params.malignancy_weights.data[:] = [1.0, -2.0, 0.5]
        params.malignancy_intercept.data[...] = 0.25
        logits = np.array([[1.0, 2.0, 3.0]])

        expected = expit((1.0 - 4.0 + 1.5 + 0.25) * params.malignancy_scale)
        np.testing.assert_allclose(toy_net.malignancy_probability(logits), [expected])


class TestActivationMaps:
    """Tests for PAMs and receptive-field geometry."""

    def test_constant_grid_gives_constant_pam(self):
        """Test that a constant grid upsamples to a constant PAM."""
        pam = compute_pam(np.full((2, 14, 14), 3.5), 1, image_size=112, sample_id="x")

        assert pam.values.shape == (112, 112)
        np.testing.assert_allclose(pam.values, 3.5)
        assert pam.sample_id == "x"

    def test_pam_bounded_by_grid(self, rng):
        """Test that PAM values stay within the grid range."""
        grids = rng.uniform(0, 9, size=(3, 14, 14))
        pam = compute_pam(Tensor(grids), 2)

        assert pam.values.min() >= grids[2].min() - 1e-12
        assert pam.values.max() <= grids[2].max() + 1e-12

    def test_pam_argmax_near_grid_argmax(self, rng):
        """Test interpolation locality of the peak."""
        grids = rng.uniform(0, 1, size=(1, 14, 14))
        grids[0, 5, 9] = 10.0
        pam = compute_pam(grids, 0)
        peak = np.unravel_index(np.argmax(pam.values), pam.values.shape)
        expected = cell_to_pixel(5, 9)

        assert abs(peak[0] - expected[0]) <= 9 and abs(peak[1] - expected[1]) <= 9

    def test_index_out_of_range(self):
        """Test that an invalid prototype index is rejected."""
        with pytest.raises(ValueError):
            compute_pam(np.zeros((2, 14, 14)), 2)

    def test_receptive_field_default(self):
        """Test the 22 px field of the three-block backbone."""
        top, left, bottom, right = receptive_field(7, 7)

        assert (bottom - top, right - left) == (22, 22)
        assert top < 7 * 8 + 4 < bottom

    def test_receptive_field_clipped(self):
        """Test that border cells are clipped to the image."""
        top, left, _, _ = receptive_field(0, 0)
        _, _, bottom, right = receptive_field(13, 13)

        assert (top, left) == (0, 0)
        assert (bottom, right) == (112, 112)

    def test_cell_to_pixel_corners(self):
        """Test corner alignment of grid cells to pixels."""
        assert cell_to_pixel(0, 0) == (0, 0)
        assert cell_to_pixel(13, 13) == (111, 111)
