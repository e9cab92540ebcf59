"""
Tests for the transport-contribution scorer, corpus localization and
unsupervised threshold estimation.
"""

import pytest
import numpy as np

from constants import FcaConfig, ImageDescriptor, ParameterError
from core import FeatureMap, AnomalyMap, RngState
from nets import init_vae
from localize import (
    training_pixels, vae_residual, local_ranks, fca_score, localize, image_score,
    estimate_threshold, score_quantile, save_anomaly_maps, load_anomaly_maps
)
from cluster_eval import crop_mask


@pytest.fixture
def planted_residual(np_rng):
    """40x40x2 noise with a +5 block at [16:24, 16:24]."""
    values = np_rng.normal(size=(40, 40, 2))
    values[16:24, 16:24] += 5.0
    mask = np.zeros((40, 40), dtype=bool)
    mask[16:24, 16:24] = True
    return FeatureMap(values), mask


class TestLocalRanks:
    """Test windowed weighted ranks."""

    def test_constant_map_is_half(self):
        """Test that ties count half, so a constant map ranks 0.5 everywhere."""
        ranks = local_ranks(np.full((9, 9, 2), 1.5), 1.0)
        np.testing.assert_allclose(ranks, 0.5)

    def test_range(self, np_rng):
        ranks = local_ranks(np_rng.normal(size=(12, 12, 3)), 1.0)
        assert ranks.min() >= 0.0
        assert ranks.max() <= 1.0

    def test_local_maximum(self):
        """Test that a strict local maximum ranks near the top of its window."""
        values = np.zeros((11, 11, 1))
        values[5, 5, 0] = 1.0
        ranks = local_ranks(values, 1.0)
        assert ranks[5, 5, 0] > 0.9
        assert ranks[5, 5, 0] < 1.0


class TestFcaScore:
    """Test the per-pixel transport contribution scorer."""

    def test_constant_residual_scores_zero(self, tiny_fca):
        scores = fca_score(FeatureMap(np.full((16, 16, 3), 0.7)), tiny_fca).scores
        np.testing.assert_allclose(scores, 0.0, atol=1e-12)

    def test_planted_block_stands_out(self, planted_residual, tiny_fca):
        """Test that a shifted block scores far above the background."""
        residual, mask = planted_residual
        scores = fca_score(residual, tiny_fca).scores
        assert scores.shape == (40, 40)
        assert scores[mask].mean() > 5.0 * scores[~mask].mean()

    def test_quadratic_in_scale(self, planted_residual, tiny_fca):
        """Test that scaling the residual by alpha scales scores by alpha squared."""
        residual, _ = planted_residual
        base = fca_score(residual, tiny_fca).scores
        scaled = fca_score(FeatureMap(4.0 * residual.data), tiny_fca).scores
        np.testing.assert_allclose(scaled, 16.0 * base, rtol=1e-9, atol=1e-9)

    def test_translation_invariant(self, planted_residual, tiny_fca):
        residual, _ = planted_residual
        base = fca_score(residual, tiny_fca).scores
        shifted = fca_score(FeatureMap(residual.data + 3.0), tiny_fca).scores
        np.testing.assert_allclose(shifted, base, atol=1e-9)

    def test_non_negative(self, random_map, tiny_fca):
        assert fca_score(random_map(16, 16, 2), tiny_fca).scores.min() >= 0.0

    def test_map_too_small(self, tiny_fca):
        """Test that maps no larger than the window diameter are rejected."""
        with pytest.raises(ParameterError):
            fca_score(FeatureMap(np.zeros((6, 6, 1))), tiny_fca)

    def test_invalid_sigma(self, random_map):
        with pytest.raises(ParameterError):
            fca_score(random_map(), FcaConfig(sigma_p=0.0))


class TestLocalize:
    """Test corpus-level localization."""

    def test_map_shapes(self, tiny_corpus, tiny_fca):
        maps = localize(tiny_corpus, None, tiny_fca)
        assert len(maps) == len(tiny_corpus)
        assert all(amap.shape == (26, 26) for amap in maps)

    def test_threads_match_sequential(self, tiny_corpus, tiny_fca, rng):
        model = init_vae(tiny_corpus.channels, 2, rng)
        sequential = localize(tiny_corpus, model, tiny_fca, threads=1)
        threaded = localize(tiny_corpus, model, tiny_fca, threads=3)
        for a, b in zip(sequential, threaded):
            np.testing.assert_array_equal(a.scores, b.scores)

    def test_anomalous_images_score_higher(self, tiny_corpus, tiny_fca):
        """Test that raw-feature maps already separate anomalous images."""
        scores = np.array([image_score(amap) for amap in localize(tiny_corpus, None, tiny_fca)])
        types = tiny_corpus.gt_types()
        assert scores[types > 0].mean() > scores[types == 0].mean()

    def test_planted_region_outscores_background(self, tiny_corpus, tiny_fca):
        """Test that every anomalous item scores higher inside its mask than outside."""
        maps = localize(tiny_corpus, None, tiny_fca)
        for item, amap in zip(tiny_corpus, maps):
            if item.gt_type == 0:
                continue
            mask = crop_mask(item.gt_mask, amap.shape)
            assert mask.any() and not mask.all()
            assert amap.scores[mask].mean() > amap.scores[~mask].mean(), item.id

    def test_training_pixels_rescaled(self, tiny_corpus, tiny_spec):
        pixels = training_pixels(tiny_corpus)
        assert pixels.shape == (tiny_spec.n_images * 32 * 32, tiny_spec.channels)
        assert pixels.min() >= 0.0
        assert pixels.max() <= 1.0

    def test_residual_channel_mismatch(self, random_map, rng):
        with pytest.raises(ParameterError):
            vae_residual(random_map(8, 8, 3), init_vae(4, 2, rng))

    def test_image_score_is_maximum(self):
        assert image_score(AnomalyMap(np.array([[0.1, 0.9], [0.3, 0.2]]))) == 0.9


class TestEstimateThreshold:
    """Test the k-means based threshold."""

    @pytest.fixture
    def two_groups(self):
        """Six low-score images near the origin, four high-score ones far away."""
        low = [ImageDescriptor([0.0 + 0.01 * i, 0.0], image_index=i) for i in range(6)]
        high = [ImageDescriptor([10.0 + 0.01 * i, 10.0], image_index=6 + i) for i in range(4)]
        scores = [0.1, 0.2, 0.15, 0.12, 0.18, 0.11, 2.0, 2.5, 3.0, 2.2]
        return low + high, scores

    def test_normal_ratio_and_quantile(self, two_groups):
        descriptors, scores = two_groups
        estimate = estimate_threshold(descriptors, scores, 2, RngState(0))
        assert estimate.normal_ratio == pytest.approx(0.6)
        assert estimate.t == pytest.approx(np.quantile(scores, 0.6))

    def test_normal_cluster_has_low_scores(self, two_groups):
        descriptors, scores = two_groups
        estimate = estimate_threshold(descriptors, scores, 2, RngState(0))
        assert estimate.normal_cluster_index in (0, 1)
        assert estimate.t < min(scores[6:])

    def test_quantile_by_linear_interpolation(self):
        assert score_quantile([1.0, 2.0, 3.0, 4.0], 0.5) == pytest.approx(2.5)
        assert score_quantile([3.0, 1.0, 4.0, 2.0], 1.0) == 4.0
        assert score_quantile([3.0, 1.0, 4.0, 2.0], 0.0) == 1.0

    def test_quantile_ratio_out_of_range(self):
        with pytest.raises(ParameterError):
            score_quantile([1.0, 2.0], 1.5)

    def test_single_group_is_all_normal(self):
        """Test that indistinguishable descriptors put every image in the normal cluster."""
        descriptors = [ImageDescriptor([1.0, 2.0], image_index=i) for i in range(5)]
        scores = [0.3, 0.1, 0.9, 0.4, 0.2]
        estimate = estimate_threshold(descriptors, scores, 2, RngState(0))
        assert estimate.normal_ratio == 1.0
        assert estimate.t == 0.9

    def test_length_mismatch(self, two_groups):
        descriptors, scores = two_groups
        with pytest.raises(ParameterError):
            estimate_threshold(descriptors, scores[:-1], 2, RngState(0))

    def test_too_few_clusters(self, two_groups):
        descriptors, scores = two_groups
        with pytest.raises(ParameterError):
            estimate_threshold(descriptors, scores, 1, RngState(0))

    def test_too_many_clusters(self, two_groups):
        descriptors, scores = two_groups
        with pytest.raises(ParameterError):
            estimate_threshold(descriptors, scores, 11, RngState(0))


class TestMapPersistence:
    """Test anomaly map directories."""

    def test_round_trip(self, tmp_path):
        maps = [AnomalyMap(np.array([[0.5, 0.25], [1.0, 2.0]])),
                AnomalyMap(np.array([[0.0, 0.125], [3.0, 4.0]]))]
        written = save_anomaly_maps(maps, ["a", "b"], tmp_path / "maps")
        assert sorted(p.name for p in written) == ["a.fmap", "a.pgm", "b.fmap", "b.pgm"]
        loaded = load_anomaly_maps(tmp_path / "maps", ["a", "b"])
        for original, amap in zip(maps, loaded):
            assert amap == original

    def test_without_rendering(self, tmp_path):
        written = save_anomaly_maps([AnomalyMap(np.ones((2, 2)))], ["a"], tmp_path, render=False)
        assert [p.name for p in written] == ["a.fmap"]
