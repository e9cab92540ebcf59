"""
Tests for clustering, clustering metrics, localization metrics and
pixel segmentation.
"""

from itertools import combinations, permutations

import pytest
import numpy as np

from constants import ParameterError, UndefinedMetricError
from core import FeatureMap, AnomalyMap, RngState
from cluster_eval import (
    Labeling, ContingencyTable, ward_cluster, kmeans_fit, kmeans, within_cluster_ss,
    nmi, ari, f1_assignment, purity, purity_curve, auroc, pro_curve, pro, crop_mask,
    segment_pixels, evaluate_clustering, evaluate_localization, save_labeling, load_labeling,
    save_centers, load_centers
)
from contrastive import prepare_descriptor_features


# ============================================================================
# ORACLES
# ============================================================================

def greedy_ward(points, n_clusters):
    """Naive agglomeration merging the pair with the smallest SSE increase."""
    clusters = [[i] for i in range(len(points))]
    while len(clusters) > n_clusters:
        best = None
        for a, b in combinations(range(len(clusters)), 2):
            pa, pb = points[clusters[a]], points[clusters[b]]
            na, nb = len(pa), len(pb)
            cost = na * nb / (na + nb) * np.sum((pa.mean(axis=0) - pb.mean(axis=0)) ** 2)
            if best is None or cost < best[0]:
                best = (cost, a, b)
        _, a, b = best
        clusters[a] = clusters[a] + clusters[b]
        del clusters[b]
    labels = np.empty(len(points), dtype=np.int64)
    for c, members in enumerate(clusters):
        labels[members] = c
    return Labeling.from_values(labels)


def pair_count_ari(a, b):
    """ARI from explicit pair agreement counts, or None when undefined."""
    same_both = same_a = same_b = diff_both = 0
    for i, j in combinations(range(len(a)), 2):
        in_a, in_b = a[i] == a[j], b[i] == b[j]
        same_both += in_a and in_b
        same_a += in_a and not in_b
        same_b += in_b and not in_a
        diff_both += not in_a and not in_b
    denominator = ((same_both + same_a) * (same_a + diff_both)
                   + (same_both + same_b) * (same_b + diff_both))
    if denominator == 0:
        return None
    return 2.0 * (same_both * diff_both - same_a * same_b) / denominator


def brute_force_f1(pred, truth):
    counts = ContingencyTable.from_labelings(pred, truth).counts
    if counts.shape[0] > counts.shape[1]:
        counts = counts.T
    rows, cols = counts.shape
    best = max(sum(counts[i, perm[i]] for i in range(rows))
               for perm in permutations(range(cols), rows))
    return best / counts.sum()


def brute_force_nmi(pred, truth):
    """NMI from the contingency counts; 1 for two single-cluster labelings, 0 without MI."""
    if pred.n_clusters == truth.n_clusters == 1:
        return 1.0
    counts = ContingencyTable.from_labelings(pred, truth).counts.astype(float)
    n = counts.sum()
    rows, cols = counts.sum(axis=1), counts.sum(axis=0)
    mi = sum(counts[i, j] / n * np.log(n * counts[i, j] / (rows[i] * cols[j]))
             for i in range(counts.shape[0]) for j in range(counts.shape[1]) if counts[i, j] > 0)
    if mi < 1e-12:
        return 0.0
    h_rows = -np.sum(rows / n * np.log(rows / n))
    h_cols = -np.sum(cols / n * np.log(cols / n))
    return mi / ((h_rows + h_cols) / 2)


def pairwise_auroc(scores, labels):
    """Fraction of (positive, negative) pairs ranked correctly, ties counting half."""
    scores, labels = np.asarray(scores), np.asarray(labels).astype(bool)
    wins = [1.0 if p > q else 0.5 if p == q else 0.0
            for p in scores[labels] for q in scores[~labels]]
    return float(np.mean(wins))


def random_labelings(np_rng, trials=150, max_items=8):
    """Pairs of random labelings of 1..max_items items with up to four labels each."""
    for _ in range(trials):
        n = int(np_rng.integers(1, max_items + 1))
        yield (Labeling.from_values(np_rng.integers(0, 4, n)),
               Labeling.from_values(np_rng.integers(0, 4, n)))


# ============================================================================
# LABELINGS
# ============================================================================

class TestLabeling:
    """Test Labeling construction."""

    def test_from_values_first_appearance(self):
        labeling = Labeling.from_values(["b", "a", "b", "c"])
        assert list(labeling.labels) == [0, 1, 0, 2]
        assert labeling.n_clusters == 3

    def test_canonical(self):
        assert list(Labeling(np.array([2, 2, 0, 1]), 3).canonical().labels) == [0, 0, 1, 2]

    def test_out_of_range(self):
        with pytest.raises(ParameterError):
            Labeling(np.array([0, 3]), 3)

    def test_contingency_table(self):
        table = ContingencyTable.from_labelings(Labeling(np.array([0, 0, 1, 1, 1, 1]), 2),
                                                Labeling(np.array([0, 0, 0, 1, 1, 1]), 2))
        np.testing.assert_array_equal(table.counts, [[2, 0], [1, 3]])
        assert table.total == 6

    def test_length_mismatch(self):
        with pytest.raises(ParameterError):
            nmi(Labeling(np.array([0, 1]), 2), Labeling(np.array([0, 1, 1]), 2))


# ============================================================================
# CLUSTERING
# ============================================================================

class TestWardCluster:
    """Test Ward agglomerative clustering."""

    def test_singletons(self, np_rng):
        labeling = ward_cluster(np_rng.normal(size=(5, 2)), 5)
        assert list(labeling.labels) == [0, 1, 2, 3, 4]

    def test_single_cluster(self, np_rng):
        assert list(ward_cluster(np_rng.normal(size=(4, 2)), 1).labels) == [0, 0, 0, 0]

    def test_separated_blobs(self, np_rng):
        """Test that three far-apart blobs are recovered exactly."""
        centers = np.array([[0.0, 0.0], [20.0, 0.0], [0.0, 20.0]])
        truth = np.repeat([0, 1, 2], 5)
        points = centers[truth] + np_rng.normal(scale=0.5, size=(15, 2))
        labeling = ward_cluster(points, 3)
        np.testing.assert_array_equal(labeling.labels, truth)

    def test_duplicate_points_stay_together(self):
        points = np.array([[0.0, 0.0], [0.0, 0.0], [5.0, 5.0], [10.0, 10.0]])
        assert list(ward_cluster(points, 3).labels) == [0, 0, 1, 2]

    @pytest.mark.parametrize("trial", range(20))
    def test_matches_naive_agglomeration(self, trial):
        points = RngState(trial).normal((8, 3))
        expected = greedy_ward(points, 3)
        np.testing.assert_array_equal(ward_cluster(points, 3).labels, expected.labels)

    def test_too_many_clusters(self):
        with pytest.raises(ParameterError):
            ward_cluster(np.zeros((3, 2)), 4)


class TestKMeans:
    """Test k-means."""

    def test_two_groups(self):
        points = np.array([[0.0], [0.1], [10.0], [10.1]])
        labeling = kmeans(points, 2, RngState(0))
        assert list(labeling.canonical().labels) == [0, 0, 1, 1]

    def test_fit_returns_centers_and_inertia(self):
        points = np.array([[0.0], [0.1], [10.0], [10.1]])
        labeling, centers, inertia = kmeans_fit(points, 2, RngState(0))
        np.testing.assert_allclose(np.sort(centers.ravel()), [0.05, 10.05])
        assert inertia == pytest.approx(within_cluster_ss(points, labeling))
        assert inertia == pytest.approx(0.01)

    def test_deterministic(self, np_rng):
        points = np_rng.normal(size=(30, 2))
        np.testing.assert_array_equal(kmeans(points, 3, RngState(4)).labels,
                                      kmeans(points, 3, RngState(4)).labels)

    @pytest.mark.parametrize("trial", range(10))
    def test_matches_exhaustive_two_partition(self, trial):
        """Test that k=2 reaches the smallest SSE over every split of two blobs."""
        setup = np.random.default_rng(300 + trial)
        points = np.vstack([setup.normal(size=(4, 2)), setup.normal(size=(3, 2)) + [6.0, 0.0]])
        splits = []
        for size in range(1, 4):
            for members in combinations(range(7), size):
                labels = np.zeros(7, dtype=np.int64)
                labels[list(members)] = 1
                splits.append(within_cluster_ss(points, Labeling(labels, 2)))
        best = min(splits)
        labeling = kmeans(points, 2, RngState(trial))
        assert within_cluster_ss(points, labeling) == pytest.approx(best, rel=1e-9)

    def test_too_many_clusters(self):
        with pytest.raises(ParameterError):
            kmeans(np.zeros((2, 1)), 3, RngState(0))


# ============================================================================
# CLUSTERING METRICS
# ============================================================================

class TestClusteringMetrics:
    """Test NMI, ARI, F1 and purity."""

    def test_identical_labelings(self):
        a = Labeling(np.array([0, 0, 1, 2, 2]), 3)
        b = Labeling(np.array([1, 1, 0, 2, 2]), 3)
        assert evaluate_clustering(a, b) == pytest.approx({'nmi': 1.0, 'ari': 1.0, 'f1': 1.0})

    def test_independent_labelings(self):
        a = Labeling(np.array([0, 0, 1, 1]), 2)
        b = Labeling(np.array([0, 1, 0, 1]), 2)
        assert nmi(a, b) == pytest.approx(0.0, abs=1e-12)

    def test_nmi_formula(self):
        """Test NMI against mutual information over mean entropy."""
        pred = Labeling(np.array([0, 0, 1, 1, 1, 1]), 2)
        truth = Labeling(np.array([0, 0, 0, 1, 1, 1]), 2)
        counts = np.array([[2, 0], [1, 3]], dtype=float)
        n = counts.sum()
        rows, cols = counts.sum(axis=1), counts.sum(axis=0)
        mi = sum(counts[i, j] / n * np.log(n * counts[i, j] / (rows[i] * cols[j]))
                 for i in range(2) for j in range(2) if counts[i, j] > 0)
        h_rows = -np.sum(rows / n * np.log(rows / n))
        h_cols = -np.sum(cols / n * np.log(cols / n))
        assert nmi(pred, truth) == pytest.approx(mi / ((h_rows + h_cols) / 2))

    @pytest.mark.parametrize("trial", range(15))
    def test_ari_matches_pair_counts(self, trial):
        rng = RngState(100 + trial)
        a = rng.integers(0, 3, 12)
        b = rng.integers(0, 4, 12)
        expected = pair_count_ari(a, b)
        if expected is None:
            pytest.skip("ARI undefined for this draw")
        assert ari(Labeling.from_values(a), Labeling.from_values(b)) == pytest.approx(expected)

    @pytest.mark.parametrize("trial", range(15))
    def test_f1_matches_exhaustive_matching(self, trial):
        rng = RngState(200 + trial)
        pred = Labeling.from_values(rng.integers(0, 4, 15))
        truth = Labeling.from_values(rng.integers(0, 3, 15))
        assert f1_assignment(pred, truth) == pytest.approx(brute_force_f1(pred, truth))

    def test_nmi_matches_entropy_formula_on_small_labelings(self, np_rng):
        for pred, truth in random_labelings(np_rng):
            assert nmi(pred, truth) == pytest.approx(brute_force_nmi(pred, truth), abs=1e-9)

    def test_ari_matches_pair_counts_on_small_labelings(self, np_rng):
        """Test ARI against pair counts; undefined pair ratios mean identical partitions."""
        for pred, truth in random_labelings(np_rng):
            expected = pair_count_ari(pred.labels, truth.labels)
            assert ari(pred, truth) == pytest.approx(1.0 if expected is None else expected,
                                                     abs=1e-9)

    def test_f1_matches_exhaustive_matching_on_small_labelings(self, np_rng):
        for pred, truth in random_labelings(np_rng):
            assert f1_assignment(pred, truth) == pytest.approx(brute_force_f1(pred, truth))

    def test_invariant_to_relabeling(self, np_rng):
        for pred, truth in random_labelings(np_rng, trials=50):
            order = np_rng.permutation(pred.n_clusters)
            renamed = Labeling(order[pred.labels], pred.n_clusters)
            assert evaluate_clustering(renamed, truth) == pytest.approx(
                evaluate_clustering(pred, truth), abs=1e-12)

    def test_symmetric(self, np_rng):
        for pred, truth in random_labelings(np_rng, trials=50):
            assert nmi(pred, truth) == pytest.approx(nmi(truth, pred), abs=1e-12)
            assert ari(pred, truth) == pytest.approx(ari(truth, pred), abs=1e-12)
            assert f1_assignment(pred, truth) == pytest.approx(f1_assignment(truth, pred))

    def test_purity(self):
        pred = Labeling(np.array([0, 0, 1, 1]), 2)
        truth = Labeling(np.array([0, 1, 1, 1]), 2)
        assert purity(pred, truth) == pytest.approx(0.75)

    def test_purity_curve(self):
        points = np.array([[0.0], [0.2], [5.0], [5.2]])
        truth = Labeling(np.array([0, 0, 1, 1]), 2)
        curve = purity_curve(points, truth, [1, 2, 4])
        assert curve == [(1, 0.5), (2, 1.0), (4, 1.0)]

    def test_purity_curve_never_decreases(self, np_rng):
        """Test that refining the Ward hierarchy never lowers purity."""
        points = np_rng.normal(size=(20, 3))
        truth = Labeling.from_values(np_rng.integers(0, 3, 20))
        values = [value for _, value in purity_curve(points, truth, range(1, 21))]
        assert values[-1] == 1.0
        assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))


# ============================================================================
# LOCALIZATION METRICS
# ============================================================================

class TestAuroc:
    """Test AUROC."""

    def test_example(self):
        assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)

    def test_ties_count_half(self):
        assert auroc([0.5, 0.5], [0, 1]) == pytest.approx(0.5)

    def test_matches_pairwise_ranking(self, np_rng):
        for _ in range(100):
            n = int(np_rng.integers(2, 12))
            labels = np.zeros(n, dtype=int)
            labels[np_rng.choice(n, int(np_rng.integers(1, n)), replace=False)] = 1
            scores = np_rng.integers(0, 5, n).astype(float)
            assert auroc(scores, labels) == pytest.approx(pairwise_auroc(scores, labels))

    def test_invariant_to_monotone_transform(self, np_rng):
        scores = np_rng.normal(size=30)
        labels = np_rng.integers(0, 2, 30)
        labels[:2] = [0, 1]
        assert auroc(np.exp(3.0 * scores) + 1.0, labels) == pytest.approx(auroc(scores, labels))

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError):
            auroc([0.1, 0.2], [1, 1])


class TestPro:
    """Test the per-region overlap metric."""

    def test_perfect_detector(self, perfect_map, square_mask):
        assert pro([perfect_map], [square_mask]) == pytest.approx(1.0)

    def test_constant_scores(self, square_mask):
        """Test that a constant map traces the diagonal from the first cut."""
        constant = AnomalyMap(np.full(square_mask.shape, 0.5))
        assert pro([constant], [square_mask]) == pytest.approx(0.15)

    def test_hand_computed_curve(self):
        """Test a 4x4 example with one 2x2 region and three thresholds."""
        scores = np.zeros((4, 4))
        scores[1, 1], scores[1, 2], scores[2, 1], scores[2, 2] = 1.0, 0.8, 0.4, 0.2
        scores[3, 3] = 0.6
        mask = np.zeros((4, 4), dtype=bool)
        mask[1:3, 1:3] = True

        fprs, overlaps = pro_curve([AnomalyMap(scores)], [mask], n_thresholds=3)
        np.testing.assert_allclose(fprs, [0.0, 1 / 12, 1.0])
        np.testing.assert_allclose(overlaps, [0.25, 0.5, 1.0])

        y_cap = 0.5 + 0.5 * (0.3 - 1 / 12) / (1 - 1 / 12)
        area = (0.25 + 0.5) / 2 * (1 / 12) + (0.5 + y_cap) / 2 * (0.3 - 1 / 12)
        value = pro([AnomalyMap(scores)], [mask], n_thresholds=3)
        assert value == pytest.approx(area / 0.3)
        assert value == pytest.approx(0.507955, abs=1e-6)

    def test_regions_weigh_equally(self):
        """Test that a small region counts as much as a large one."""
        mask = np.zeros((10, 10), dtype=bool)
        mask[0:4, 0:4] = True
        mask[8, 8] = True
        scores = np.zeros((10, 10))
        scores[8, 8] = 1.0
        fprs, overlaps = pro_curve([AnomalyMap(scores)], [mask], n_thresholds=2)
        assert overlaps[0] == pytest.approx(0.5)
        assert fprs[0] == 0.0

    def test_diagonal_neighbours_form_one_region(self):
        mask = np.zeros((4, 4), dtype=bool)
        mask[0, 0] = mask[1, 1] = True
        scores = np.zeros((4, 4))
        scores[0, 0] = 1.0
        _, overlaps = pro_curve([AnomalyMap(scores)], [mask], n_thresholds=2)
        assert overlaps[0] == pytest.approx(0.5)

    def test_no_anomalous_pixels(self):
        with pytest.raises(UndefinedMetricError):
            pro([AnomalyMap(np.ones((4, 4)))], [np.zeros((4, 4), dtype=bool)])

    def test_no_normal_pixels(self):
        with pytest.raises(UndefinedMetricError):
            pro([AnomalyMap(np.ones((4, 4)))], [np.ones((4, 4), dtype=bool)])

    def test_mask_shape_mismatch(self, square_mask):
        with pytest.raises(ParameterError):
            pro([AnomalyMap(np.ones((8, 8)))], [square_mask])


class TestEvaluateLocalization:
    """Test the localization report."""

    def test_all_metrics(self, square_mask):
        maps = [AnomalyMap(square_mask.astype(float)), AnomalyMap(np.zeros((16, 16)))]
        masks = [square_mask, np.zeros((16, 16), dtype=bool)]
        metrics, omitted = evaluate_localization(maps, masks, [True, False])
        assert metrics == pytest.approx({'auroc_image': 1.0, 'auroc_pixel': 1.0, 'pro': 1.0})
        assert omitted == {}

    def test_masks_are_center_cropped(self):
        full = np.zeros((10, 10), dtype=bool)
        full[4:6, 4:6] = True
        scores = np.zeros((6, 6))
        scores[2:4, 2:4] = 1.0
        metrics, _ = evaluate_localization([AnomalyMap(scores)], [full], None)
        assert metrics['auroc_pixel'] == pytest.approx(1.0)

    def test_omissions(self):
        metrics, omitted = evaluate_localization([AnomalyMap(np.zeros((4, 4)))], None, None)
        assert metrics == {}
        assert omitted == {'auroc_image': "no labels", 'auroc_pixel': "no masks",
                           'pro': "no masks"}

    def test_single_class_image_labels(self):
        _, omitted = evaluate_localization([AnomalyMap(np.zeros((4, 4)))], None, [True])
        assert 'auroc_image' in omitted

    def test_crop_mask(self):
        mask = np.zeros((10, 10), dtype=bool)
        mask[3, 3] = True
        cropped = crop_mask(mask, (6, 6))
        assert cropped.shape == (6, 6)
        assert cropped[1, 1]
        with pytest.raises(ParameterError):
            crop_mask(mask, (7, 7))


# ============================================================================
# SEGMENTATION AND PERSISTENCE
# ============================================================================

class TestSegmentPixels:
    """Test nearest-center pixel labeling."""

    def test_nearest_center(self):
        data = np.zeros((2, 2, 2))
        data[0, 1] = [9.0, 9.0]
        data[1, 1] = [11.0, 10.0]
        grid = segment_pixels(FeatureMap(data), None, np.array([[0.0, 0.0], [10.0, 10.0]]))
        np.testing.assert_array_equal(grid, [[0, 1], [0, 1]])
        assert grid.dtype == np.int64

    def test_planted_region_takes_anomaly_center(self, tiny_corpus):
        """Test that a held-out mean-shift item is segmented along its planted region."""
        shifted = [item for item in tiny_corpus if item.gt_type == 1]
        normal = [item for item in tiny_corpus if item.gt_type == 0]
        held_out, fitting = shifted[-1], shifted[:-1]

        def prepared(item):
            return prepare_descriptor_features(item.features, 3, 2.0)

        def inside(item):
            fmap = prepared(item)
            return fmap.data[crop_mask(item.gt_mask, (fmap.height, fmap.width))]

        centers = np.vstack([
            np.vstack([prepared(item).pixels() for item in normal]).mean(axis=0),
            np.vstack([inside(item) for item in fitting]).mean(axis=0),
        ])
        fmap = prepared(held_out)
        grid = segment_pixels(fmap, None, centers)
        mask = crop_mask(held_out.gt_mask, grid.shape)
        assert np.mean(grid[mask] == 1) > 0.5
        assert np.mean(grid[~mask] == 0) > 0.5

    def test_dimension_mismatch(self, random_map):
        with pytest.raises(ParameterError):
            segment_pixels(random_map(3, 3, 2), None, np.zeros((2, 3)))

    def test_no_centers(self, random_map):
        with pytest.raises(ParameterError):
            segment_pixels(random_map(3, 3, 2), None, np.zeros((0, 2)))


class TestPersistence:
    """Test labeling and center tables."""

    def test_labeling_round_trip(self, tmp_path):
        labeling = Labeling(np.array([1, 0, 1]), 2)
        ids, loaded = load_labeling(save_labeling(labeling, ["x", "y", "z"], tmp_path / "l.csv"))
        assert ids == ["x", "y", "z"]
        np.testing.assert_array_equal(loaded.labels, labeling.labels)

    def test_labeling_id_count(self, tmp_path):
        with pytest.raises(ParameterError):
            save_labeling(Labeling(np.array([0, 1]), 2), ["x"], tmp_path / "l.csv")

    def test_centers_round_trip(self, tmp_path, np_rng):
        centers = np_rng.normal(size=(3, 4))
        loaded = load_centers(save_centers(centers, tmp_path / "c.csv"))
        np.testing.assert_array_equal(loaded, centers)
