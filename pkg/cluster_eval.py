"""
Final clustering, unseen-image segmentation and the evaluation metrics.

Clustering: Ward agglomerative (scipy) and k-means (scikit-learn).
Metrics: NMI, ARI, F1 under an optimal cluster-to-label matching, pixel and
image AUROC, PRO up to a false positive rate cap, and purity curves.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.cluster.hierarchy import linkage, cut_tree
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from skimage.measure import label as label_regions
from sklearn.cluster import KMeans
from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score, roc_auc_score

from constants import (
    ImageDescriptor, ParameterError, UndefinedMetricError, KMEANS_N_INIT, KMEANS_MAX_ITER,
    PRO_FPR_MAX, PRO_N_THRESHOLDS
)
from core import FeatureMap, AnomalyMap, RngState
from nets import PixelNet, head_forward
from utils import write_table, read_table, validate_count, validate_same_length

logger = logging.getLogger(__name__)

Points = Union[np.ndarray, Sequence[ImageDescriptor]]


# ============================================================================
# LABELINGS
# ============================================================================

@dataclass
class Labeling:
    """Cluster index per item, 0-based."""
    labels: np.ndarray
    n_clusters: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_clusters):
            raise ParameterError(
                f"labels must lie in [0, {self.n_clusters}), got range "
                f"[{self.labels.min()}, {self.labels.max()}]")

    @classmethod
    def from_values(cls, values: Sequence) -> 'Labeling':
        """Relabel arbitrary values to 0..k-1 in order of first appearance."""
        values = np.asarray(values).ravel()
        _, first, inverse = np.unique(values, return_index=True, return_inverse=True)
        rank = np.empty(len(first), dtype=np.int64)
        rank[np.argsort(first)] = np.arange(len(first))
        return cls(rank[inverse], len(first))

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def canonical(self) -> 'Labeling':
        return Labeling.from_values(self.labels)


@dataclass
class ContingencyTable:
    """counts[i, j] = items with predicted cluster i and true class j."""
    counts: np.ndarray

    @classmethod
    def from_labelings(cls, pred: Labeling, truth: Labeling) -> 'ContingencyTable':
        _check_lengths(pred, truth)
        pred_ids = np.unique(pred.labels, return_inverse=True)[1]
        true_ids = np.unique(truth.labels, return_inverse=True)[1]
        counts = np.zeros((pred_ids.max() + 1, true_ids.max() + 1), dtype=np.int64)
        np.add.at(counts, (pred_ids, true_ids), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _check_lengths(a: Labeling, b: Labeling) -> None:
    validate_same_length("labeling", a.labels, "reference labeling", b.labels)
    if len(a) == 0:
        raise ParameterError("empty labelings")


def _as_points(points: Points) -> np.ndarray:
    if isinstance(points, np.ndarray):
        matrix = np.atleast_2d(np.asarray(points, dtype=np.float64))
    else:
        if not points:
            raise ParameterError("no points to cluster")
        matrix = np.vstack([d.values for d in points])
    if matrix.shape[0] == 0:
        raise ParameterError("no points to cluster")
    return matrix


def _check_cluster_count(n_points: int, n_clusters: int) -> None:
    validate_count("n_clusters", n_clusters)
    if n_clusters > n_points:
        raise ParameterError(f"n_clusters {n_clusters} exceeds the {n_points} points")


# ============================================================================
# CLUSTERING
# ============================================================================

def ward_cluster(points: Points, n_clusters: int) -> Labeling:
    """
    Agglomerative clustering with Ward linkage, cut at n_clusters.

    Args:
        points: (N, d) matrix or descriptors
        n_clusters: Target cluster count (<= N)

    Returns:
        Labeling numbered by first appearance
    """
    matrix = _as_points(points)
    n = matrix.shape[0]
    _check_cluster_count(n, n_clusters)
    if n_clusters == n:
        return Labeling(np.arange(n), n)
    if n_clusters == 1:
        return Labeling(np.zeros(n, dtype=np.int64), 1)
    tree = linkage(matrix, method='ward', metric='euclidean')
    cut = cut_tree(tree, n_clusters=n_clusters).ravel()
    return Labeling.from_values(cut)


def kmeans_fit(points: Points, n_clusters: int, rng: RngState, n_init: int = KMEANS_N_INIT,
               max_iter: int = KMEANS_MAX_ITER) -> Tuple[Labeling, np.ndarray, float]:
    """
    k-means++ seeded Lloyd iterations, best of n_init restarts.

    Returns:
        (labeling, centers (k, d), within-cluster sum of squares)
    """
    matrix = _as_points(points)
    _check_cluster_count(matrix.shape[0], n_clusters)
    model = KMeans(n_clusters=n_clusters, init='k-means++', n_init=n_init, max_iter=max_iter,
                   tol=0.0, random_state=rng.sklearn_seed())
    labels = model.fit_predict(matrix)
    logger.debug(f"k-means: k={n_clusters}, inertia {model.inertia_:.6g}, {model.n_iter_} iterations")
    return Labeling(labels, n_clusters), np.asarray(model.cluster_centers_), float(model.inertia_)


def kmeans(points: Points, n_clusters: int, rng: RngState, n_init: int = KMEANS_N_INIT,
           max_iter: int = KMEANS_MAX_ITER) -> Labeling:
    labeling, _, _ = kmeans_fit(points, n_clusters, rng, n_init, max_iter)
    return labeling


def within_cluster_ss(points: Points, labeling: Labeling) -> float:
    """Sum of squared distances to the cluster means."""
    matrix = _as_points(points)
    total = 0.0
    for c in np.unique(labeling.labels):
        members = matrix[labeling.labels == c]
        total += float(((members - members.mean(axis=0)) ** 2).sum())
    return total


# ============================================================================
# CLUSTERING METRICS
# ============================================================================

def nmi(a: Labeling, b: Labeling) -> float:
    """Mutual information over the arithmetic mean of the entropies."""
    _check_lengths(a, b)
    return float(normalized_mutual_info_score(a.labels, b.labels, average_method='arithmetic'))


def ari(a: Labeling, b: Labeling) -> float:
    _check_lengths(a, b)
    return float(adjusted_rand_score(a.labels, b.labels))


def f1_assignment(pred: Labeling, truth: Labeling) -> float:
    """
    Micro F1 after the optimal one-to-one cluster-to-label matching.

    Unmatched clusters (or classes) contribute nothing, so the value is the
    fraction of items whose cluster is matched to their class.
    """
    table = ContingencyTable.from_labelings(pred, truth)
    rows, cols = linear_sum_assignment(table.counts, maximize=True)
    return float(table.counts[rows, cols].sum() / table.total)


def purity(pred: Labeling, truth: Labeling) -> float:
    """Fraction of items in their cluster's majority class."""
    table = ContingencyTable.from_labelings(pred, truth)
    return float(table.counts.max(axis=1).sum() / table.total)


def purity_curve(points: Points, truth: Labeling,
                 cluster_counts: Sequence[int]) -> List[Tuple[int, float]]:
    """Ward purity for each requested cluster count."""
    matrix = _as_points(points)
    if matrix.shape[0] != len(truth):
        raise ParameterError(f"{matrix.shape[0]} points but {len(truth)} labels")
    return [(int(count), purity(ward_cluster(matrix, int(count)), truth))
            for count in cluster_counts]


# ============================================================================
# LOCALIZATION METRICS
# ============================================================================

def auroc(scores: Sequence[float], labels: Sequence) -> float:
    """Area under the ROC curve (Mann-Whitney statistic, ties count half)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise ParameterError(f"{scores.size} scores but {labels.size} labels")
    if labels.all() or not labels.any():
        raise UndefinedMetricError("AUROC needs both positive and negative items")
    return float(roc_auc_score(labels, scores))


def _regions(masks: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Global region id per pixel (-1 outside any region) and region sizes."""
    ids, offset = [], 0
    for mask in masks:
        regions = label_regions(mask, connectivity=2).ravel().astype(np.int64)
        ids.append(np.where(regions > 0, regions - 1 + offset, -1))
        offset += int(regions.max())
    region_ids = np.concatenate(ids)
    sizes = np.bincount(region_ids[region_ids >= 0], minlength=offset)
    return region_ids, sizes


def pro_curve(score_maps: Sequence[AnomalyMap], gt_masks: Sequence[np.ndarray],
              n_thresholds: int = PRO_N_THRESHOLDS) -> Tuple[np.ndarray, np.ndarray]:
    """
    False positive rate and mean per-region overlap per threshold.

    Thresholds run from the pooled maximum score down to the minimum; a pixel
    is positive when its score is >= the threshold. Regions are the
    8-connected components of each mask.

    Returns:
        (fprs, overlaps) in threshold order
    """
    validate_same_length("score maps", score_maps, "masks", gt_masks)
    validate_count("n_thresholds", n_thresholds, minimum=2)
    masks = []
    for amap, mask in zip(score_maps, gt_masks):
        mask = np.asarray(mask).astype(bool)
        if mask.shape != amap.shape:
            raise ParameterError(f"mask shape {mask.shape} differs from map shape {amap.shape}")
        masks.append(mask)
    flat_masks = np.concatenate([m.ravel() for m in masks])
    if not flat_masks.any():
        raise UndefinedMetricError("PRO needs at least one anomalous pixel")
    if flat_masks.all():
        raise UndefinedMetricError("PRO needs at least one normal pixel")

    scores = np.concatenate([amap.scores.ravel() for amap in score_maps])
    region_ids, sizes = _regions(masks)
    in_region = region_ids >= 0
    normal = ~flat_masks
    thresholds = np.linspace(scores.max(), scores.min(), n_thresholds)

    fprs = np.empty(n_thresholds)
    overlaps = np.empty(n_thresholds)
    for i, th in enumerate(thresholds):
        positive = scores >= th
        hits = np.bincount(region_ids[positive & in_region], minlength=len(sizes))
        overlaps[i] = float(np.mean(hits / sizes))
        fprs[i] = float(np.count_nonzero(positive & normal) / np.count_nonzero(normal))
    return fprs, overlaps


def pro(score_maps: Sequence[AnomalyMap], gt_masks: Sequence[np.ndarray],
        fpr_max: float = PRO_FPR_MAX, n_thresholds: int = PRO_N_THRESHOLDS) -> float:
    """
    Normalized area under the per-region overlap curve up to fpr_max.

    The curve starts at the origin, points are ordered by (fpr, overlap), the
    overlap at fpr_max is linearly interpolated and the trapezoid area is
    divided by fpr_max.

    Args:
        score_maps: Anomaly maps
        gt_masks: Binary masks with the maps' shapes
        fpr_max: False positive rate cap
        n_thresholds: Threshold steps over the pooled score range

    Returns:
        PRO in [0, 1]
    """
    if not 0 < fpr_max <= 1:
        raise ParameterError(f"fpr_max must lie in (0, 1], got {fpr_max}")
    fprs, overlaps = pro_curve(score_maps, gt_masks, n_thresholds)
    fprs = np.concatenate([[0.0], fprs])
    overlaps = np.concatenate([[0.0], overlaps])
    order = np.lexsort((overlaps, fprs))
    fprs, overlaps = fprs[order], overlaps[order]

    keep = fprs <= fpr_max
    x, y = fprs[keep], overlaps[keep]
    beyond = np.flatnonzero(~keep)
    if x[-1] < fpr_max and beyond.size:
        x1, y1 = fprs[beyond[0]], overlaps[beyond[0]]
        y_cap = y[-1] + (y1 - y[-1]) * (fpr_max - x[-1]) / (x1 - x[-1])
        x, y = np.append(x, fpr_max), np.append(y, y_cap)
    return float(np.trapezoid(y, x) / fpr_max)


def crop_mask(mask: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Center-crop a full-resolution mask to a post-crop map shape."""
    mask = np.asarray(mask)
    dh, dw = mask.shape[0] - shape[0], mask.shape[1] - shape[1]
    if (dh, dw) == (0, 0):
        return mask
    if dh < 0 or dh != dw or dh % 2:
        raise ParameterError(f"cannot crop a {mask.shape} mask to {shape}")
    margin = dh // 2
    return mask[margin:mask.shape[0] - margin, margin:mask.shape[1] - margin]


# ============================================================================
# SEGMENTATION
# ============================================================================

def segment_pixels(prepared: FeatureMap, head: Optional[PixelNet],
                   centers: np.ndarray) -> np.ndarray:
    """
    Label every pixel of an unseen image with its nearest cluster center.

    Args:
        prepared: Smoothed, cropped, centered features of the image
        head: Trained projection head, or None to compare prepared features directly
        centers: (k, d) k-means centers of the fitting-set descriptors

    Returns:
        (H, W) int64 grid of center indices
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if centers.size == 0:
        raise ParameterError("no cluster centers")
    embedded = head_forward(head, prepared) if head is not None else prepared
    if embedded.channels != centers.shape[1]:
        raise ParameterError(
            f"pixel embeddings have dimension {embedded.channels}, centers {centers.shape[1]}")
    nearest = np.argmin(cdist(embedded.pixels(), centers), axis=1)
    return nearest.reshape(embedded.height, embedded.width).astype(np.int64)


# ============================================================================
# EVALUATION REPORTS
# ============================================================================

def evaluate_clustering(pred: Labeling, truth: Labeling) -> Dict[str, float]:
    return {
        'nmi': nmi(pred, truth),
        'ari': ari(pred, truth),
        'f1': f1_assignment(pred, truth),
    }


def evaluate_localization(maps: Sequence[AnomalyMap], masks: Optional[Sequence[np.ndarray]],
                          is_anomalous: Optional[Sequence[bool]]
                          ) -> Tuple[Dict[str, float], Dict[str, str]]:
    """
    Pixel AUROC, image AUROC and PRO where defined.

    Masks are center-cropped to the map extent. Metrics that cannot be
    computed are returned in the second dict with a reason.

    Returns:
        (metrics, omitted metric -> reason)
    """
    metrics: Dict[str, float] = {}
    omitted: Dict[str, str] = {}

    if is_anomalous is None:
        omitted['auroc_image'] = "no labels"
    else:
        image_scores = [float(amap.scores.max()) for amap in maps]
        try:
            metrics['auroc_image'] = auroc(image_scores, is_anomalous)
        except UndefinedMetricError as e:
            omitted['auroc_image'] = str(e)

    if masks is None:
        omitted['auroc_pixel'] = "no masks"
        omitted['pro'] = "no masks"
    else:
        cropped = [crop_mask(mask, amap.shape) for amap, mask in zip(maps, masks)]
        try:
            metrics['auroc_pixel'] = auroc(
                np.concatenate([amap.scores.ravel() for amap in maps]),
                np.concatenate([m.ravel() for m in cropped]))
        except UndefinedMetricError as e:
            omitted['auroc_pixel'] = str(e)
        try:
            metrics['pro'] = pro(maps, cropped)
        except UndefinedMetricError as e:
            omitted['pro'] = str(e)

    for name, reason in omitted.items():
        logger.warning(f"Metric {name} omitted: {reason}")
    return metrics, omitted


# ============================================================================
# PERSISTENCE
# ============================================================================

def save_labeling(labeling: Labeling, ids: Sequence[str], path: Path) -> Path:
    validate_same_length("ids", ids, "labels", labeling.labels)
    return write_table(pd.DataFrame({'id': list(ids), 'label': labeling.labels}), path)


def load_labeling(path: Path) -> Tuple[List[str], Labeling]:
    df = read_table(path, required=['id', 'label'])
    labels = df['label'].to_numpy(dtype=np.int64)
    n_clusters = int(labels.max()) + 1 if labels.size else 0
    return [str(v) for v in df['id']], Labeling(labels, n_clusters)


def save_centers(centers: np.ndarray, path: Path) -> Path:
    centers = np.atleast_2d(centers)
    df = pd.DataFrame(centers, columns=[f"c_{j}" for j in range(centers.shape[1])])
    df.insert(0, 'cluster', np.arange(centers.shape[0]))
    return write_table(df, path)


def load_centers(path: Path) -> np.ndarray:
    df = read_table(path, required=['cluster'])
    columns = [col for col in df.columns if col.startswith('c_')]
    return df.sort_values('cluster')[columns].to_numpy(dtype=np.float64)
