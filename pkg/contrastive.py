"""
Anomaly-targeted contrastive learning.

Image descriptors pool features with softmax weights taken from the anomaly
map. Descriptor neighbours and far images define pooled pixel sets, from which
positive and negative pixel pairs are sampled to train the projection head
with a margin contrastive loss.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Sequence, Optional

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

from constants import (
    ContrastiveConfig, ThresholdEstimate, ImageDescriptor, TrainingHistory,
    ParameterError, TrainingError
)
from core import (
    FeatureMap, AnomalyMap, RngState, gaussian_smooth, crop_border, mean_center,
    check_same_extent
)
from nets import (
    PixelNet, AdamWState, init_head, head_forward, l2_normalize, l2_normalize_backward,
    adamw_step
)
from utils import write_table, read_table, validate_positive, validate_count, validate_same_length

logger = logging.getLogger(__name__)


# ============================================================================
# DESCRIPTORS
# ============================================================================

def prepare_descriptor_features(features: FeatureMap, margin: int,
                                smooth_sigma: float) -> FeatureMap:
    """Smooth, crop to the anomaly-map extent and mean-center raw features."""
    smoothed = gaussian_smooth(features, smooth_sigma)
    return mean_center(crop_border(smoothed, margin))


def softmax_weights(anomaly: AnomalyMap, tau: float) -> np.ndarray:
    """exp(A / tau) normalized over the map, computed with max subtraction."""
    validate_positive("tau", tau)
    logits = anomaly.scores / tau
    weights = np.exp(logits - logits.max())
    return weights / weights.sum()


def compute_descriptor(features: FeatureMap, anomaly: AnomalyMap, tau: float,
                       image_index: int = 0) -> ImageDescriptor:
    """
    Anomaly-weighted pooled feature.

    Args:
        features: Prepared (smoothed, cropped, centered) features or embeddings
        anomaly: Post-crop anomaly map with the same extent
        tau: Softmax temperature

    Returns:
        ImageDescriptor of dimension features.channels
    """
    check_same_extent(features, anomaly, "descriptor")
    weights = softmax_weights(anomaly, tau)
    values = np.tensordot(weights, features.data, axes=([0, 1], [0, 1]))
    return ImageDescriptor(values=values, image_index=image_index)


def descriptor_matrix(descriptors: Sequence[ImageDescriptor]) -> np.ndarray:
    if not descriptors:
        raise ParameterError("no descriptors")
    return np.vstack([d.values for d in descriptors])


def raw_descriptors(prepared: Sequence[FeatureMap], anomaly_maps: Sequence[AnomalyMap],
                    tau: float) -> List[ImageDescriptor]:
    """Descriptors pooled directly from prepared features."""
    return [compute_descriptor(fmap, amap, tau, i)
            for i, (fmap, amap) in enumerate(zip(prepared, anomaly_maps))]


def embed_descriptors(prepared: Sequence[FeatureMap], anomaly_maps: Sequence[AnomalyMap],
                      head: PixelNet, tau: float) -> List[ImageDescriptor]:
    """Descriptors pooled from the head's unit-norm embeddings (no re-smoothing)."""
    return [compute_descriptor(head_forward(head, fmap), amap, tau, i)
            for i, (fmap, amap) in enumerate(zip(prepared, anomaly_maps))]


def save_descriptors(descriptors: Sequence[ImageDescriptor], ids: Sequence[str],
                     path: Path) -> Path:
    matrix = descriptor_matrix(descriptors)
    df = pd.DataFrame(matrix, columns=[f"d_{j}" for j in range(matrix.shape[1])])
    df.insert(0, 'image_id', list(ids))
    return write_table(df, path)


def load_descriptors(path: Path) -> Tuple[List[str], List[ImageDescriptor]]:
    df = read_table(path, required=['image_id'])
    columns = [col for col in df.columns if col.startswith('d_')]
    matrix = df[columns].to_numpy(dtype=np.float64)
    ids = [str(v) for v in df['image_id']]
    return ids, [ImageDescriptor(values=row, image_index=i) for i, row in enumerate(matrix)]


# ============================================================================
# NEIGHBOUR MINING
# ============================================================================

def mine_neighbors(descriptors: Sequence[ImageDescriptor], k: int,
                   rng: RngState) -> Tuple[List[List[int]], List[List[int]]]:
    """
    k nearest neighbours and k sampled far images per descriptor.

    Neighbours are the k smallest Euclidean distances (self excluded, ties to
    the lower index). Far images are sampled without replacement among the
    images at or beyond the median distance, excluding the neighbours.

    Returns:
        (neighbor lists, far lists)
    """
    n = len(descriptors)
    validate_count("k", k)
    if n <= 2 * k:
        raise ParameterError(f"need more than {2 * k} images to mine {k} neighbours, got {n}")
    points = descriptor_matrix(descriptors)
    distances = cdist(points, points)
    indices = np.arange(n)

    neighbors, far = [], []
    for i in range(n):
        others = indices[indices != i]
        d = distances[i, others]
        order = np.lexsort((others, d))
        nearest = [int(j) for j in others[order[:k]]]
        median = np.median(d)
        candidates = [int(j) for j in others[d >= median] if j not in nearest]
        if len(candidates) < k:
            remaining = [int(j) for j in others[order[::-1]] if j not in nearest]
            candidates = remaining[:k]
        sampled = rng.choice(np.array(candidates), size=k, replace=False)
        neighbors.append(nearest)
        far.append([int(j) for j in sampled])
    return neighbors, far


# ============================================================================
# PAIR SETS
# ============================================================================

def partition_indices(anomaly: AnomalyMap, t: float) -> Tuple[np.ndarray, np.ndarray]:
    """Flat pixel indices with score > t, and the rest."""
    flat = anomaly.scores.ravel()
    return np.flatnonzero(flat > t), np.flatnonzero(~(flat > t))


def partition_features(embedded: FeatureMap, anomaly: AnomalyMap,
                       t: float) -> Tuple[np.ndarray, np.ndarray]:
    """Split pixel vectors into anomalous (score > t) and normal sets."""
    check_same_extent(embedded, anomaly, "partition")
    anomalous, normal = partition_indices(anomaly, t)
    pixels = embedded.pixels()
    return pixels[anomalous], pixels[normal]


@dataclass
class PixelPool:
    """Pixel references (image index, flat pixel index) drawn from several images."""
    images: np.ndarray
    pixels: np.ndarray

    @classmethod
    def gather(cls, members: Sequence[int], sets: Sequence[np.ndarray]) -> 'PixelPool':
        images = [np.full(len(sets[j]), j, dtype=np.int64) for j in members]
        pixels = [sets[j] for j in members]
        if not images:
            return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
        return cls(np.concatenate(images), np.concatenate(pixels))

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def sample(self, count: int, rng: RngState) -> 'PixelPool':
        picks = rng.integers(0, len(self), count)
        return PixelPool(self.images[picks], self.pixels[picks])


@dataclass
class PairSets:
    """Per-image anomalous/normal pixel sets with frozen neighbour lists."""
    anomalous: List[np.ndarray]
    normal: List[np.ndarray]
    neighbors: List[List[int]]
    far: List[List[int]]

    def __len__(self) -> int:
        return len(self.anomalous)

    def k_i(self, i: int) -> int:
        return int(len(self.anomalous[i]))

    def s(self, i: int) -> PixelPool:
        return PixelPool.gather([i], self.anomalous)

    def s_bar(self, i: int) -> PixelPool:
        return PixelPool.gather([i], self.normal)

    def p(self, i: int) -> PixelPool:
        return PixelPool.gather([i] + self.neighbors[i], self.anomalous)

    def p_bar(self, i: int) -> PixelPool:
        return PixelPool.gather([i] + self.neighbors[i], self.normal)

    def c(self, i: int) -> PixelPool:
        return PixelPool.gather(self.far[i], self.anomalous)

    def families(self, i: int) -> List[Tuple[str, PixelPool, PixelPool, bool]]:
        """(name, left, right, positive) for the four pair families of image i."""
        s, p = self.s(i), self.p(i)
        return [
            ('S x P', s, p, True),
            ('S_bar x P_bar', self.s_bar(i), self.p_bar(i), True),
            ('S x P_bar', s, self.p_bar(i), False),
            ('P x C', p, self.c(i), False),
        ]


def build_pair_sets(anomaly_maps: Sequence[AnomalyMap], t: float,
                    neighbors: List[List[int]], far: List[List[int]]) -> PairSets:
    anomalous, normal = [], []
    for amap in anomaly_maps:
        s, s_bar = partition_indices(amap, t)
        anomalous.append(s)
        normal.append(s_bar)
    return PairSets(anomalous, normal, neighbors, far)


# ============================================================================
# LOSS
# ============================================================================

def hadsell_loss(e1: np.ndarray, e2: np.ndarray, positive: bool,
                 margin: float) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Margin contrastive loss of one pair.

    positive: d^2 / 2; negative: max(0, margin - d)^2 / 2 with d = |e1 - e2|.
    The negative-pair gradient is zero when the hinge is inactive or d = 0.

    Returns:
        (loss, gradient wrt e1, gradient wrt e2)
    """
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    loss, grad = hadsell_loss_batch(e1[None, :], e2[None, :], np.array([positive]), margin,
                                    reduce=False)
    return float(loss[0]), grad[0], -grad[0]


def hadsell_loss_batch(left: np.ndarray, right: np.ndarray, positive: np.ndarray,
                       margin: float, reduce: bool = True):
    """
    Batched margin loss.

    Returns:
        (mean loss, gradient wrt left) if reduce, else (per-pair losses,
        per-pair gradients wrt left); the gradient wrt right is its negation.
    """
    diff = left - right
    d = np.linalg.norm(diff, axis=1)
    positive = np.asarray(positive, dtype=bool)
    hinge = np.maximum(margin - d, 0.0)
    losses = np.where(positive, 0.5 * d * d, 0.5 * hinge * hinge)
    safe_d = np.where(d > 0, d, 1.0)
    negative_scale = np.where((hinge > 0) & (d > 0), -hinge / safe_d, 0.0)
    scale = np.where(positive, 1.0, negative_scale)
    grads = scale[:, None] * diff
    if not reduce:
        return losses, grads
    n = left.shape[0]
    return float(losses.mean()), grads / n


# ============================================================================
# TRAINING
# ============================================================================

def _quotas(total: int, n_active: int) -> List[int]:
    base, extra = divmod(total, n_active)
    return [base + (1 if i < extra else 0) for i in range(n_active)]


def train_head(prepared: Sequence[FeatureMap], anomaly_maps: Sequence[AnomalyMap],
               threshold: ThresholdEstimate, config: ContrastiveConfig, rng: RngState,
               neighbors: Optional[Tuple[List[List[int]], List[List[int]]]] = None,
               history: Optional[TrainingHistory] = None) -> PixelNet:
    """
    Train the projection head on pixel pairs mined from the anomaly maps.

    Per epoch, images are visited in shuffled order; for each image a batch of
    pairs_per_batch pairs is split evenly over the families with non-empty
    operands (positives S x P and S_bar x P_bar, negatives S x P_bar and
    P x C), and one AdamW step is taken.

    Args:
        prepared: Smoothed, cropped, centered features per image
        anomaly_maps: Post-crop anomaly maps aligned with `prepared`
        threshold: Binarization threshold
        config: Loss margin, k, epochs, optimizer settings
        rng: Random stream
        neighbors: Precomputed (neighbor, far) lists; mined from raw descriptors if None
        history: Receives the mean loss per epoch

    Returns:
        The trained head
    """
    config.validate()
    validate_same_length("feature maps", prepared, "anomaly maps", anomaly_maps)
    for fmap, amap in zip(prepared, anomaly_maps):
        check_same_extent(fmap, amap, "train_head")

    if neighbors is None:
        neighbors = mine_neighbors(raw_descriptors(prepared, anomaly_maps, config.tau),
                                   config.k, rng)
    pair_sets = build_pair_sets(anomaly_maps, threshold.t, *neighbors)
    if sum(pair_sets.k_i(i) for i in range(len(pair_sets))) == 0:
        raise TrainingError(
            f"no pixel exceeds the threshold t={threshold.t:.6g} in any image; "
            "inspect the threshold before training the head")

    head = init_head(prepared[0].channels, config.hidden_dim, rng)
    if config.epochs == 0:
        return head

    bank = PixelBank(prepared)
    state = AdamWState.for_parameters(head.parameters(), config.lr, config.weight_decay)
    logger.info(f"Training head: {len(prepared)} images, {config.epochs} epochs, "
                f"{config.pairs_per_batch} pairs per step")
    for epoch in range(config.epochs):
        losses = []
        for i in rng.permutation(len(prepared)):
            active = [(a, b, pos) for _name, a, b, pos in pair_sets.families(int(i))
                      if len(a) and len(b)]
            if not active:
                logger.debug(f"image {i}: no pair family available, skipped")
                continue
            lefts, rights, signs = [], [], []
            for (a, b, pos), quota in zip(active, _quotas(config.pairs_per_batch, len(active))):
                lefts.append(a.sample(quota, rng))
                rights.append(b.sample(quota, rng))
                signs.append(np.full(quota, pos, dtype=bool))
            head, loss = _train_step(head, state, bank.rows(lefts), bank.rows(rights),
                                     np.concatenate(signs), config.margin)
            losses.append(loss)
        epoch_loss = float(np.mean(losses)) if losses else float('nan')
        if history is not None:
            history.losses.append(epoch_loss)
        logger.info(f"  head epoch {epoch + 1}/{config.epochs}: mean pair loss {epoch_loss:.6f}")
    logger.info("✓ Head trained")
    return head


class PixelBank:
    """All prepared pixel vectors in one matrix, addressed by (image, pixel)."""

    def __init__(self, prepared: Sequence[FeatureMap]):
        blocks = [fmap.pixels() for fmap in prepared]
        self.matrix = np.vstack(blocks)
        self.offsets = np.concatenate([[0], np.cumsum([len(b) for b in blocks])[:-1]])

    def rows(self, pools: Sequence[PixelPool]) -> np.ndarray:
        images = np.concatenate([p.images for p in pools])
        pixels = np.concatenate([p.pixels for p in pools])
        return self.matrix[self.offsets[images] + pixels]


def _train_step(head: PixelNet, state: AdamWState, x_left: np.ndarray, x_right: np.ndarray,
                positive: np.ndarray, margin: float) -> Tuple[PixelNet, float]:
    n = x_left.shape[0]
    out, cache = head.forward_cached(np.vstack([x_left, x_right]))
    embedded, norms = l2_normalize(out)
    loss, grad_left = hadsell_loss_batch(embedded[:n], embedded[n:], positive, margin)
    grad_out = l2_normalize_backward(embedded, norms, np.vstack([grad_left, -grad_left]))
    grads, _ = head.backward(cache, grad_out)
    params = adamw_step(state, head.parameters(), grads)
    return head.with_parameters(params), loss
