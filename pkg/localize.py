"""
Blind anomaly localization.

Anomaly maps are the per-pixel contribution to the 1-d optimal transport cost
between each pixel's local (Gaussian-weighted window) distribution and the
image-wide distribution, computed channel by channel on the residual between
the rescaled features and their VAE mean reconstruction.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from constants import (
    FcaConfig, ThresholdEstimate, ImageDescriptor, ParameterError, kernel_radius
)
from core import (
    FeatureMap, AnomalyMap, RngState, gaussian_smooth, crop_border, minmax_rescale,
    stack_pixels
)
from corpus import Corpus, save_anomaly_map, load_anomaly_map, write_pgm
from nets import VaeModel, vae_reconstruct_mean
from cluster_eval import kmeans
from utils import ensure_dir, validate_count, validate_same_length

logger = logging.getLogger(__name__)


# ============================================================================
# RESIDUALS
# ============================================================================

def training_pixels(corpus: Corpus) -> np.ndarray:
    """All pixels of the corpus, each image min-max rescaled per channel."""
    return stack_pixels(corpus.feature_maps, rescale=True)


def vae_residual(features: FeatureMap, model: VaeModel) -> FeatureMap:
    """Rescaled features minus their mean reconstruction."""
    if features.channels != model.in_dim:
        raise ParameterError(
            f"feature map has {features.channels} channels, VAE expects {model.in_dim}")
    recon = vae_reconstruct_mean(model, features)
    return FeatureMap(features.data - recon.data)


# ============================================================================
# SCORER
# ============================================================================

def local_ranks(values: np.ndarray, sigma_p: float) -> np.ndarray:
    """
    Gaussian-weighted rank of every pixel within its window, per channel.

    rank = weighted fraction of window values below the pixel's value plus half
    the weighted ties; the window has radius ceil(3*sigma_p) with edge
    replication at the borders.

    Args:
        values: (H, W, C) array
        sigma_p: Window scale

    Returns:
        (H, W, C) ranks in [0, 1]
    """
    radius = kernel_radius(sigma_p)
    height, width = values.shape[:2]
    padded = np.pad(values, ((radius, radius), (radius, radius), (0, 0)), mode='edge')
    ranks = np.zeros_like(values)
    total = 0.0
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            weight = np.exp(-(dy * dy + dx * dx) / (2.0 * sigma_p * sigma_p))
            shifted = padded[radius + dy:radius + dy + height, radius + dx:radius + dx + width]
            ranks += weight * ((shifted < values) + 0.5 * (shifted == values))
            total += weight
    return ranks / total


def channel_contributions(residual: FeatureMap, config: FcaConfig) -> np.ndarray:
    """
    Per-channel transport contributions (v - Q_c(u))^2 before aggregation.

    Q_c is the linearly interpolated empirical quantile function of channel c
    over the whole map and u the pixel's local weighted rank.
    """
    values = residual.data
    ranks = local_ranks(values, config.sigma_p)
    contributions = np.empty_like(values)
    for c in range(values.shape[2]):
        channel = values[:, :, c]
        matched = np.quantile(channel.ravel(), ranks[:, :, c].ravel(), method='linear')
        contributions[:, :, c] = (channel - matched.reshape(channel.shape)) ** 2
    return contributions


def fca_score(residual: FeatureMap, config: FcaConfig) -> AnomalyMap:
    """
    Score every pixel by its contribution to the local-vs-global Wasserstein cost.

    Channel contributions are summed and the result is smoothed once with
    sigma_s. Constant channels contribute nothing.

    Args:
        residual: Feature residual (or rescaled features)
        config: Window scale sigma_p and smoothing sigma_s

    Returns:
        AnomalyMap with the residual's spatial extent
    """
    config.validate()
    radius = kernel_radius(config.sigma_p)
    if min(residual.height, residual.width) <= 2 * radius:
        raise ParameterError(
            f"{residual.height}x{residual.width} map too small for window radius {radius}")
    scores = channel_contributions(residual, config).sum(axis=2)
    return gaussian_smooth(AnomalyMap(scores), config.sigma_s)


def _localize_one(features: FeatureMap, model: Optional[VaeModel], config: FcaConfig) -> AnomalyMap:
    rescaled = minmax_rescale(features)
    residual = vae_residual(rescaled, model) if model is not None else rescaled
    return crop_border(fca_score(residual, config), config.margin)


def localize(corpus: Corpus, model: Optional[VaeModel], config: FcaConfig,
             threads: int = 1) -> List[AnomalyMap]:
    """
    Anomaly maps for every corpus item.

    Per item: rescale to [0, 1], subtract the VAE mean reconstruction, score,
    crop the unreliable border. With model=None the rescaled features are
    scored directly.

    Args:
        corpus: Input images
        model: VAE trained on this corpus, or None to skip reconstruction
        config: Scorer settings
        threads: Items scored concurrently (results identical to sequential)

    Returns:
        Post-crop anomaly maps in corpus order
    """
    config.validate()
    maps = corpus.feature_maps
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            result = list(pool.map(lambda fmap: _localize_one(fmap, model, config), maps))
    else:
        result = [_localize_one(fmap, model, config) for fmap in maps]
    logger.info(f"✓ Localized {len(result)} images "
                f"({'VAE residual' if model is not None else 'raw features'})")
    return result


def image_score(amap: AnomalyMap) -> float:
    """Image-level score: the maximum pixel score."""
    if amap.scores.size == 0:
        raise ParameterError("cannot score an empty anomaly map")
    return float(amap.scores.max())


# ============================================================================
# THRESHOLD ESTIMATION
# ============================================================================

def score_quantile(image_scores: Sequence[float], normal_ratio: float) -> float:
    """Linearly interpolated normal_ratio-quantile of the image scores."""
    if not 0.0 <= normal_ratio <= 1.0:
        raise ParameterError(f"normal_ratio must lie in [0, 1], got {normal_ratio}")
    scores = np.asarray(image_scores, dtype=np.float64)
    if scores.size == 0:
        raise ParameterError("no image scores")
    return float(np.quantile(scores, normal_ratio, method='linear'))


def estimate_threshold(descriptors: Sequence[ImageDescriptor], image_scores: Sequence[float],
                       n_clusters: int, rng: RngState) -> ThresholdEstimate:
    """
    Unsupervised binarization threshold.

    k-means groups the descriptors; the cluster with the smallest mean image
    score is taken as normal. Its share of the corpus gives the normal ratio
    and t is that quantile (linear interpolation) of the image scores.
    """
    validate_same_length("descriptors", descriptors, "image scores", image_scores)
    validate_count("n_clusters", n_clusters, minimum=2)
    if n_clusters > len(descriptors):
        raise ParameterError(f"n_clusters {n_clusters} exceeds the {len(descriptors)} images")

    points = np.vstack([d.values for d in descriptors])
    scores = np.asarray(image_scores, dtype=np.float64)
    labeling = kmeans(points, n_clusters, rng)
    means = [scores[labeling.labels == c].mean() if np.any(labeling.labels == c) else np.inf
             for c in range(labeling.n_clusters)]
    normal_cluster = int(np.argmin(means))
    normal_ratio = float(np.mean(labeling.labels == normal_cluster))
    t = score_quantile(scores, normal_ratio)
    logger.info(f"✓ Threshold t={t:.6g} (normal ratio {normal_ratio:.3f}, cluster {normal_cluster})")
    return ThresholdEstimate(t=t, normal_ratio=normal_ratio, normal_cluster_index=normal_cluster)


# ============================================================================
# PERSISTENCE
# ============================================================================

def save_anomaly_maps(maps: Sequence[AnomalyMap], ids: Sequence[str], out_dir: Path,
                      render: bool = True) -> List[Path]:
    """Write <id>.fmap (and a min-max scaled <id>.pgm) per map."""
    out_dir = ensure_dir(out_dir)
    written = []
    for item_id, amap in zip(ids, maps):
        written.append(save_anomaly_map(amap, out_dir / f"{item_id}.fmap"))
        if render:
            written.append(write_pgm(amap.scores, out_dir / f"{item_id}.pgm"))
    return written


def load_anomaly_maps(maps_dir: Path, ids: Sequence[str]) -> List[AnomalyMap]:
    maps_dir = Path(maps_dir)
    return [load_anomaly_map(maps_dir / f"{item_id}.fmap") for item_id in ids]
