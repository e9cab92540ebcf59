"""
Corpus Module - feature-map ingestion and generation

This module provides:
- The FMAP binary container (load/save) and 8-bit PGM renderings
- A classical filter-bank texture feature extractor
- A synthetic corpus generator with planted, typed anomalies
- Corpus directories on disk (features, masks, labels CSV)
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, List, Sequence, Dict

import numpy as np
import pandas as pd
from scipy import ndimage

from constants import (
    FMAP_MAGIC, FORMAT_VERSION, SyntheticSpec, ParameterError, FormatError,
    DataError, kernel_radius
)
from core import FeatureMap, AnomalyMap, RngState, gaussian_smooth
from utils import ensure_dir, write_table, read_table, write_json, validate_positive

logger = logging.getLogger(__name__)

FMAP_HEADER = struct.Struct('<4sHHIII')
MAX_FMAP_VALUES = 2 ** 40

FEATURES_DIR = "features"
MASKS_DIR = "masks"
LABELS_FILE = "labels.csv"
SPEC_FILE = "spec.json"


# ============================================================================
# CORPUS MODEL
# ============================================================================

@dataclass
class CorpusItem:
    """One image's feature map plus optional evaluation-only ground truth."""
    id: str
    features: FeatureMap
    gt_mask: Optional[np.ndarray] = None
    gt_type: Optional[int] = None

    def __post_init__(self):
        if self.gt_mask is not None:
            mask = np.asarray(self.gt_mask)
            if mask.shape != (self.features.height, self.features.width):
                raise ParameterError(
                    f"{self.id}: mask shape {mask.shape} does not match features "
                    f"{self.features.height}x{self.features.width}")
            self.gt_mask = mask.astype(bool)
        if self.gt_type is not None:
            if self.gt_type < 0:
                raise ParameterError(f"{self.id}: gt_type must be >= 0, got {self.gt_type}")
            if self.gt_mask is not None and (self.gt_type == 0) != (not self.gt_mask.any()):
                raise ParameterError(
                    f"{self.id}: gt_type {self.gt_type} inconsistent with its mask")

    @property
    def is_anomalous(self) -> Optional[bool]:
        if self.gt_type is None:
            return None
        return self.gt_type > 0


@dataclass
class Corpus:
    """Ordered set of images; item order defines the image index."""
    items: List[CorpusItem]
    name: str = "corpus"

    def __post_init__(self):
        if not self.items:
            raise ParameterError("corpus is empty")
        channels = {item.features.channels for item in self.items}
        if len(channels) != 1:
            raise ParameterError(f"corpus items disagree on channel count: {sorted(channels)}")
        ids = [item.id for item in self.items]
        if len(set(ids)) != len(ids):
            raise ParameterError("corpus item ids are not unique")

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, index: int) -> CorpusItem:
        return self.items[index]

    @property
    def channels(self) -> int:
        return self.items[0].features.channels

    @property
    def ids(self) -> List[str]:
        return [item.id for item in self.items]

    @property
    def feature_maps(self) -> List[FeatureMap]:
        return [item.features for item in self.items]

    @property
    def has_labels(self) -> bool:
        return all(item.gt_type is not None for item in self.items)

    @property
    def has_masks(self) -> bool:
        return all(item.gt_mask is not None for item in self.items)

    def gt_types(self) -> Optional[np.ndarray]:
        if not self.has_labels:
            return None
        return np.array([item.gt_type for item in self.items], dtype=np.int64)


# ============================================================================
# FMAP CONTAINER
# ============================================================================

def fmap_to_bytes(fmap: FeatureMap) -> bytes:
    header = FMAP_HEADER.pack(FMAP_MAGIC, FORMAT_VERSION, 0,
                              fmap.height, fmap.width, fmap.channels)
    return header + np.ascontiguousarray(fmap.data, dtype='<f4').tobytes()


def fmap_from_bytes(buffer: bytes) -> FeatureMap:
    """Parse an FMAP container; errors name the offending byte offset."""
    if len(buffer) < FMAP_HEADER.size:
        raise FormatError(
            f"truncated FMAP header: {len(buffer)} of {FMAP_HEADER.size} bytes", offset=len(buffer))
    magic, version, _reserved, height, width, channels = FMAP_HEADER.unpack_from(buffer, 0)
    if magic != FMAP_MAGIC:
        raise FormatError(f"bad FMAP magic {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported FMAP version {version}", offset=4)
    if height == 0 or width == 0 or channels == 0:
        raise FormatError(f"zero FMAP dimension {height}x{width}x{channels}", offset=8)
    count = height * width * channels
    if count > MAX_FMAP_VALUES:
        raise FormatError(f"FMAP dimensions overflow: {height}x{width}x{channels}", offset=8)
    payload = len(buffer) - FMAP_HEADER.size
    if payload != 4 * count:
        raise FormatError(
            f"FMAP payload is {payload} bytes, header declares {4 * count}",
            offset=FMAP_HEADER.size + min(payload, 4 * count))
    values = np.frombuffer(buffer, dtype='<f4', count=count, offset=FMAP_HEADER.size)
    finite = np.isfinite(values)
    if not finite.all():
        first = int(np.argmin(finite))
        raise FormatError("non-finite FMAP value", offset=FMAP_HEADER.size + 4 * first)
    return FeatureMap(values.astype(np.float64).reshape(height, width, channels))


def load_feature_map(path: Path) -> FeatureMap:
    """Read an FMAP file (values promoted to float64)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing feature map: {path}")
    try:
        return fmap_from_bytes(path.read_bytes())
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from e


def save_feature_map(fmap: FeatureMap, path: Path) -> Path:
    """Write an FMAP file (little-endian float32 payload)."""
    path = Path(path)
    path.write_bytes(fmap_to_bytes(fmap))
    return path


def save_grid(grid: np.ndarray, path: Path) -> Path:
    """Write a 2-d grid as a single-channel FMAP."""
    return save_feature_map(FeatureMap(np.asarray(grid, dtype=np.float64)[:, :, None]), path)


def load_grid(path: Path) -> np.ndarray:
    """Read a single-channel FMAP as a 2-d array."""
    fmap = load_feature_map(path)
    if fmap.channels != 1:
        raise FormatError(f"{path}: expected 1 channel, found {fmap.channels}")
    return fmap.data[:, :, 0].copy()


def save_anomaly_map(amap: AnomalyMap, path: Path) -> Path:
    return save_grid(amap.scores, path)


def load_anomaly_map(path: Path) -> AnomalyMap:
    return AnomalyMap(load_grid(path))


def write_pgm(grid: np.ndarray, path: Path, levels: Optional[int] = None) -> Path:
    """
    Write an 8-bit binary PGM.

    Real-valued grids are min-max scaled to 0..255; with `levels` the grid holds
    integer labels 0..levels-1 which are spread evenly over the gray range.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if levels is not None:
        scale = 255.0 / max(levels - 1, 1)
        pixels = np.clip(np.rint(grid * scale), 0, 255)
    else:
        low, high = grid.min(), grid.max()
        pixels = np.zeros_like(grid) if high == low else np.rint((grid - low) / (high - low) * 255)
    height, width = grid.shape
    header = f"P5\n{width} {height}\n255\n".encode('ascii')
    path = Path(path)
    path.write_bytes(header + pixels.astype(np.uint8).tobytes())
    return path


# ============================================================================
# CLASSICAL FEATURE EXTRACTOR
# ============================================================================

def extract_classical_features(image: np.ndarray, scales: Sequence[float]) -> FeatureMap:
    """
    Filter-bank texture features of a grayscale image.

    Four channels per scale: Gaussian-smoothed intensity, x derivative,
    y derivative (central differences of the smoothed image) and Laplacian.

    Args:
        image: 2-d grid with values in [0, 1]
        scales: Gaussian sigmas, one channel group each

    Returns:
        FeatureMap with 4 * len(scales) channels
    """
    scales = list(scales)
    if not scales:
        raise ParameterError("at least one scale is required")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.size == 0:
        raise ParameterError(f"expected a non-empty 2-d image, got shape {image.shape}")
    if not np.all(np.isfinite(image)) or image.min() < 0 or image.max() > 1:
        raise ParameterError("image values must be finite and lie in [0, 1]")

    channels = []
    for sigma in scales:
        validate_positive("scale", sigma)
        smooth = ndimage.gaussian_filter(
            image, sigma=sigma, mode='nearest', radius=kernel_radius(sigma))
        if min(image.shape) >= 2:
            dy, dx = np.gradient(smooth)
        else:
            dy = dx = np.zeros_like(smooth)
        laplacian = ndimage.laplace(smooth, mode='nearest')
        channels.extend([smooth, dx, dy, laplacian])
    logger.debug(f"Extracted {len(channels)} channels at scales {scales}")
    return FeatureMap(np.stack(channels, axis=-1))


# ============================================================================
# SYNTHETIC CORPUS
# ============================================================================

MEAN_SHIFT, VARIANCE_SCALE, CHANNEL_PERMUTATION = 0, 1, 2
PERTURBATION_FAMILIES = {
    MEAN_SHIFT: "mean shift",
    VARIANCE_SCALE: "variance scaling",
    CHANNEL_PERMUTATION: "channel permutation",
}

# Base noise std per channel; perturbation_strength is in units of at most one std
MIN_MODE_STD, MAX_MODE_STD = 0.5, 1.0


def class_counts(spec: SyntheticSpec) -> Dict[int, int]:
    """Number of items per gt_type (0 = normal)."""
    n_normal = int(np.floor(spec.normal_fraction * spec.n_images + 1e-9))
    n_anomalous = spec.n_images - n_normal
    base, extra = divmod(n_anomalous, spec.n_anomaly_types)
    counts = {0: n_normal}
    for anomaly_type in range(1, spec.n_anomaly_types + 1):
        counts[anomaly_type] = base + (1 if anomaly_type <= extra else 0)
    return counts


def _normal_modes(spec: SyntheticSpec, rng: RngState) -> List[Dict[str, np.ndarray]]:
    """Per-channel mean/std profiles; std stays <= MAX_MODE_STD."""
    modes = []
    for _ in range(spec.n_normal_modes):
        modes.append({
            'mean': rng.uniform(-2.0, 2.0, spec.channels),
            'std': rng.uniform(MIN_MODE_STD, MAX_MODE_STD, spec.channels),
        })
    return modes


def _unit_noise(spec: SyntheticSpec, rng: RngState) -> np.ndarray:
    noise = rng.normal((spec.height, spec.width, spec.channels))
    noise = gaussian_smooth(FeatureMap(noise), spec.base_smoothness).data
    noise = noise - noise.mean(axis=(0, 1), keepdims=True)
    std = noise.std(axis=(0, 1), keepdims=True)
    return noise / np.where(std > 0, std, 1.0)


def _ellipse_mask(spec: SyntheticSpec, rng: RngState) -> np.ndarray:
    area = spec.anomaly_area_fraction * spec.height * spec.width
    aspect = rng.uniform(0.5, 1.0)
    semi_major = np.sqrt(area / (np.pi * aspect))
    semi_minor = semi_major * aspect
    angle = rng.uniform(0.0, np.pi)

    def center(size: int) -> int:
        margin = min(spec.edge_margin, (size - 1) // 2)
        return int(rng.integers(margin, size - margin))

    cy, cx = center(spec.height), center(spec.width)
    yy, xx = np.mgrid[0:spec.height, 0:spec.width]
    dy, dx = yy - cy, xx - cx
    u = (dx * np.cos(angle) + dy * np.sin(angle)) / semi_major
    v = (-dx * np.sin(angle) + dy * np.cos(angle)) / semi_minor
    return (u ** 2 + v ** 2) <= 1.0


def _perturb(features: np.ndarray, noise: np.ndarray, mode: Dict[str, np.ndarray],
             mask: np.ndarray, anomaly_type: int, spec: SyntheticSpec) -> np.ndarray:
    family = (anomaly_type - 1) % len(PERTURBATION_FAMILIES)
    cycle = (anomaly_type - 1) // len(PERTURBATION_FAMILIES)
    magnitude = spec.perturbation_strength * (1.0 + 0.5 * cycle)
    out = features.copy()

    if family == CHANNEL_PERMUTATION and spec.channels == 1:
        # a single channel cannot be permuted; shift it downwards instead
        out[mask] -= magnitude
    elif family == MEAN_SHIFT:
        out[mask] += magnitude
    elif family == VARIANCE_SCALE:
        scaled = mode['mean'] + mode['std'] * noise * (1.0 + magnitude)
        out[mask] = scaled[mask]
    else:
        shift = (spec.channels // 2 + cycle) % spec.channels or 1
        permuted = np.roll(features, shift, axis=2)
        out[mask] = permuted[mask]
    return out


def gen_synthetic_corpus(spec: SyntheticSpec, rng: RngState) -> Corpus:
    """
    Generate a labeled corpus of synthetic texture feature maps.

    Each item is smoothed stationary noise drawn from one of the normal mode
    profiles. Anomalous items receive one elliptical region perturbed according
    to their type (mean shift, variance scaling, channel permutation, cycling
    with growing magnitude for further types).

    Args:
        spec: Generation parameters
        rng: Random stream; the corpus is a pure function of (spec, seed)

    Returns:
        Corpus with masks and type labels
    """
    spec.validate()
    counts = class_counts(spec)
    types = np.concatenate([np.full(n, t, dtype=np.int64) for t, n in counts.items()])
    types = types[rng.permutation(spec.n_images)]
    modes = _normal_modes(spec, rng)

    items = []
    for index, anomaly_type in enumerate(types):
        mode = modes[int(rng.integers(0, len(modes)))]
        noise = _unit_noise(spec, rng)
        features = mode['mean'] + mode['std'] * noise
        mask = np.zeros((spec.height, spec.width), dtype=bool)
        if anomaly_type > 0:
            mask = _ellipse_mask(spec, rng)
            features = _perturb(features, noise, mode, mask, int(anomaly_type), spec)
        items.append(CorpusItem(
            id=f"img_{index:04d}",
            features=FeatureMap(features),
            gt_mask=mask,
            gt_type=int(anomaly_type),
        ))

    logger.info(f"✓ Generated synthetic corpus '{spec.name}': {spec.n_images} images, "
                f"class counts {counts}")
    return Corpus(items=items, name=spec.name)


# ============================================================================
# CORPUS DIRECTORIES
# ============================================================================

def save_labels(corpus: Corpus, path: Path) -> Path:
    df = pd.DataFrame({'id': corpus.ids, 'gt_type': [item.gt_type for item in corpus]})
    return write_table(df, path)


def load_labels(path: Path) -> Dict[str, int]:
    df = read_table(path, required=['id', 'gt_type'])
    return {str(row.id): int(row.gt_type) for row in df.itertuples(index=False)}


def save_corpus(corpus: Corpus, out_dir: Path, spec: Optional[SyntheticSpec] = None) -> List[Path]:
    """
    Write a corpus directory: features/<id>.fmap, masks/<id>.fmap, labels.csv.

    Returns:
        List of written files
    """
    out_dir = ensure_dir(out_dir)
    features_dir = ensure_dir(out_dir / FEATURES_DIR)
    written = []
    for item in corpus:
        written.append(save_feature_map(item.features, features_dir / f"{item.id}.fmap"))
    if corpus.has_masks:
        masks_dir = ensure_dir(out_dir / MASKS_DIR)
        for item in corpus:
            written.append(save_grid(item.gt_mask.astype(np.float64), masks_dir / f"{item.id}.fmap"))
    if corpus.has_labels:
        written.append(save_labels(corpus, out_dir / LABELS_FILE))
    if spec is not None:
        written.append(write_json(spec.to_dict(), out_dir / SPEC_FILE))
    logger.info(f"✓ Wrote corpus '{corpus.name}' ({len(corpus)} items) to {out_dir}")
    return written


def load_corpus(corpus_dir: Path, labels_path: Optional[Path] = None,
                with_masks: bool = True) -> Corpus:
    """
    Load a corpus directory; items are ordered by id.

    Args:
        corpus_dir: Directory holding features/ (and optionally masks/)
        labels_path: Optional labels CSV (id,gt_type); evaluation only
        with_masks: Load masks/ when present
    """
    corpus_dir = Path(corpus_dir)
    features_dir = corpus_dir / FEATURES_DIR
    if not features_dir.is_dir():
        raise DataError(f"no features directory in {corpus_dir}")
    paths = sorted(features_dir.glob("*.fmap"))
    if not paths:
        raise DataError(f"no .fmap files in {features_dir}")

    labels = load_labels(labels_path) if labels_path is not None else {}
    if labels:
        unknown = sorted(set(labels) - {p.stem for p in paths})
        if unknown:
            raise DataError(f"labels reference unknown ids: {unknown[:10]}")

    masks_dir = corpus_dir / MASKS_DIR
    items = []
    for path in paths:
        item_id = path.stem
        mask = None
        if with_masks and masks_dir.is_dir() and (masks_dir / path.name).exists():
            mask = load_grid(masks_dir / path.name) > 0.5
        items.append(CorpusItem(
            id=item_id,
            features=load_feature_map(path),
            gt_mask=mask,
            gt_type=labels.get(item_id),
        ))
    logger.info(f"Loaded {len(items)} feature maps from {corpus_dir}")
    return Corpus(items=items, name=corpus_dir.name)
