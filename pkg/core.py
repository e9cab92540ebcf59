"""
Core grid containers and shared numerical primitives.

FeatureMap and AnomalyMap wrap read-only float64 numpy arrays. The primitives
(Gaussian smoothing, border cropping, per-channel rescaling and centering) are
pure functions used by every other stage of the pipeline.
"""

import logging
from dataclasses import dataclass
from typing import Union, Sequence, Optional

import numpy as np
from scipy import ndimage

from constants import ParameterError, NumericError, kernel_radius

logger = logging.getLogger(__name__)


# ============================================================================
# GRID CONTAINERS
# ============================================================================

def _frozen_array(values, ndim: int, what: str) -> np.ndarray:
    array = np.array(values, dtype=np.float64, copy=True, order='C')
    if array.ndim != ndim:
        raise ParameterError(f"{what} expects a {ndim}-d array, got shape {array.shape}")
    if any(dim < 1 for dim in array.shape):
        raise ParameterError(f"{what} dimensions must be >= 1, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise NumericError(f"{what} contains non-finite values")
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Dense H x W x C grid of feature vectors, stored row-major as (y, x, c)."""
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'data', _frozen_array(self.data, 3, "FeatureMap"))

    @classmethod
    def from_values(cls, height: int, width: int, channels: int,
                    values: Sequence[float]) -> 'FeatureMap':
        """Build a map from a flat row-major value sequence."""
        flat = np.asarray(values, dtype=np.float64).ravel()
        if flat.size != height * width * channels:
            raise ParameterError(
                f"expected {height * width * channels} values, got {flat.size}")
        return cls(flat.reshape(height, width, channels))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def pixels(self) -> np.ndarray:
        """Pixel vectors as an (H*W, C) array."""
        return self.data.reshape(-1, self.channels)

    def channel(self, c: int) -> np.ndarray:
        return self.data[:, :, c]

    def __eq__(self, other) -> bool:
        return isinstance(other, FeatureMap) and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class AnomalyMap:
    """Per-pixel anomaly scores, higher means more anomalous."""
    scores: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'scores', _frozen_array(self.scores, 2, "AnomalyMap"))

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]

    @property
    def shape(self):
        return self.scores.shape

    def __eq__(self, other) -> bool:
        return isinstance(other, AnomalyMap) and np.array_equal(self.scores, other.scores)


Grid = Union[FeatureMap, AnomalyMap]


def _raw(grid: Grid) -> np.ndarray:
    if isinstance(grid, FeatureMap):
        return grid.data
    if isinstance(grid, AnomalyMap):
        return grid.scores
    raise ParameterError(f"expected FeatureMap or AnomalyMap, got {type(grid).__name__}")


def _like(grid: Grid, values: np.ndarray) -> Grid:
    return FeatureMap(values) if isinstance(grid, FeatureMap) else AnomalyMap(values)


# ============================================================================
# SEEDED RANDOMNESS
# ============================================================================

class RngState:
    """
    Seeded random stream (PCG64).

    Identical seeds give identical draw sequences. Independent sub-streams for
    pipeline stages are derived with child(), which does not advance this stream.
    """

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2 ** 64:
            raise ParameterError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self._sequence = np.random.SeedSequence(self.seed)
        self.generator = np.random.Generator(np.random.PCG64(self._sequence))

    def child(self, stream: int) -> 'RngState':
        """Deterministic independent stream keyed by (seed, stream)."""
        mixed = np.random.SeedSequence([self.seed, int(stream)]).generate_state(2, np.uint64)
        return RngState(int(mixed[0]))

    def normal(self, size) -> np.ndarray:
        return self.generator.standard_normal(size)

    def uniform(self, low: float, high: float, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size)

    def choice(self, values, size: int, replace: bool = True) -> np.ndarray:
        return self.generator.choice(values, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def sklearn_seed(self) -> int:
        """Integer seed for libraries that take a random_state."""
        return int(self.generator.integers(0, 2 ** 31 - 1))

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed})"


# ============================================================================
# PRIMITIVES
# ============================================================================

def gaussian_smooth(grid: Grid, sigma: float) -> Grid:
    """
    Separable Gaussian smoothing over the spatial axes.

    Kernel radius is ceil(3*sigma), weights sum to 1, borders use edge
    replication. FeatureMaps are smoothed channel by channel.

    Args:
        grid: FeatureMap or AnomalyMap
        sigma: Standard deviation in pixels (0 returns the input)

    Returns:
        Grid of the same type and shape
    """
    if not np.isfinite(sigma) or sigma < 0:
        raise ParameterError(f"sigma must be finite and >= 0, got {sigma}")
    values = _raw(grid)
    if sigma == 0:
        return grid
    smoothed = ndimage.gaussian_filter(
        values, sigma=sigma, mode='nearest', radius=kernel_radius(sigma), axes=(0, 1))
    return _like(grid, smoothed)


def crop_border(grid: Grid, margin: int) -> Grid:
    """Drop `margin` pixels from every edge."""
    values = _raw(grid)
    if margin < 0:
        raise ParameterError(f"margin must be >= 0, got {margin}")
    height, width = values.shape[:2]
    if 2 * margin >= min(height, width):
        raise ParameterError(
            f"margin {margin} too large for a {height}x{width} grid")
    if margin == 0:
        return grid
    return _like(grid, values[margin:height - margin, margin:width - margin])


def minmax_rescale(fmap: FeatureMap) -> FeatureMap:
    """Rescale every channel to [0, 1]; constant channels become zero."""
    data = fmap.data
    low = data.min(axis=(0, 1), keepdims=True)
    span = data.max(axis=(0, 1), keepdims=True) - low
    safe_span = np.where(span > 0, span, 1.0)
    rescaled = np.where(span > 0, (data - low) / safe_span, 0.0)
    return FeatureMap(rescaled)


def mean_center(fmap: FeatureMap) -> FeatureMap:
    """Subtract each channel's spatial mean."""
    data = fmap.data
    return FeatureMap(data - data.mean(axis=(0, 1), keepdims=True))


def stack_pixels(maps: Sequence[FeatureMap], rescale: bool = False) -> np.ndarray:
    """Pool pixel vectors of several maps into one (P, C) array."""
    if not maps:
        raise ParameterError("no feature maps to pool")
    blocks = [(minmax_rescale(m) if rescale else m).pixels() for m in maps]
    return np.vstack(blocks)


def check_same_extent(a: Grid, b: Grid, what: Optional[str] = None) -> None:
    """Raise ParameterError unless both grids share height and width."""
    shape_a, shape_b = _raw(a).shape[:2], _raw(b).shape[:2]
    if shape_a != shape_b:
        label = f"{what}: " if what else ""
        raise ParameterError(f"{label}spatial extents differ: {shape_a} vs {shape_b}")
