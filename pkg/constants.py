"""
Blind Anomaly Clustering - Constants and Data Models

Shared constants, the exception hierarchy, configuration dataclasses and small
result containers used across the pipeline.
"""

from dataclasses import dataclass, field, asdict
from typing import Optional, Dict, Any, List
from enum import Enum
from math import ceil

import numpy as np


VERSION = "1.0.0"


# ============================================================
# CONSTANTS & CONFIGURATION
# ============================================================

# File containers
FMAP_MAGIC = b"FMAP"
PNET_MAGIC = b"PNET"
VAEM_MAGIC = b"VAEM"
FORMAT_VERSION = 1

# Localization (FCA scorer)
DEFAULT_SIGMA_P = 3.0
DEFAULT_SIGMA_S = 1.0
KERNEL_TRUNCATE = 3.0  # kernel radius = ceil(3 * sigma)

# Descriptor pooling
DEFAULT_TAU = 0.002
FEATURE_SMOOTH_SIGMA = 2.0

# Feature-space VAE
VAE_ITERATIONS = 10_000
VAE_LEARNING_RATE = 1e-4
VAE_WEIGHT_DECAY = 0.1
VAE_LATENT_DIM = 128
VAE_BATCH_SIZE = 4096
KL_WEIGHT = 1.0

# Contrastive head
HEAD_WIDTH = 512
DEFAULT_K = 3
DEFAULT_MARGIN = 0.5
HEAD_EPOCHS = 10
HEAD_LEARNING_RATE = 5e-4
HEAD_WEIGHT_DECAY = 0.01
PAIRS_PER_BATCH = 1024

# AdamW
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

# Clustering / evaluation
KMEANS_N_INIT = 10
KMEANS_MAX_ITER = 300
PRO_FPR_MAX = 0.3
PRO_N_THRESHOLDS = 200

# Exit codes used by the command-line interface
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def kernel_radius(sigma: float) -> int:
    """Truncation radius of a Gaussian kernel with the given sigma."""
    return int(ceil(KERNEL_TRUNCATE * sigma))


# ============================================================
# EXCEPTIONS
# ============================================================

class BlindClusterError(Exception):
    """Base class for every error raised by the pipeline."""
    exit_code = EXIT_FAILURE


class ParameterError(BlindClusterError, ValueError):
    """Invalid argument or violated precondition."""
    exit_code = EXIT_CONFIG


class ConfigError(ParameterError):
    """Malformed configuration file or out-of-range setting."""


class FormatError(BlindClusterError):
    """Malformed binary container or table."""
    exit_code = EXIT_DATA

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(BlindClusterError):
    """Missing inputs, missing artifacts or mismatched identifiers."""
    exit_code = EXIT_DATA


class NumericError(BlindClusterError, ArithmeticError):
    """Non-finite values where finite ones are required."""
    exit_code = EXIT_NUMERIC


class TrainingError(NumericError):
    """Training diverged or had nothing to learn from."""

    def __init__(self, message: str, iteration: Optional[int] = None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class UndefinedMetricError(BlindClusterError):
    """Metric is undefined for the given inputs."""
    exit_code = EXIT_DATA


class StageError(BlindClusterError):
    """Failure inside a named pipeline stage; keeps the cause's exit code."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, 'exit_code', EXIT_FAILURE)


# ============================================================
# ENUMS
# ============================================================

class Activation(Enum):
    """Per-layer activation of a PixelNet."""
    RELU = "relu"
    NONE = "none"


class ClusterMethod(Enum):
    """Final clustering algorithm."""
    WARD = "ward"
    KMEANS = "kmeans"


# ============================================================
# CONFIGURATION MODELS
# ============================================================

@dataclass
class FcaConfig:
    """Local-vs-global Wasserstein contribution scorer settings."""
    sigma_p: float = DEFAULT_SIGMA_P
    sigma_s: float = DEFAULT_SIGMA_S
    border_margin: Optional[int] = None

    @property
    def margin(self) -> int:
        """Border crop in pixels; defaults to the local window radius."""
        if self.border_margin is None:
            return kernel_radius(self.sigma_p)
        return self.border_margin

    def validate(self) -> 'FcaConfig':
        if not self.sigma_p > 0:
            raise ParameterError(f"fca.sigma_p must be > 0, got {self.sigma_p}")
        if not self.sigma_s >= 0:
            raise ParameterError(f"fca.sigma_s must be >= 0, got {self.sigma_s}")
        if self.border_margin is not None and self.border_margin < 0:
            raise ParameterError(f"fca.border_margin must be >= 0, got {self.border_margin}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class VaeConfig:
    """Feature-space VAE training settings."""
    enabled: bool = True
    iterations: int = VAE_ITERATIONS
    lr: float = VAE_LEARNING_RATE
    weight_decay: float = VAE_WEIGHT_DECAY
    latent_dim: int = VAE_LATENT_DIM
    batch_size: int = VAE_BATCH_SIZE
    kl_weight: float = KL_WEIGHT
    log_every: int = 1000

    def validate(self) -> 'VaeConfig':
        if self.iterations < 0:
            raise ParameterError(f"vae.iterations must be >= 0, got {self.iterations}")
        if not self.lr > 0:
            raise ParameterError(f"vae.lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ParameterError(f"vae.weight_decay must be >= 0, got {self.weight_decay}")
        if self.latent_dim < 1:
            raise ParameterError(f"vae.latent_dim must be >= 1, got {self.latent_dim}")
        if self.batch_size < 1:
            raise ParameterError(f"vae.batch_size must be >= 1, got {self.batch_size}")
        if self.kl_weight < 0:
            raise ParameterError(f"vae.kl_weight must be >= 0, got {self.kl_weight}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class ContrastiveConfig:
    """Projection-head training and descriptor pooling settings."""
    enabled: bool = True
    tau: float = DEFAULT_TAU
    k: int = DEFAULT_K
    margin: float = DEFAULT_MARGIN
    epochs: int = HEAD_EPOCHS
    lr: float = HEAD_LEARNING_RATE
    weight_decay: float = HEAD_WEIGHT_DECAY
    pairs_per_batch: int = PAIRS_PER_BATCH
    feature_smooth_sigma: float = FEATURE_SMOOTH_SIGMA
    hidden_dim: int = HEAD_WIDTH

    def validate(self) -> 'ContrastiveConfig':
        if not self.tau > 0:
            raise ParameterError(f"contrastive.tau must be > 0, got {self.tau}")
        if self.k < 1:
            raise ParameterError(f"contrastive.k must be >= 1, got {self.k}")
        if not 0 < self.margin <= 2:
            raise ParameterError(f"contrastive.margin must lie in (0, 2], got {self.margin}")
        if self.epochs < 0:
            raise ParameterError(f"contrastive.epochs must be >= 0, got {self.epochs}")
        if not self.lr > 0:
            raise ParameterError(f"contrastive.lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ParameterError(f"contrastive.weight_decay must be >= 0, got {self.weight_decay}")
        if self.pairs_per_batch < 4:
            raise ParameterError(f"contrastive.pairs_per_batch must be >= 4, got {self.pairs_per_batch}")
        if self.feature_smooth_sigma < 0:
            raise ParameterError("contrastive.feature_smooth_sigma must be >= 0")
        if self.hidden_dim < 1:
            raise ParameterError(f"contrastive.hidden_dim must be >= 1, got {self.hidden_dim}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class ClusteringConfig:
    """Final clustering settings; n_clusters counts the normal cluster too."""
    method: ClusterMethod = ClusterMethod.WARD
    n_clusters: int = 4

    def validate(self) -> 'ClusteringConfig':
        if self.n_clusters < 2:
            raise ParameterError(f"clustering.n_clusters must be >= 2, got {self.n_clusters}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {'method': self.method.value, 'n_clusters': self.n_clusters}


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic texture-feature corpus."""
    n_images: int = 64
    height: int = 48
    width: int = 48
    channels: int = 8
    n_anomaly_types: int = 3
    normal_fraction: float = 0.25
    anomaly_area_fraction: float = 0.05
    base_smoothness: float = 1.5
    perturbation_strength: float = 3.0
    n_normal_modes: int = 1
    edge_margin: int = 2 * kernel_radius(DEFAULT_SIGMA_P)
    name: str = "synthetic"

    def validate(self) -> 'SyntheticSpec':
        if self.n_images < 1:
            raise ParameterError(f"n_images must be >= 1, got {self.n_images}")
        if self.height < 1 or self.width < 1:
            raise ParameterError(f"image size must be positive, got {self.height}x{self.width}")
        if self.channels < 1:
            raise ParameterError(f"channels must be >= 1, got {self.channels}")
        if self.n_anomaly_types < 1:
            raise ParameterError(f"n_anomaly_types must be >= 1, got {self.n_anomaly_types}")
        if not 0 < self.normal_fraction <= 1:
            raise ParameterError(f"normal_fraction must lie in (0, 1], got {self.normal_fraction}")
        if not 0 < self.anomaly_area_fraction <= 0.25:
            raise ParameterError(
                f"anomaly_area_fraction must lie in (0, 0.25], got {self.anomaly_area_fraction}")
        if not self.base_smoothness > 0:
            raise ParameterError(f"base_smoothness must be > 0, got {self.base_smoothness}")
        if not self.perturbation_strength > 0:
            raise ParameterError(
                f"perturbation_strength must be > 0, got {self.perturbation_strength}")
        if self.n_normal_modes < 1:
            raise ParameterError(f"n_normal_modes must be >= 1, got {self.n_normal_modes}")
        if self.edge_margin < 0:
            raise ParameterError(f"edge_margin must be >= 0, got {self.edge_margin}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# ============================================================
# RESULT MODELS
# ============================================================

@dataclass(frozen=True)
class ThresholdEstimate:
    """Binarization threshold and the normal-image ratio it came from."""
    t: float
    normal_ratio: float
    normal_cluster_index: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            't': self.t,
            'normal_ratio': self.normal_ratio,
            'normal_cluster_index': self.normal_cluster_index,
        }


@dataclass
class ImageDescriptor:
    """Anomaly-weighted pooled feature vector of one image."""
    values: np.ndarray
    image_index: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.values)):
            raise NumericError(f"descriptor of image {self.image_index} has non-finite values")

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass
class TrainingHistory:
    """Loss trace of a training run."""
    losses: List[float] = field(default_factory=list)
    label: str = ""

    @property
    def final_loss(self) -> Optional[float]:
        return self.losses[-1] if self.losses else None
