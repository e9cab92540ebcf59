"""
Pytest configuration and fixtures for blindcluster tests.
"""

import pytest
import sys
from pathlib import Path

import numpy as np

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from constants import FcaConfig, VaeConfig, ContrastiveConfig, ClusteringConfig, SyntheticSpec
from core import FeatureMap, AnomalyMap, RngState
from corpus import gen_synthetic_corpus, save_corpus
from pipeline import PipelineConfig, PathsConfig, EvaluationConfig


@pytest.fixture
def rng():
    """Seeded random stream."""
    return RngState(1234)


@pytest.fixture
def np_rng():
    """Seeded numpy generator for building test inputs."""
    return np.random.default_rng(2024)


@pytest.fixture(scope="session")
def tiny_spec():
    """Small synthetic corpus: 12 images, 32x32x4, two anomaly types."""
    return SyntheticSpec(
        n_images=12, height=32, width=32, channels=4, n_anomaly_types=2,
        normal_fraction=0.25, anomaly_area_fraction=0.06, perturbation_strength=4.0,
        edge_margin=10, name="tiny",
    )


@pytest.fixture(scope="session")
def tiny_corpus(tiny_spec):
    """Generated corpus with masks and labels (session scoped, read-only)."""
    return gen_synthetic_corpus(tiny_spec, RngState(7))


@pytest.fixture(scope="session")
def tiny_corpus_dir(tmp_path_factory, tiny_corpus, tiny_spec):
    """The tiny corpus written to disk."""
    corpus_dir = tmp_path_factory.mktemp("corpus") / "tiny"
    save_corpus(tiny_corpus, corpus_dir, spec=tiny_spec)
    return corpus_dir


@pytest.fixture
def tiny_fca():
    return FcaConfig(sigma_p=1.0, sigma_s=1.0)


@pytest.fixture
def tiny_vae():
    return VaeConfig(iterations=30, lr=1e-3, weight_decay=0.0, latent_dim=4,
                     batch_size=256, log_every=0)


@pytest.fixture
def tiny_contrastive():
    return ContrastiveConfig(k=2, epochs=1, pairs_per_batch=64, hidden_dim=16)


@pytest.fixture
def tiny_config(tiny_corpus_dir, tmp_path, tiny_fca, tiny_vae, tiny_contrastive):
    """Fast pipeline configuration over the tiny corpus."""
    return PipelineConfig(
        paths=PathsConfig(corpus_dir=tiny_corpus_dir, labels=tiny_corpus_dir / "labels.csv",
                          out_dir=tmp_path / "out"),
        fca=tiny_fca,
        vae=tiny_vae,
        contrastive=tiny_contrastive,
        clustering=ClusteringConfig(n_clusters=3),
        evaluation=EvaluationConfig(purity=True),
        seed=11,
    )


@pytest.fixture
def random_map(np_rng):
    """Factory for random FeatureMaps."""
    def make(height=12, width=12, channels=3):
        return FeatureMap(np_rng.normal(size=(height, width, channels)))
    return make


@pytest.fixture
def square_mask():
    """16x16 mask with one 4x4 anomalous square."""
    mask = np.zeros((16, 16), dtype=bool)
    mask[6:10, 6:10] = True
    return mask


@pytest.fixture
def perfect_map(square_mask):
    """Scores equal to the mask."""
    return AnomalyMap(square_mask.astype(np.float64))
