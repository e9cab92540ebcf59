"""
blindcluster Test Suite

Tests for anomaly localization, contrastive training, clustering, metrics
and the command-line pipeline.
"""

__version__ = "1.0.0"
