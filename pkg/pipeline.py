"""
Pipeline Module - configuration, stage orchestration and run manifests

Stages run in order: train_vae -> localize -> descriptors -> threshold ->
train_head -> cluster -> evaluate. Every stage persists its artifacts into
the output directory so stages can also be rerun one at a time.
"""

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from constants import (
    VERSION, FcaConfig, VaeConfig, ContrastiveConfig, ClusteringConfig, SyntheticSpec,
    ClusterMethod, ThresholdEstimate, TrainingHistory, ImageDescriptor,
    BlindClusterError, ParameterError, ConfigError, DataError, FormatError, StageError
)
from core import FeatureMap, AnomalyMap, RngState
from corpus import (
    Corpus, gen_synthetic_corpus, save_corpus, load_corpus, load_grid,
    save_grid, load_feature_map, save_feature_map, extract_classical_features, write_pgm,
    LABELS_FILE
)
from nets import VaeModel, PixelNet, train_vae, save_vae, load_vae, save_pixel_net, load_pixel_net
from localize import (
    training_pixels, localize, image_score, estimate_threshold, save_anomaly_maps,
    load_anomaly_maps
)
from contrastive import (
    prepare_descriptor_features, raw_descriptors, embed_descriptors, mine_neighbors,
    train_head, save_descriptors, load_descriptors
)
from cluster_eval import (
    Labeling, ward_cluster, kmeans_fit, evaluate_clustering, evaluate_localization,
    purity_curve, nmi, segment_pixels, save_labeling, load_labeling, save_centers,
    load_centers
)
from utils import (
    ensure_dir, write_json, read_json, read_table, parse_bool, parse_int, parse_float,
    parse_float_list, parse_int_list, StageTimer
)

logger = logging.getLogger(__name__)


# ============================================================================
# ARTIFACT NAMES
# ============================================================================

VAE_FILE = "vae.vaem"
HEAD_FILE = "head.pnet"
CENTERS_FILE = "centers.csv"
MAPS_DIR = "maps"
RAW_DESCRIPTORS_FILE = "descriptors_raw.csv"
DESCRIPTORS_FILE = "descriptors.csv"
THRESHOLD_FILE = "threshold.json"
LABELING_FILE = "labeling.csv"
METRICS_FILE = "metrics.json"
MANIFEST_FILE = "manifest.json"

# Independent random streams per stage
STREAM_VAE = 1
STREAM_THRESHOLD = 2
STREAM_HEAD = 3
STREAM_CLUSTER = 4

DEFAULT_SWEEP_SEEDS = [0, 1, 2, 3, 4]


# ============================================================================
# CONFIGURATION
# ============================================================================

@dataclass
class PathsConfig:
    """Input and output locations."""
    corpus_dir: Optional[Path] = None
    labels: Optional[Path] = None
    out_dir: Path = Path("out")

    def validate(self) -> 'PathsConfig':
        if self.corpus_dir is not None and not Path(self.corpus_dir).is_dir():
            raise ConfigError(f"paths.corpus_dir does not exist: {self.corpus_dir}")
        if self.labels is not None and not Path(self.labels).is_file():
            raise ConfigError(f"paths.labels does not exist: {self.labels}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            'corpus_dir': str(self.corpus_dir) if self.corpus_dir is not None else None,
            'labels': str(self.labels) if self.labels is not None else None,
            'out_dir': str(self.out_dir),
        }


@dataclass
class EvaluationConfig:
    """Optional reports computed when ground truth is available."""
    purity: bool = True
    tau_sweep: Optional[List[float]] = None
    sweep_seeds: List[int] = field(default_factory=lambda: list(DEFAULT_SWEEP_SEEDS))

    def validate(self) -> 'EvaluationConfig':
        if self.tau_sweep is not None and any(not tau > 0 for tau in self.tau_sweep):
            raise ConfigError(f"evaluation.tau_sweep values must be > 0, got {self.tau_sweep}")
        if not self.sweep_seeds:
            raise ConfigError("evaluation.sweep_seeds must not be empty")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {'purity': self.purity, 'tau_sweep': self.tau_sweep,
                'sweep_seeds': list(self.sweep_seeds)}


@dataclass
class PipelineConfig:
    """Everything a run depends on."""
    paths: PathsConfig = field(default_factory=PathsConfig)
    fca: FcaConfig = field(default_factory=FcaConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    seed: int = 0
    threads: int = 1
    threshold: Optional[float] = None

    def validate(self) -> 'PipelineConfig':
        try:
            self.fca.validate()
            self.vae.validate()
            self.contrastive.validate()
            self.clustering.validate()
        except ConfigError:
            raise
        except ParameterError as e:
            raise ConfigError(str(e)) from e
        self.paths.validate()
        self.evaluation.validate()
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.threshold is not None and not math.isfinite(self.threshold):
            raise ConfigError(f"threshold must be finite, got {self.threshold}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        """Snapshot of every setting that affects the artifacts."""
        return {
            'paths': self.paths.to_dict(),
            'fca': self.fca.to_dict(),
            'vae': self.vae.to_dict(),
            'contrastive': self.contrastive.to_dict(),
            'clustering': self.clustering.to_dict(),
            'evaluation': self.evaluation.to_dict(),
            'seed': self.seed,
            'threshold': self.threshold,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'PipelineConfig':
        """Rebuild a configuration from a manifest snapshot."""
        try:
            paths = data.get('paths', {})
            clustering = dict(data.get('clustering', {}))
            if 'method' in clustering:
                clustering['method'] = ClusterMethod(clustering['method'])
            return cls(
                paths=PathsConfig(
                    corpus_dir=Path(paths['corpus_dir']) if paths.get('corpus_dir') else None,
                    labels=Path(paths['labels']) if paths.get('labels') else None,
                    out_dir=Path(paths.get('out_dir', 'out')),
                ),
                fca=FcaConfig(**data.get('fca', {})),
                vae=VaeConfig(**data.get('vae', {})),
                contrastive=ContrastiveConfig(**data.get('contrastive', {})),
                clustering=ClusteringConfig(**clustering),
                evaluation=EvaluationConfig(**data.get('evaluation', {})),
                seed=int(data.get('seed', 0)),
                threshold=data.get('threshold'),
            )
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(f"invalid configuration snapshot: {e}") from e


def _parse_method(text: str) -> ClusterMethod:
    try:
        return ClusterMethod(text.strip().lower())
    except ValueError:
        raise ParameterError(f"clustering.method must be one of "
                             f"{[m.value for m in ClusterMethod]}, got {text!r}")


def _parse_optional_int(text: str) -> Optional[int]:
    return None if text.strip().lower() in ('', 'none', 'auto') else parse_int(text)


# key -> (section attribute or None for top level, field name, parser)
CONFIG_KEYS: Dict[str, Tuple[Optional[str], str, Callable[[str], Any]]] = {
    'paths.corpus_dir': ('paths', 'corpus_dir', Path),
    'paths.labels': ('paths', 'labels', Path),
    'paths.out_dir': ('paths', 'out_dir', Path),
    'fca.sigma_p': ('fca', 'sigma_p', parse_float),
    'fca.sigma_s': ('fca', 'sigma_s', parse_float),
    'fca.border_margin': ('fca', 'border_margin', _parse_optional_int),
    'vae.enabled': ('vae', 'enabled', parse_bool),
    'vae.iterations': ('vae', 'iterations', parse_int),
    'vae.lr': ('vae', 'lr', parse_float),
    'vae.weight_decay': ('vae', 'weight_decay', parse_float),
    'vae.latent_dim': ('vae', 'latent_dim', parse_int),
    'vae.batch_size': ('vae', 'batch_size', parse_int),
    'vae.kl_weight': ('vae', 'kl_weight', parse_float),
    'vae.log_every': ('vae', 'log_every', parse_int),
    'contrastive.enabled': ('contrastive', 'enabled', parse_bool),
    'contrastive.tau': ('contrastive', 'tau', parse_float),
    'contrastive.k': ('contrastive', 'k', parse_int),
    'contrastive.margin': ('contrastive', 'margin', parse_float),
    'contrastive.epochs': ('contrastive', 'epochs', parse_int),
    'contrastive.lr': ('contrastive', 'lr', parse_float),
    'contrastive.weight_decay': ('contrastive', 'weight_decay', parse_float),
    'contrastive.pairs_per_batch': ('contrastive', 'pairs_per_batch', parse_int),
    'contrastive.feature_smooth_sigma': ('contrastive', 'feature_smooth_sigma', parse_float),
    'contrastive.hidden_dim': ('contrastive', 'hidden_dim', parse_int),
    'clustering.method': ('clustering', 'method', _parse_method),
    'clustering.n_clusters': ('clustering', 'n_clusters', parse_int),
    'evaluation.purity': ('evaluation', 'purity', parse_bool),
    'evaluation.tau_sweep': ('evaluation', 'tau_sweep', parse_float_list),
    'evaluation.sweep_seeds': ('evaluation', 'sweep_seeds', parse_int_list),
    'seed': (None, 'seed', parse_int),
    'threads': (None, 'threads', parse_int),
    'threshold': (None, 'threshold', parse_float),
}
PATH_KEYS = {'paths.corpus_dir', 'paths.labels', 'paths.out_dir'}


def parse_config_text(text: str, base_dir: Path = Path(".")) -> PipelineConfig:
    """
    Parse flat `key = value` configuration text.

    Blank lines and `#` comments are ignored. Relative paths resolve against
    base_dir. Unknown or repeated keys and unparsable values are errors
    naming the line.
    """
    config = PipelineConfig()
    seen: Dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split('=', 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno

        section, name, parser = CONFIG_KEYS[key]
        try:
            parsed = parser(value)
        except ParameterError as e:
            raise ConfigError(f"line {lineno}: {key}: {e}") from e
        if key in PATH_KEYS and not parsed.is_absolute():
            parsed = base_dir / parsed
        target = config if section is None else getattr(config, section)
        setattr(target, name, parsed)
    return config


def load_config(path: Path) -> PipelineConfig:
    """
    Load a config file, or the config snapshot of a run manifest (.json).
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    if path.suffix == '.json':
        manifest = read_json(path)
        if 'config' not in manifest:
            raise ConfigError(f"{path} is not a run manifest")
        config = PipelineConfig.from_dict(manifest['config'])
        logger.info(f"Loaded configuration snapshot from manifest {path}")
        return config
    config = parse_config_text(path.read_text(), base_dir=path.parent)
    logger.info(f"Loaded configuration from {path}")
    return config


# ============================================================================
# RUN MANIFEST
# ============================================================================

@dataclass
class RunManifest:
    """Record of one run: settings, stage times, artifacts and outcome."""
    config: Dict[str, Any]
    seed: int
    version: str = VERSION
    stages: List[Dict[str, Any]] = field(default_factory=list)
    artifacts: List[str] = field(default_factory=list)
    status: str = "RUNNING"
    failed_stage: Optional[str] = None
    error: Optional[str] = None
    threshold_source: Optional[str] = None
    notices: List[str] = field(default_factory=list)
    _written: bool = field(default=False, repr=False)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunManifest':
        try:
            return cls(config=data['config'], seed=int(data['seed']),
                       version=data.get('version', VERSION),
                       stages=[{'name': str(r['name']), 'seconds': float(r['seconds'])}
                               for r in data.get('stages', [])],
                       artifacts=list(data.get('artifacts', [])),
                       status=data.get('status', "RUNNING"),
                       failed_stage=data.get('failed_stage'),
                       error=data.get('error'),
                       threshold_source=data.get('threshold_source'),
                       notices=list(data.get('notices', [])))
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"malformed run manifest: {e}")

    @property
    def stage_names(self) -> List[str]:
        return [record['name'] for record in self.stages]

    @property
    def total_seconds(self) -> float:
        return float(sum(record['seconds'] for record in self.stages))

    def add_artifacts(self, paths: Sequence[Path], root: Path) -> None:
        for path in paths:
            name = str(Path(path).relative_to(root)) if Path(path).is_relative_to(root) else str(path)
            if name not in self.artifacts:
                self.artifacts.append(name)

    def merged_into(self, previous: 'RunManifest') -> 'RunManifest':
        """
        Fold this run's records into an earlier manifest of the same directory.

        Stages rerun here replace their earlier record and move to the end;
        artifacts and notices are unioned. Settings and outcome come from this run.
        """
        rerun = set(self.stage_names)
        merged = RunManifest(
            config=self.config, seed=self.seed, version=self.version,
            stages=[r for r in previous.stages if r['name'] not in rerun] + list(self.stages),
            artifacts=list(previous.artifacts),
            status=self.status, failed_stage=self.failed_stage, error=self.error,
            threshold_source=self.threshold_source or previous.threshold_source,
            notices=list(previous.notices),
        )
        merged.artifacts.extend(a for a in self.artifacts if a not in merged.artifacts)
        merged.notices.extend(n for n in self.notices if n not in merged.notices)
        return merged

    def to_dict(self) -> Dict[str, Any]:
        return {
            'config': self.config,
            'seed': self.seed,
            'version': self.version,
            'stages': self.stages,
            'artifacts': sorted(self.artifacts),
            'status': self.status,
            'failed_stage': self.failed_stage,
            'error': self.error,
            'threshold_source': self.threshold_source,
            'notices': self.notices,
        }

    def write(self, path: Path) -> Path:
        if self._written:
            raise BlindClusterError(f"manifest {path} already written for this run")
        self._written = True
        return write_json(self.to_dict(), path)


# ============================================================================
# PIPELINE
# ============================================================================

class BlindClusterPipeline:
    """
    Stage runner persisting every intermediate artifact.

    Usage:
        pipeline = BlindClusterPipeline(config)
        metrics = pipeline.run()
    """

    def __init__(self, config: PipelineConfig, out_dir: Optional[Path] = None):
        self.config = config.validate()
        self.out_dir = ensure_dir(out_dir if out_dir is not None else config.paths.out_dir)
        self.rng = RngState(config.seed)
        self.manifest = RunManifest(config=config.to_dict(), seed=config.seed)
        self.histories: Dict[str, TrainingHistory] = {}

    # ------------------------------------------------------------------
    # helpers
    # ------------------------------------------------------------------

    @contextmanager
    def stage(self, name: str):
        """Time a stage and tag any failure with its name."""
        try:
            with StageTimer(self.manifest.stages, name):
                yield
        except StageError:
            raise
        except Exception as e:
            raise StageError(name, e) from e

    def _record(self, *paths: Path) -> None:
        self.manifest.add_artifacts(paths, self.out_dir)

    def _require(self, *names: str) -> None:
        missing = [name for name in names if not (self.out_dir / name).exists()]
        if missing:
            raise DataError(f"missing artifacts in {self.out_dir}: expected {missing}")

    def finish(self, status: str = "OK", error: Optional[StageError] = None,
               merge: bool = False) -> Path:
        """
        Write the manifest.

        With merge=True an existing manifest in the output directory is kept
        and this run's stages, artifacts and notices are folded into it.
        """
        self.manifest.status = status
        if error is not None:
            self.manifest.failed_stage = error.stage
            self.manifest.error = str(error.cause)
        path = self.out_dir / MANIFEST_FILE
        if merge and path.is_file():
            try:
                previous = RunManifest.from_dict(read_json(path))
            except FormatError as e:
                logger.warning(f"Replacing unreadable manifest {path}: {e}")
            else:
                if previous.config != self.manifest.config:
                    logger.warning(f"Earlier stages in {self.out_dir} ran with other settings")
                self.manifest = self.manifest.merged_into(previous)
        return self.manifest.write(path)

    # ------------------------------------------------------------------
    # stages
    # ------------------------------------------------------------------

    def load_corpus(self) -> Corpus:
        if self.config.paths.corpus_dir is None:
            raise ConfigError("paths.corpus_dir is not set")
        labels = self.config.paths.labels
        if labels is None:
            default = Path(self.config.paths.corpus_dir) / LABELS_FILE
            labels = default if default.is_file() else None
        return load_corpus(self.config.paths.corpus_dir, labels_path=labels)

    def train_vae(self, corpus: Corpus) -> Optional[VaeModel]:
        if not self.config.vae.enabled:
            self.manifest.notices.append("VAE disabled: raw rescaled features are scored")
            return None
        history = TrainingHistory(label="vae")
        model = train_vae(training_pixels(corpus), self.config.vae,
                          self.rng.child(STREAM_VAE), history=history)
        self.histories['vae'] = history
        self._record(save_vae(model, self.out_dir / VAE_FILE))
        return model

    def localize(self, corpus: Corpus, model: Optional[VaeModel]) -> List[AnomalyMap]:
        maps = localize(corpus, model, self.config.fca, threads=self.config.threads)
        self._record(*save_anomaly_maps(maps, corpus.ids, self.out_dir / MAPS_DIR))
        return maps

    def prepare(self, corpus: Corpus) -> List[FeatureMap]:
        return [prepare_descriptor_features(fmap, self.config.fca.margin,
                                            self.config.contrastive.feature_smooth_sigma)
                for fmap in corpus.feature_maps]

    def raw_descriptors(self, corpus: Corpus, prepared: Sequence[FeatureMap],
                        maps: Sequence[AnomalyMap]) -> List[ImageDescriptor]:
        descriptors = raw_descriptors(prepared, maps, self.config.contrastive.tau)
        self._record(save_descriptors(descriptors, corpus.ids, self.out_dir / RAW_DESCRIPTORS_FILE))
        return descriptors

    def threshold(self, descriptors: Sequence[ImageDescriptor],
                  maps: Sequence[AnomalyMap]) -> ThresholdEstimate:
        scores = [image_score(amap) for amap in maps]
        if self.config.threshold is not None:
            t = float(self.config.threshold)
            estimate = ThresholdEstimate(t=t, normal_ratio=float(np.mean(np.asarray(scores) <= t)),
                                         normal_cluster_index=-1)
            self.manifest.threshold_source = "override"
            logger.info(f"✓ Threshold t={t:.6g} (override)")
        else:
            estimate = estimate_threshold(descriptors, scores, self.config.clustering.n_clusters,
                                          self.rng.child(STREAM_THRESHOLD))
            self.manifest.threshold_source = "estimated"
        data = dict(estimate.to_dict(), source=self.manifest.threshold_source)
        self._record(write_json(data, self.out_dir / THRESHOLD_FILE))
        return estimate

    def train_head(self, corpus: Corpus, prepared: Sequence[FeatureMap],
                   maps: Sequence[AnomalyMap], raw: Sequence[ImageDescriptor],
                   threshold: ThresholdEstimate) -> Tuple[Optional[PixelNet], List[ImageDescriptor]]:
        """Train the head and return it with the final descriptors."""
        cfg = self.config.contrastive
        if not cfg.enabled:
            self.manifest.notices.append("contrastive learning disabled: raw descriptors clustered")
            final = list(raw)
            head = None
        else:
            rng = self.rng.child(STREAM_HEAD)
            neighbors = mine_neighbors(raw, cfg.k, rng)
            history = TrainingHistory(label="head")
            head = train_head(prepared, maps, threshold, cfg, rng, neighbors=neighbors,
                              history=history)
            self.histories['head'] = history
            self._record(save_pixel_net(head, self.out_dir / HEAD_FILE))
            final = embed_descriptors(prepared, maps, head, cfg.tau)
        self._record(save_descriptors(final, corpus.ids, self.out_dir / DESCRIPTORS_FILE))
        return head, final

    def cluster(self, ids: Sequence[str], descriptors: Sequence[ImageDescriptor]) -> Labeling:
        cfg = self.config.clustering
        fitted, centers, _ = kmeans_fit(descriptors, cfg.n_clusters, self.rng.child(STREAM_CLUSTER))
        if cfg.method == ClusterMethod.KMEANS:
            labeling = fitted
        else:
            labeling = ward_cluster(descriptors, cfg.n_clusters)
        self._record(save_labeling(labeling, ids, self.out_dir / LABELING_FILE),
                     save_centers(centers, self.out_dir / CENTERS_FILE))
        logger.info(f"✓ Clustered {len(ids)} images into {labeling.n_clusters} clusters "
                    f"({cfg.method.value})")
        return labeling

    def evaluate(self, corpus: Corpus, maps: Sequence[AnomalyMap], labeling: Labeling,
                 descriptors: Sequence[ImageDescriptor]) -> Dict[str, Any]:
        truth = Labeling.from_values(corpus.gt_types())
        metrics: Dict[str, Any] = evaluate_clustering(labeling, truth)
        masks = [item.gt_mask for item in corpus] if corpus.has_masks else None
        localization, omitted = evaluate_localization(maps, masks, corpus.gt_types() > 0)
        metrics.update(localization)
        metrics['omitted'] = omitted
        if self.config.evaluation.purity:
            counts = range(1, min(len(corpus), 2 * self.config.clustering.n_clusters) + 1)
            metrics['purity_curve'] = [[k, p] for k, p in purity_curve(descriptors, truth, counts)]
        if self.config.evaluation.tau_sweep:
            metrics['tau_sweep'] = run_tau_sweep(corpus, self.config, self.config.evaluation.tau_sweep,
                                                 self.config.evaluation.sweep_seeds)
        self._record(write_json(metrics, self.out_dir / METRICS_FILE))
        return metrics

    # ------------------------------------------------------------------
    # full run
    # ------------------------------------------------------------------

    def run(self) -> Dict[str, Any]:
        """
        Execute every stage and write the manifest.

        Returns:
            Metrics (empty when the corpus carries no labels)

        Raises:
            StageError: Naming the failed stage; artifacts written so far remain
                and the manifest is marked FAILED
        """
        logger.info(f"Starting pipeline (seed {self.config.seed}) -> {self.out_dir}")
        try:
            with self.stage("load"):
                corpus = self.load_corpus()
            with self.stage("train_vae"):
                model = self.train_vae(corpus)
            with self.stage("localize"):
                maps = self.localize(corpus, model)
            with self.stage("descriptors"):
                prepared = self.prepare(corpus)
                raw = self.raw_descriptors(corpus, prepared, maps)
            with self.stage("threshold"):
                threshold = self.threshold(raw, maps)
            with self.stage("train_head"):
                _, final = self.train_head(corpus, prepared, maps, raw, threshold)
            with self.stage("cluster"):
                labeling = self.cluster(corpus.ids, final)
            metrics: Dict[str, Any] = {}
            if corpus.has_labels:
                with self.stage("evaluate"):
                    metrics = self.evaluate(corpus, maps, labeling, final)
            else:
                notice = "no ground-truth labels: evaluation skipped"
                logger.warning(notice)
                self.manifest.notices.append(notice)
        except StageError as e:
            self.finish("FAILED", e)
            raise
        self.finish("OK")
        logger.info(f"✓ Pipeline complete ({self.manifest.total_seconds:.1f}s)")
        return metrics


# ============================================================================
# TAU SWEEP
# ============================================================================

def _cluster_quietly(descriptors: Sequence[ImageDescriptor], config: ClusteringConfig,
                     rng: RngState) -> Labeling:
    if config.method == ClusterMethod.KMEANS:
        labeling, _, _ = kmeans_fit(descriptors, config.n_clusters, rng)
        return labeling
    return ward_cluster(descriptors, config.n_clusters)


def run_tau_sweep(corpus: Corpus, config: PipelineConfig, taus: Sequence[float],
                  seeds: Sequence[int]) -> Dict[str, Any]:
    """
    NMI across softmax temperatures, with and without contrastive learning.

    Localization runs once per seed; descriptors, threshold, head and
    clustering are recomputed per temperature.

    Returns:
        {'taus', 'seeds', 'with_cl': {'nmi_mean', 'nmi_std'}, 'without_cl': {...},
         'std_across_tau': {'with_cl', 'without_cl'}}
    """
    if not corpus.has_labels:
        raise DataError("the tau sweep needs ground-truth labels")
    if not taus or not seeds:
        raise ParameterError("the tau sweep needs at least one tau and one seed")
    truth = Labeling.from_values(corpus.gt_types())
    with_cl = np.zeros((len(taus), len(seeds)))
    without_cl = np.zeros((len(taus), len(seeds)))

    for s, seed in enumerate(seeds):
        rng = RngState(seed)
        model = None
        if config.vae.enabled:
            model = train_vae(training_pixels(corpus), config.vae, rng.child(STREAM_VAE))
        maps = localize(corpus, model, config.fca, threads=config.threads)
        prepared = [prepare_descriptor_features(fmap, config.fca.margin,
                                                config.contrastive.feature_smooth_sigma)
                    for fmap in corpus.feature_maps]
        scores = [image_score(amap) for amap in maps]
        for t, tau in enumerate(taus):
            cfg = ContrastiveConfig(**dict(config.contrastive.to_dict(), tau=float(tau)))
            raw = raw_descriptors(prepared, maps, cfg.tau)
            without_cl[t, s] = nmi(_cluster_quietly(raw, config.clustering,
                                                    rng.child(STREAM_CLUSTER)), truth)
            if config.threshold is not None:
                threshold = ThresholdEstimate(config.threshold, float('nan'), -1)
            else:
                threshold = estimate_threshold(raw, scores, config.clustering.n_clusters,
                                               rng.child(STREAM_THRESHOLD))
            head_rng = rng.child(STREAM_HEAD)
            neighbors = mine_neighbors(raw, cfg.k, head_rng)
            head = train_head(prepared, maps, threshold, cfg, head_rng, neighbors=neighbors)
            final = embed_descriptors(prepared, maps, head, cfg.tau)
            with_cl[t, s] = nmi(_cluster_quietly(final, config.clustering,
                                                 rng.child(STREAM_CLUSTER)), truth)
            logger.info(f"  tau={tau:g} seed={seed}: NMI {with_cl[t, s]:.3f} with CL, "
                        f"{without_cl[t, s]:.3f} without")

    result = {
        'taus': [float(tau) for tau in taus],
        'seeds': [int(seed) for seed in seeds],
        'with_cl': {'nmi_mean': with_cl.mean(axis=1).tolist(),
                    'nmi_std': with_cl.std(axis=1).tolist()},
        'without_cl': {'nmi_mean': without_cl.mean(axis=1).tolist(),
                       'nmi_std': without_cl.std(axis=1).tolist()},
        'std_across_tau': {'with_cl': float(with_cl.mean(axis=1).std()),
                           'without_cl': float(without_cl.mean(axis=1).std())},
    }
    logger.info(f"✓ Tau sweep: NMI std across tau {result['std_across_tau']['with_cl']:.4f} "
                f"with CL, {result['std_across_tau']['without_cl']:.4f} without")
    return result


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_gen_synthetic(spec: SyntheticSpec, seed: int, out_dir: Path) -> List[Path]:
    """Validate the spec, generate the corpus and write it to out_dir."""
    spec.validate()
    corpus = gen_synthetic_corpus(spec, RngState(seed))
    return save_corpus(corpus, out_dir, spec=spec)


def cmd_extract_features(image_path: Path, out_path: Path, scales: Sequence[float]) -> Path:
    """Filter-bank features of a grayscale image stored as a C=1 FMAP."""
    image = load_grid(image_path)
    fmap = extract_classical_features(image, scales)
    ensure_dir(Path(out_path).parent)
    path = save_feature_map(fmap, out_path)
    logger.info(f"✓ Wrote {fmap.channels}-channel features to {path}")
    return path


def cmd_pipeline(config: PipelineConfig, out_dir: Optional[Path] = None) -> Dict[str, Any]:
    return BlindClusterPipeline(config, out_dir).run()


def _single_stage(config: PipelineConfig, name: str, body: Callable[[BlindClusterPipeline], Any]):
    pipeline = BlindClusterPipeline(config)
    try:
        with pipeline.stage(name):
            result = body(pipeline)
    except StageError as e:
        pipeline.finish("FAILED", e, merge=True)
        raise
    pipeline.finish("OK", merge=True)
    return result


def _stored_maps(pipeline: BlindClusterPipeline, corpus: Corpus) -> List[AnomalyMap]:
    pipeline._require(*[f"{MAPS_DIR}/{item_id}.fmap" for item_id in corpus.ids])
    return load_anomaly_maps(pipeline.out_dir / MAPS_DIR, corpus.ids)


def _stored_descriptors(pipeline: BlindClusterPipeline, name: str,
                        ids: Sequence[str]) -> List[ImageDescriptor]:
    pipeline._require(name)
    stored_ids, descriptors = load_descriptors(pipeline.out_dir / name)
    if list(stored_ids) != list(ids):
        raise DataError(f"{name} ids do not match the corpus")
    return descriptors


def cmd_train_vae(config: PipelineConfig) -> Optional[Path]:
    def body(p: BlindClusterPipeline):
        p.train_vae(p.load_corpus())
        return p.out_dir / VAE_FILE if config.vae.enabled else None
    return _single_stage(config, "train_vae", body)


def cmd_localize(config: PipelineConfig) -> Path:
    def body(p: BlindClusterPipeline):
        corpus = p.load_corpus()
        model = None
        if config.vae.enabled:
            p._require(VAE_FILE)
            model = load_vae(p.out_dir / VAE_FILE)
        p.localize(corpus, model)
        return p.out_dir / MAPS_DIR
    return _single_stage(config, "localize", body)


def cmd_estimate_threshold(config: PipelineConfig) -> ThresholdEstimate:
    def body(p: BlindClusterPipeline):
        corpus = p.load_corpus()
        maps = _stored_maps(p, corpus)
        raw = p.raw_descriptors(corpus, p.prepare(corpus), maps)
        return p.threshold(raw, maps)
    return _single_stage(config, "threshold", body)


def cmd_train_head(config: PipelineConfig) -> Path:
    def body(p: BlindClusterPipeline):
        corpus = p.load_corpus()
        maps = _stored_maps(p, corpus)
        raw = _stored_descriptors(p, RAW_DESCRIPTORS_FILE, corpus.ids)
        p._require(THRESHOLD_FILE)
        stored = read_json(p.out_dir / THRESHOLD_FILE)
        threshold = ThresholdEstimate(float(stored['t']), float(stored['normal_ratio']),
                                      int(stored['normal_cluster_index']))
        p.train_head(corpus, p.prepare(corpus), maps, raw, threshold)
        return p.out_dir / DESCRIPTORS_FILE
    return _single_stage(config, "train_head", body)


def cmd_cluster(config: PipelineConfig) -> Labeling:
    def body(p: BlindClusterPipeline):
        ids = p.load_corpus().ids
        return p.cluster(ids, _stored_descriptors(p, DESCRIPTORS_FILE, ids))
    return _single_stage(config, "cluster", body)


def _load_truth(path: Path) -> Tuple[List[str], np.ndarray, bool]:
    """Truth ids and labels; the flag tells whether label 0 means normal."""
    df = read_table(path, required=['id'])
    if 'gt_type' in df.columns:
        return [str(v) for v in df['id']], df['gt_type'].to_numpy(dtype=np.int64), True
    if 'label' in df.columns:
        return [str(v) for v in df['id']], df['label'].to_numpy(dtype=np.int64), False
    raise DataError(f"{path} has neither a gt_type nor a label column")


def cmd_evaluate(pred_path: Path, truth_path: Path, maps_dir: Optional[Path] = None,
                 masks_dir: Optional[Path] = None, descriptors_path: Optional[Path] = None,
                 out_path: Optional[Path] = None) -> Dict[str, Any]:
    """
    Compare a predicted labeling with ground truth.

    Args:
        pred_path: Labeling CSV (id,label)
        truth_path: Labels CSV (id,gt_type) or labeling CSV (id,label)
        maps_dir: Directory of <id>.fmap anomaly maps (enables AUROC and PRO)
        masks_dir: Directory of <id>.fmap ground-truth masks (enables pixel metrics)
        descriptors_path: Descriptors CSV (enables the purity curve)
        out_path: Where to write the metrics JSON

    Returns:
        Metrics dict; undefined metrics appear under 'omitted' with a reason
    """
    pred_ids, pred = load_labeling(pred_path)
    truth_ids, truth_values, has_normal_class = _load_truth(truth_path)
    missing = sorted(set(pred_ids) - set(truth_ids))
    extra = sorted(set(truth_ids) - set(pred_ids))
    if missing or extra or len(pred_ids) != len(set(pred_ids)):
        raise DataError(f"labeling ids do not match the truth: not in truth {missing}, "
                        f"not predicted {extra}")
    order = {item_id: i for i, item_id in enumerate(truth_ids)}
    aligned = truth_values[[order[item_id] for item_id in pred_ids]]
    truth = Labeling.from_values(aligned)

    metrics: Dict[str, Any] = evaluate_clustering(pred, truth)
    omitted: Dict[str, str] = {}
    if maps_dir is None:
        omitted.update({'auroc_image': "no maps", 'auroc_pixel': "no maps", 'pro': "no maps"})
    else:
        maps = load_anomaly_maps(maps_dir, pred_ids)
        masks = None
        if masks_dir is not None:
            masks = [load_grid(Path(masks_dir) / f"{item_id}.fmap") > 0.5 for item_id in pred_ids]
        localization, omitted = evaluate_localization(
            maps, masks, aligned > 0 if has_normal_class else None)
        metrics.update(localization)
    metrics['omitted'] = omitted

    if descriptors_path is not None:
        desc_ids, descriptors = load_descriptors(descriptors_path)
        if list(desc_ids) != list(pred_ids):
            raise DataError("descriptor ids do not match the labeling ids")
        counts = range(1, min(len(pred_ids), 2 * max(pred.n_clusters, 1)) + 1)
        metrics['purity_curve'] = [[k, p] for k, p in purity_curve(descriptors, truth, counts)]

    if out_path is not None:
        write_json(metrics, out_path)
    return metrics


def cmd_segment(features_path: Path, model_dir: Path, out_path: Path) -> np.ndarray:
    """
    Pixel-level cluster labels for an unseen image.

    Uses the run's manifest for preparation settings, its head (when
    contrastive learning was enabled) and its k-means centers.

    Returns:
        (H, W) label grid; also written as a C=1 FMAP and a paletted PGM
    """
    model_dir = Path(model_dir)
    expected = [MANIFEST_FILE, CENTERS_FILE]
    manifest_path = model_dir / MANIFEST_FILE
    config = None
    if manifest_path.exists():
        config = PipelineConfig.from_dict(read_json(manifest_path)['config'])
        if config.contrastive.enabled:
            expected.append(HEAD_FILE)
    else:
        expected.append(HEAD_FILE)
    missing = [name for name in expected if not (model_dir / name).exists()]
    if missing:
        raise DataError(f"missing artifacts in {model_dir}: expected {missing}")

    head = load_pixel_net(model_dir / HEAD_FILE) if config.contrastive.enabled else None
    centers = load_centers(model_dir / CENTERS_FILE)
    prepared = prepare_descriptor_features(load_feature_map(features_path), config.fca.margin,
                                           config.contrastive.feature_smooth_sigma)
    grid = segment_pixels(prepared, head, centers)

    out_path = Path(out_path)
    ensure_dir(out_path.parent)
    save_grid(grid.astype(np.float64), out_path)
    write_pgm(grid, out_path.with_suffix('.pgm'), levels=centers.shape[0])
    logger.info(f"✓ Segmented {features_path} into {len(np.unique(grid))} clusters -> {out_path}")
    return grid
