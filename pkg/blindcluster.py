#!/usr/bin/env python3
"""
blindcluster - command-line entry point

Usage:
    python blindcluster.py --out corpus gen-synthetic --n-images 64
    python blindcluster.py --config run.cfg pipeline
    python blindcluster.py evaluate --pred out/labeling.csv --truth corpus/labels.csv
    python blindcluster.py segment image.fmap --model-dir out --output seg.fmap

Exit codes: 0 success, 1 unexpected failure, 2 configuration or validation
error, 3 data or format error, 4 numeric or training error.
"""

import logging
from functools import wraps
from pathlib import Path
from typing import Any, Callable, Dict, Optional

import click
import pandas as pd

from constants import (
    VERSION, SyntheticSpec, BlindClusterError, ConfigError, EXIT_FAILURE, EXIT_DATA
)
from pipeline import (
    PipelineConfig, load_config, run_tau_sweep, cmd_gen_synthetic, cmd_extract_features,
    cmd_pipeline, cmd_train_vae, cmd_localize, cmd_estimate_threshold, cmd_train_head,
    cmd_cluster, cmd_evaluate, cmd_segment, BlindClusterPipeline, METRICS_FILE
)
from utils import parse_float_list, parse_int_list, write_json, ensure_dir

logger = logging.getLogger(__name__)

THREADS_ENV = "BLINDCLUSTER_THREADS"
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


# ============================================================================
# ERROR HANDLING
# ============================================================================

def handle_cli_errors(f: Callable) -> Callable:
    """
    Decorator mapping exceptions to exit codes.

    Handles:
    - BlindClusterError: its exit_code (2 config, 3 data, 4 numeric)
    - OSError: unreadable or unwritable paths (3)
    - Exception: unexpected errors (1)
    """
    @wraps(f)
    def wrapper(*args, **kwargs):
        ctx = click.get_current_context()
        try:
            return f(*args, **kwargs)
        except BlindClusterError as e:
            logger.error(f"{ctx.info_name}: {e}")
            ctx.exit(e.exit_code)
        except OSError as e:
            logger.error(f"{ctx.info_name}: {e}")
            ctx.exit(EXIT_DATA)
        except Exception as e:
            logger.error(f"Unexpected error in {ctx.info_name}: {e}", exc_info=True)
            ctx.exit(EXIT_FAILURE)
    return wrapper


# ============================================================================
# CONFIGURATION
# ============================================================================

def build_config(options: Dict[str, Any], corpus: Optional[str] = None,
                 labels: Optional[str] = None) -> PipelineConfig:
    """Config file (or defaults) with command-line overrides applied."""
    config = load_config(options['config']) if options['config'] else PipelineConfig()
    if options['seed'] is not None:
        config.seed = options['seed']
    if options['out'] is not None:
        config.paths.out_dir = Path(options['out'])
    if corpus is not None:
        config.paths.corpus_dir = Path(corpus)
    if labels is not None:
        config.paths.labels = Path(labels)
    if options['threads'] is not None:
        config.threads = options['threads']
    if options['threshold'] is not None:
        config.threshold = options['threshold']
    return config.validate()


# ============================================================================
# REPORTING
# ============================================================================

def format_metrics(metrics: Dict[str, Any]) -> str:
    """Scalar metrics as a two-column table, omitted ones with their reason."""
    rows = [{'metric': name, 'value': f"{value:.4f}"}
            for name, value in metrics.items() if isinstance(value, float)]
    rows += [{'metric': name, 'value': f"omitted ({reason})"}
             for name, reason in metrics.get('omitted', {}).items()]
    if not rows:
        return "no metrics"
    return pd.DataFrame(rows).to_string(index=False)


def echo_report(title: str, metrics: Dict[str, Any]) -> None:
    click.echo("=" * 60)
    click.echo(title)
    click.echo("=" * 60)
    click.echo(format_metrics(metrics))
    sweep = metrics.get('tau_sweep')
    if sweep:
        table = pd.DataFrame({
            'tau': sweep['taus'],
            'nmi_with_cl': sweep['with_cl']['nmi_mean'],
            'nmi_without_cl': sweep['without_cl']['nmi_mean'],
        })
        click.echo()
        click.echo(table.to_string(index=False))


corpus_option = click.option('--corpus', default=None, help="Corpus directory (overrides paths.corpus_dir)")
labels_option = click.option('--labels', default=None, help="Labels CSV (overrides paths.labels)")


# ============================================================================
# COMMAND GROUP
# ============================================================================

@click.group()
@click.version_option(VERSION, prog_name="blindcluster")
@click.option('--config', 'config_path', default=None, type=click.Path(),
              help="Configuration file (key = value) or run manifest (.json)")
@click.option('--seed', type=click.IntRange(0, 2 ** 64 - 1), default=None,
              help="Random seed (unsigned 64-bit)")
@click.option('--out', default=None, type=click.Path(), help="Output directory")
@click.option('--threads', type=click.IntRange(min=1), default=None, envvar=THREADS_ENV,
              help=f"Worker threads (fallback: ${THREADS_ENV})")
@click.option('--threshold', type=float, default=None,
              help="Binarization threshold; skips threshold estimation")
@click.option('--quiet', is_flag=True, help="Only log warnings and errors")
@click.pass_context
def cli(ctx, config_path, seed, out, threads, threshold, quiet):
    """Blind anomaly localization and anomaly-type clustering of texture feature maps."""
    logging.basicConfig(level=logging.WARNING if quiet else logging.INFO,
                        format=LOG_FORMAT, force=True)
    ctx.obj = {'config': config_path, 'seed': seed, 'out': out, 'threads': threads,
               'threshold': threshold}


@cli.command('gen-synthetic')
@click.option('--n-images', type=int, default=SyntheticSpec.n_images)
@click.option('--height', type=int, default=SyntheticSpec.height)
@click.option('--width', type=int, default=SyntheticSpec.width)
@click.option('--channels', type=int, default=SyntheticSpec.channels)
@click.option('--n-anomaly-types', type=int, default=SyntheticSpec.n_anomaly_types)
@click.option('--normal-fraction', type=float, default=SyntheticSpec.normal_fraction)
@click.option('--anomaly-area', type=float, default=SyntheticSpec.anomaly_area_fraction)
@click.option('--smoothness', type=float, default=SyntheticSpec.base_smoothness)
@click.option('--strength', type=float, default=SyntheticSpec.perturbation_strength)
@click.option('--normal-modes', type=int, default=SyntheticSpec.n_normal_modes)
@click.option('--edge-margin', type=int, default=SyntheticSpec.edge_margin)
@click.option('--name', default=SyntheticSpec.name)
@click.pass_obj
@handle_cli_errors
def gen_synthetic(options, n_images, height, width, channels, n_anomaly_types, normal_fraction,
                  anomaly_area, smoothness, strength, normal_modes, edge_margin, name):
    """Generate a labeled synthetic corpus into --out."""
    if options['out'] is None:
        raise ConfigError("gen-synthetic needs --out")
    spec = SyntheticSpec(
        n_images=n_images, height=height, width=width, channels=channels,
        n_anomaly_types=n_anomaly_types, normal_fraction=normal_fraction,
        anomaly_area_fraction=anomaly_area, base_smoothness=smoothness,
        perturbation_strength=strength, n_normal_modes=normal_modes,
        edge_margin=edge_margin, name=name,
    )
    seed = options['seed'] if options['seed'] is not None else 0
    written = cmd_gen_synthetic(spec, seed, Path(options['out']))
    click.echo(f"Wrote {len(written)} files to {options['out']}")


@cli.command('extract-features')
@click.argument('image', type=click.Path())
@click.argument('output', type=click.Path())
@click.option('--scales', default="1,2", help="Comma-separated Gaussian scales")
@handle_cli_errors
def extract_features(image, output, scales):
    """Filter-bank features of a grayscale image stored as a C=1 FMAP."""
    path = cmd_extract_features(Path(image), Path(output), parse_float_list(scales))
    click.echo(f"Wrote {path}")


@cli.command('pipeline')
@corpus_option
@labels_option
@click.pass_obj
@handle_cli_errors
def pipeline(options, corpus, labels):
    """Run every stage: VAE, localization, threshold, head, clustering, evaluation."""
    config = build_config(options, corpus, labels)
    metrics = cmd_pipeline(config)
    if metrics:
        echo_report("Pipeline metrics", metrics)
    else:
        click.echo(f"Pipeline complete; artifacts in {config.paths.out_dir} (no labels, no metrics)")


def _stage_command(name: str, command: Callable[[PipelineConfig], Any], help_text: str):
    @cli.command(name, help=help_text)
    @corpus_option
    @labels_option
    @click.pass_obj
    @handle_cli_errors
    def run(options, corpus, labels):
        command(build_config(options, corpus, labels))
        click.echo(f"{name} complete")
    return run


train_vae = _stage_command('train-vae', cmd_train_vae, "Train the feature VAE.")
localize = _stage_command('localize', cmd_localize, "Compute anomaly maps.")
estimate_threshold = _stage_command('estimate-threshold', cmd_estimate_threshold,
                                    "Compute raw descriptors and the binarization threshold.")
train_head = _stage_command('train-head', cmd_train_head,
                            "Train the projection head and embed the descriptors.")
cluster = _stage_command('cluster', cmd_cluster, "Cluster the final descriptors.")


@cli.command('evaluate')
@click.option('--pred', required=True, type=click.Path(), help="Labeling CSV (id,label)")
@click.option('--truth', required=True, type=click.Path(),
              help="Labels CSV (id,gt_type) or labeling CSV (id,label)")
@click.option('--maps', default=None, type=click.Path(), help="Anomaly map directory")
@click.option('--masks', default=None, type=click.Path(), help="Ground-truth mask directory")
@click.option('--descriptors', default=None, type=click.Path(),
              help="Descriptors CSV for the purity curve")
@click.option('--output', default=None, type=click.Path(), help="Metrics JSON path")
@click.pass_obj
@handle_cli_errors
def evaluate(options, pred, truth, maps, masks, descriptors, output):
    """Compare a labeling with ground truth."""
    if output is None and options['out'] is not None:
        output = ensure_dir(options['out']) / METRICS_FILE
    metrics = cmd_evaluate(
        Path(pred), Path(truth),
        maps_dir=Path(maps) if maps else None,
        masks_dir=Path(masks) if masks else None,
        descriptors_path=Path(descriptors) if descriptors else None,
        out_path=Path(output) if output else None,
    )
    echo_report("Evaluation", metrics)


@cli.command('segment')
@click.argument('features', type=click.Path())
@click.option('--model-dir', required=True, type=click.Path(), help="Output directory of a pipeline run")
@click.option('--output', required=True, type=click.Path(),
              help="Label grid FMAP path (.pgm written alongside)")
@handle_cli_errors
def segment(features, model_dir, output):
    """Pixel-level clustering of an unseen image."""
    grid = cmd_segment(Path(features), Path(model_dir), Path(output))
    click.echo(f"Wrote {grid.shape[0]}x{grid.shape[1]} label grid to {output}")


@cli.command('sweep-tau')
@click.option('--taus', default=None, help="Comma-separated temperatures")
@click.option('--seeds', default=None, help="Comma-separated seeds")
@corpus_option
@labels_option
@click.pass_obj
@handle_cli_errors
def sweep_tau(options, taus, seeds, corpus, labels):
    """NMI stability across softmax temperatures, with and without contrastive learning."""
    config = build_config(options, corpus, labels)
    tau_values = parse_float_list(taus) if taus else config.evaluation.tau_sweep
    if not tau_values:
        raise ConfigError("sweep-tau needs --taus or evaluation.tau_sweep")
    seed_values = parse_int_list(seeds) if seeds else config.evaluation.sweep_seeds
    corpus_data = BlindClusterPipeline(config).load_corpus()
    result = run_tau_sweep(corpus_data, config, tau_values, seed_values)
    write_json(result, ensure_dir(config.paths.out_dir) / "tau_sweep.json")
    echo_report("Tau sweep", {'tau_sweep': result,
                              'std_with_cl': result['std_across_tau']['with_cl'],
                              'std_without_cl': result['std_across_tau']['without_cl']})


if __name__ == "__main__":
    cli()
