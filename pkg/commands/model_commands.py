"""
Model Commands - network training and instance inference
"""

import json
import os

import click
from flask import Blueprint, current_app

from commands.helpers import experiment, handle_errors, parse_widths, write_run_manifest, write_text
from domain import ConfigError
from services.baseline_service import ClassPercentages, estimate_percentages
from services.pipeline_service import (
    INFERENCE_METHODS, InferenceOptions, infer_dataset, model_from_checkpoint, warn_filter_override,
)
from services.pointnet_service import history_to_csv, train as train_network
from storage import load_checkpoint, load_dataset, save_checkpoint, save_labelings

model_bp = Blueprint('model', __name__, cli_group=None)


@model_bp.cli.command('train')
@click.option('--data', 'data_dir', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--out', 'out_path', required=True, type=click.Path(dir_okay=False), help='Checkpoint file.')
@click.option('--epochs', type=click.IntRange(min=0), default=None)
@click.option('--batch-size', type=click.IntRange(min=1), default=None)
@click.option('--lr', type=float, default=None, help='Initial learning rate.')
@click.option('--lr-decay', type=float, default=None, help='Per-epoch learning-rate factor.')
@click.option('--seed', type=int, default=None)
@click.option('--sc-roi', type=float, default=None)
@click.option('--t-roi', type=float, default=None)
@click.option('--extractor', default=None, help="Extractor widths, e.g. '64,64,64,128,1024'.")
@click.option('--head', default=None, help="Head widths ending in 2, e.g. '512,256,128,2'.")
@click.option('--tap', type=int, default=None, help='Extractor layer feeding the head.')
@click.option('--standardize', is_flag=True, help='Standardize x, y, z, w, h.')
@click.option('--resume', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--log', 'log_path', type=click.Path(dir_okay=False), default=None,
              help='Loss CSV (default: <out>.loss.csv).')
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@handle_errors
def train(data_dir, out_path, epochs, batch_size, lr, lr_decay, seed, sc_roi, t_roi, extractor, head, tap,
          standardize, resume, log_path, config_path):
    """
    Train StixelPointNet on a dataset with Stixel-level GT.
    """
    overrides = {
        'seed': seed, 'standardize': standardize or None,
        'train.epochs': epochs, 'train.batch_size': batch_size,
        'train.learning_rate': lr, 'train.lr_decay': lr_decay,
        'filter.sc_roi': sc_roi, 'filter.t_roi': t_roi,
    }
    if extractor or head or tap is not None:
        base = experiment(config_path, {}).architecture.to_dict()
        base['extractor'] = parse_widths(extractor, '--extractor') or base['extractor']
        base['head'] = parse_widths(head, '--head') or base['head']
        base['tap_index'] = tap if tap is not None else base['tap_index']
        overrides['architecture'] = base
    config = experiment(config_path, overrides)

    dataset = load_dataset(data_dir, load_masks=False)
    checkpoint = load_checkpoint(resume) if resume else None
    def echo(entry):
        click.echo(f"epoch {entry.epoch:4d}  loss {entry.mean_loss:.6f}")

    ckpt, history = train_network(dataset, config.architecture, config.train, config.filter,
                                  config.standardize, checkpoint, echo)
    save_checkpoint(ckpt, out_path)
    log_path = log_path or f'{out_path}.loss.csv'
    write_text(log_path, history_to_csv(history))
    write_run_manifest(out_path, 'train', config, {'data': data_dir, 'epochs_done': ckpt.epoch})
    current_app.logger.info('checkpoint written to %s', out_path)
    final = history[-1].mean_loss if history else float('nan')
    click.echo(f"checkpoint: {out_path}  epochs: {ckpt.epoch}  final loss: {final:.6f}  seed: {config.seed}")


def _load_percentages(path: str) -> ClassPercentages:
    try:
        with open(path, 'r', encoding='utf-8') as fh:
            return ClassPercentages.from_dict(json.load(fh))
    except (OSError, ValueError, AttributeError) as e:
        raise ConfigError(f"Cannot read class percentages from {path}: {e}") from e


@model_bp.cli.command('infer')
@click.option('--data', 'data_dir', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--method', type=click.Choice(INFERENCE_METHODS), required=True)
@click.option('--out', 'out_path', required=True, type=click.Path(dir_okay=False), help='Labeling file.')
@click.option('--checkpoint', type=click.Path(dir_okay=False), default=None, help='Network for stxpn.')
@click.option('--train-data', type=click.Path(exists=True, file_okay=False), default=None,
              help='Dataset to estimate class percentages from (statistical).')
@click.option('--percentages', 'percentages_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help='JSON class percentages (statistical).')
@click.option('--metric', type=click.Choice(['l1', 'l2']), default=None)
@click.option('--hac-winner', type=click.Choice(['area', 'count']), default=None)
@click.option('--tconf', type=float, default=None)
@click.option('--sc-roi', type=float, default=None)
@click.option('--t-roi', type=float, default=None)
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@handle_errors
def infer(data_dir, method, out_path, checkpoint, train_data, percentages_path, metric, hac_winner, tconf,
          sc_roi, t_roi, config_path):
    """
    Predict instance labelings with StixelPointNet, a baseline, the oracle or the GT itself.
    """
    config = experiment(config_path, {'metric': metric, 'hac.winner': hac_winner, 'bps.t_conf': tconf,
                                      'filter.sc_roi': sc_roi, 'filter.t_roi': t_roi})
    options = InferenceOptions(params=config.filter, bps=config.bps, hac=config.hac, metric=config.metric)
    extra = {'method': method, 'data': data_dir}

    if method == 'stxpn':
        if not checkpoint:
            raise click.UsageError('--method stxpn needs --checkpoint.')
        if not os.path.exists(checkpoint):
            raise click.BadParameter(f"Checkpoint {checkpoint} does not exist.", param_hint='--checkpoint')
        options.model = model_from_checkpoint(load_checkpoint(checkpoint))
        if sc_roi is not None or t_roi is not None:
            warn_filter_override(options.model, config.filter)
        extra['checkpoint'] = checkpoint

    if method == 'statistical':
        if percentages_path:
            options.percentages = _load_percentages(percentages_path)
        elif train_data:
            train_set = load_dataset(train_data, load_masks=False)
            options.percentages = estimate_percentages(train_set, config.filter)
            write_text(f'{out_path}.percentages.csv', options.percentages.to_csv(train_set.class_table))
        else:
            raise click.UsageError('--method statistical needs --train-data or --percentages.')
        extra['percentages'] = options.percentages.to_dict()

    dataset = load_dataset(data_dir, load_masks=False)
    labelings = infer_dataset(dataset, method, options, workers=config.threads)
    save_labelings(out_path, labelings)
    write_run_manifest(out_path, 'infer', config, extra)
    n_instances = sum(len(l.instances()) for l in labelings)
    click.echo(f"{method}: {len(labelings)} frames, {n_instances} instances -> {out_path}")
