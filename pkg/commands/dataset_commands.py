"""
Dataset Commands - synthetic dataset generation and Stixel ground-truth generation
"""

import os

import click
from flask import Blueprint, current_app

from commands.helpers import experiment, handle_errors, write_run_manifest, write_text
from domain import StixelPointNetError
from services.gt_service import DEFAULT_T_OV, generate_gt, parse_thresholds, sweep_t_ov, sweep_to_csv, validate_t_ov
from services.synth_service import DetectorNoise, SceneConfig, generate_dataset
from storage import Dataset, DatasetRecord, load_dataset, save_dataset, save_labelings

dataset_bp = Blueprint('dataset', __name__, cli_group=None)


@dataset_bp.cli.command('synth')
@click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False), help='Dataset directory.')
@click.option('--frames', type=click.IntRange(min=0), default=100, show_default=True)
@click.option('--seed', type=int, default=None, help='Dataset seed (default: SEED setting).')
@click.option('--split', default='train', show_default=True)
@click.option('--width', type=click.IntRange(min=16), default=None)
@click.option('--height', type=click.IntRange(min=16), default=None)
@click.option('--noisy-stixels', is_flag=True, help='Unsnapped, jittered Stixel boundaries.')
@click.option('--exact-detections', is_flag=True, help='Disable all detector noise.')
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@handle_errors
def synth(out_dir, frames, seed, split, width, height, noisy_stixels, exact_detections, config_path):
    """
    Generate a synthetic Stixel dataset with detections, GT and instance masks.
    """
    config = experiment(config_path, {'seed': seed})
    scene = SceneConfig(seed=config.seed)
    if width is not None:
        scene.width = width
    if height is not None:
        scene.height = height
    if noisy_stixels:
        scene.snap_to_columns = False
        scene.stixel_jitter_px = 2.0
    noise = DetectorNoise.zero() if exact_detections else DetectorNoise()

    dataset = generate_dataset(scene, noise, frames, config.seed, split, workers=config.threads)
    save_dataset(dataset, out_dir)

    n_stixels = sum(len(r.frame.stixels) for r in dataset)
    n_boxes = sum(len(r.detections) for r in dataset)
    n_instances = sum(len(r.labeling.instances()) for r in dataset if r.labeling is not None)
    current_app.logger.info('wrote %d frames to %s', frames, out_dir)
    click.echo(f"dataset: {out_dir}")
    click.echo(f"split: {split}  frames: {frames}  seed: {config.seed}")
    click.echo(f"stixels: {n_stixels}  detections: {n_boxes}  instances: {n_instances}")


def _require_masks(dataset: Dataset):
    missing = [fid for fid in dataset.frame_ids() if fid not in dataset.masks]
    if missing:
        raise StixelPointNetError(f"Frame {missing[0]} has no instance mask ({len(missing)} frames missing).")


@dataset_bp.cli.command('make-gt')
@click.option('--data', 'data_dir', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--tov', type=float, default=None, help=f'Overlap threshold t_ov (default {DEFAULT_T_OV}).')
@click.option('--sweep', default=None, help="Thresholds to sweep, 'a:b:step' or 'a,b,c'.")
@click.option('--criterion', type=click.Choice(['ap', 'ap50']), default='ap', show_default=True)
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), default=None,
              help='Labeling file (default: rewrite the dataset GT) or sweep CSV.')
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@handle_errors
def make_gt(data_dir, tov, sweep, criterion, out_path, config_path):
    """
    Generate Stixel-level GT from pixel instance masks, or sweep t_ov.
    """
    config = experiment(config_path, {})
    if sweep is not None and tov is not None:
        raise click.UsageError('--tov and --sweep are mutually exclusive.')
    t_ov = tov if tov is not None else float(current_app.config['T_OV'])
    ok, message = validate_t_ov(t_ov)
    if not ok:
        raise click.BadParameter(message, param_hint='--tov')

    dataset = load_dataset(data_dir)
    _require_masks(dataset)
    frames = [r.frame for r in dataset]
    masks = [dataset.masks[f.frame_id] for f in frames]

    if sweep is not None:
        try:
            thresholds = parse_thresholds(sweep)
        except ValueError as e:
            raise click.BadParameter(str(e), param_hint='--sweep') from e
        bad = [t for t in thresholds if not validate_t_ov(t)[0]]
        if bad or not thresholds:
            raise click.BadParameter('Sweep thresholds must lie in (0, 1].', param_hint='--sweep')
        result = sweep_t_ov(frames, masks, thresholds, dataset.class_table, criterion)
        target = out_path or os.path.join(data_dir, 'tov_sweep.csv')
        write_text(target, sweep_to_csv(result))
        write_run_manifest(target, 'make-gt', config, {'sweep': thresholds, 'criterion': criterion,
                                                       'best_threshold': result.best_threshold})
        for row in result.rows:
            click.echo(f"t_ov={row.threshold:.2f}  AP={100 * row.report.mean_ap:.1f}  "
                       f"AP50={100 * row.report.mean_ap50:.1f}")
        click.echo(f"best t_ov ({criterion}): {result.best_threshold:g}")
        click.echo(f"sweep table: {target}")
        return

    labelings = [generate_gt(f, m, t_ov, dataset.class_table) for f, m in zip(frames, masks)]
    if out_path:
        save_labelings(out_path, labelings)
        write_run_manifest(out_path, 'make-gt', config, {'t_ov': t_ov})
        target = out_path
    else:
        records = [DatasetRecord(r.frame, r.detections, l) for r, l in zip(dataset, labelings)]
        metadata = dict(dataset.metadata, t_ov=t_ov)
        save_dataset(Dataset(records, dataset.class_table, dataset.split, dataset.seed, dataset.masks, metadata),
                     data_dir)
        target = data_dir
    n_instances = sum(len(l.instances()) for l in labelings)
    click.echo(f"generated GT for {len(labelings)} frames at t_ov={t_ov:g}: {n_instances} instances -> {target}")
