"""
Report Commands - AP evaluation, runtime benchmark and SVG rendering
"""

import hashlib
import os

import click
from flask import Blueprint, current_app, render_template

from commands.helpers import experiment, handle_errors, write_run_manifest, write_text
from domain import BACKGROUND, InstanceId, InstanceLabeling, StixelFrame, StixelPointNetError
from services.bench_service import (
    DEFAULT_WORKLOAD, TABLE_WORKLOADS, Workload, bench_to_csv, format_bench, run_table,
)
from services.eval_service import (
    average_precision, format_report, normalized_ap50, pixel_average_precision, report_to_csv,
)
from storage import load_dataset, load_labelings

report_bp = Blueprint('report', __name__, cli_group=None)

BACKGROUND_COLOR = '#808080'


@report_bp.cli.command('eval')
@click.option('--data', 'data_dir', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--pred', 'pred_path', required=True, type=click.Path(exists=True, dir_okay=False),
              help='Predicted labelings.')
@click.option('--level', type=click.Choice(['stixel', 'pixel']), default='stixel', show_default=True)
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), default=None, help='AP report CSV.')
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@handle_errors
def evaluate(data_dir, pred_path, level, out_path, config_path):
    """
    Score predicted labelings with Stixel-level or pixel-level AP.
    """
    config = experiment(config_path, {})
    dataset = load_dataset(data_dir, load_masks=(level == 'pixel'))
    predictions = load_labelings(pred_path)
    known = set(dataset.frame_ids())
    unknown = [p.frame_id for p in predictions if p.frame_id not in known]
    if unknown:
        raise StixelPointNetError(f"Prediction for unknown frame {unknown[0]}.")

    extra = {'data': data_dir, 'pred': pred_path, 'level': level}
    if level == 'stixel':
        report = average_precision(dataset, predictions)
    else:
        missing = [fid for fid in dataset.frame_ids() if fid not in dataset.masks]
        if missing:
            raise StixelPointNetError(f"Frame {missing[0]} has no instance mask.")
        by_frame = {p.frame_id: p for p in predictions}
        frames = [r.frame for r in dataset]
        masks = [dataset.masks[f.frame_id] for f in frames]
        preds = [by_frame.get(f.frame_id, InstanceLabeling(f.frame_id, {})) for f in frames]
        report = pixel_average_precision(frames, masks, preds, dataset.class_table)
        gts = [r.labeling or InstanceLabeling(r.frame.frame_id, {}) for r in dataset]
        bound = pixel_average_precision(frames, masks, gts, dataset.class_table)
        extra['upper_bound_ap50'] = bound.mean_ap50
        extra['nap50'] = normalized_ap50(report, bound)

    click.echo(format_report(report))
    if level == 'pixel':
        click.echo(f"upper bound AP50: {100 * extra['upper_bound_ap50']:.1f}  nAP50: {100 * extra['nap50']:.1f}")
    if out_path:
        write_text(out_path, report_to_csv(report))
        write_run_manifest(out_path, 'eval', config, extra)
        current_app.logger.info('AP report written to %s', out_path)


@report_bp.cli.command('bench')
@click.option('--rows', type=click.Choice(['default', 'table']), default='default', show_default=True)
@click.option('--stixels', type=click.IntRange(min=1), default=None)
@click.option('--boxes', type=click.IntRange(min=0), default=None)
@click.option('--features', type=click.IntRange(min=10), default=None)
@click.option('--runs', type=click.IntRange(min=1), default=None, help='Timed runs R.')
@click.option('--warmups', type=click.IntRange(min=0), default=None)
@click.option('--seed', type=int, default=None)
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), default=None, help='Benchmark CSV.')
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@handle_errors
def bench(rows, stixels, boxes, features, runs, warmups, seed, out_path, config_path):
    """
    Time filtering, the network, BPS and the whole pipeline on synthetic workloads.
    """
    config = experiment(config_path, {'seed': seed})
    runs = runs or int(current_app.config['BENCH_RUNS'])
    warmups = warmups if warmups is not None else int(current_app.config['BENCH_WARMUPS'])
    if rows == 'table':
        if any(v is not None for v in (stixels, boxes, features)):
            raise click.UsageError('--rows table runs the fixed workloads; drop the workload flags.')
        workloads = list(TABLE_WORKLOADS)
    else:
        workloads = [Workload(stixels or DEFAULT_WORKLOAD.n_stixels,
                              boxes if boxes is not None else DEFAULT_WORKLOAD.n_boxes,
                              features or DEFAULT_WORKLOAD.n_features)]
    reports = run_table(workloads, runs, config.seed, warmups, params=config.filter, bps_config=config.bps)
    click.echo(format_bench(reports))
    if out_path:
        write_text(out_path, bench_to_csv(reports))
        write_run_manifest(out_path, 'bench', config, {'runs': runs, 'warmups': warmups})


# Helper Functions for rendering

def instance_color(instance: InstanceId) -> str:
    """Stable color of an instance; BACKGROUND is gray."""
    if instance.is_background:
        return BACKGROUND_COLOR
    digest = hashlib.md5(f'{instance.label}:{instance.counter}'.encode('ascii')).hexdigest()
    return f'#{digest[:6]}'


def render_frame(frame: StixelFrame, labeling: InstanceLabeling, class_names, method: str = '') -> str:
    stixels = []
    for s in sorted(frame.stixels, key=lambda st: st.stixel_id):
        iid = labeling.labels.get(s.stixel_id, BACKGROUND)
        title = 'background' if iid.is_background else f'{class_names[iid.label]} {iid.counter}'
        stixels.append({
            'x': f'{s.u_tl:g}', 'y': f'{s.v_tl:g}',
            'w': f'{s.u_br - s.u_tl:g}', 'h': f'{s.v_br - s.v_tl:g}',
            'color': instance_color(iid), 'title': f'stixel {s.stixel_id}: {title}',
        })
    return render_template('frame.svg', frame_id=frame.frame_id, width=frame.width, height=frame.height,
                           stixels=stixels, method=method)


@report_bp.cli.command('render')
@click.option('--data', 'data_dir', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--labels', 'labels_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Labelings to draw (default: the dataset GT).')
@click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False), help='SVG directory.')
@click.option('--limit', type=click.IntRange(min=1), default=None, help='Render only the first N frames.')
@handle_errors
def render(data_dir, labels_path, out_dir, limit):
    """
    Draw one SVG per frame; Stixels of the same instance share a color.
    """
    dataset = load_dataset(data_dir, load_masks=False)
    if labels_path:
        by_frame = {l.frame_id: l for l in load_labelings(labels_path)}
        method = os.path.basename(labels_path)
    else:
        by_frame = {r.frame.frame_id: r.labeling for r in dataset if r.labeling is not None}
        method = 'ground truth'
    os.makedirs(out_dir, exist_ok=True)
    records = dataset.records[:limit] if limit else dataset.records
    for record in records:
        frame = record.frame
        labeling = by_frame.get(frame.frame_id) or InstanceLabeling(frame.frame_id, {})
        write_text(os.path.join(out_dir, f'{frame.frame_id}.svg'),
                   render_frame(frame, labeling, dataset.class_table.names, method))
    click.echo(f"rendered {len(records)} frames -> {out_dir}")
