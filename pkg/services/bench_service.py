"""
Bench Service Module - Runtime Estimation
Times filtering, the network forward pass, BPS and the composed pipeline on synthetic workloads
"""

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from domain import ConfigError, default_class_table
from services.bps_service import BpsConfig, RoiVotes, fuse
from services.filter_service import FEATURE_NAMES, FilterParams, augment_features, filter_frame
from services.pointnet_service import ArchitectureSpec, cast_state, forward_batch, init_state, softmax
from services.synth_service import generate_workload

logger = logging.getLogger(__name__)

DEFAULT_WARMUPS = 10


@dataclass(frozen=True)
class Workload:
    n_stixels: int = 753
    n_boxes: int = 50
    n_features: int = 10


DEFAULT_WORKLOAD = Workload(753, 50, 10)

TABLE_WORKLOADS = (
    Workload(753, 50, 10),
    Workload(1500, 50, 10),
    Workload(753, 100, 10),
    Workload(1500, 100, 10),
    Workload(1500, 100, 20),
)


@dataclass
class BenchReport:
    """Mean wall times in seconds over the timed runs."""
    workload: Workload
    runs: int
    warmups: int
    filtering: float
    model: float
    bps: float
    overall: float
    n_samples: int = 0
    stdev: Dict[str, float] = field(default_factory=dict)

    @property
    def fps(self) -> float:
        return 1.0 / self.overall if self.overall > 0 else float('inf')


def _time(fn: Callable[[], object], runs: int, warmups: int) -> List[float]:
    for _ in range(warmups):
        fn()
    times = []
    for _ in range(runs):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return times


def run_benchmark(workload: Workload = DEFAULT_WORKLOAD, runs: int = 100, seed: int = 0,
                  warmups: int = DEFAULT_WARMUPS, spec: Optional[ArchitectureSpec] = None,
                  params: FilterParams = FilterParams(), bps_config: BpsConfig = BpsConfig()) -> BenchReport:
    """
    Time every pipeline component on a deterministic synthetic workload.

    The network is untrained and runs in float32; feature columns beyond the
    standard ten are random.

    Args:
        workload: Stixel, box and feature counts
        runs: timed repetitions R (at least 1)
        seed: workload and weight seed
        warmups: untimed repetitions before each timed section

    Returns:
        BenchReport: per-component and overall mean times
    """
    if runs < 1:
        raise ConfigError('Benchmark needs at least one run.')
    if workload.n_features < len(FEATURE_NAMES):
        raise ConfigError(f"Workloads need at least {len(FEATURE_NAMES)} features.")
    class_table = default_class_table()
    frame, boxes = generate_workload(workload.n_stixels, workload.n_boxes, seed, class_table=class_table)
    spec = replace(spec or ArchitectureSpec(), input_width=workload.n_features)
    state = cast_state(init_state(spec, seed), np.float32)
    n_extra = workload.n_features - len(FEATURE_NAMES)

    def filtering():
        rng = np.random.default_rng([seed, 2])
        return [augment_features(s, n_extra, rng) for s in filter_frame(frame, boxes, params, class_table)]

    samples = filtering()

    def model():
        return [softmax(logits)[:, 1] for logits in forward_batch(state, samples)]

    pcs = model()
    rois = [RoiVotes.of(s.roi.box_label, s.roi.box_conf, s.stixel_ids, pc) for s, pc in zip(samples, pcs)]

    def selection():
        return fuse(frame.frame_id, frame.stixel_ids, rois, bps_config)

    def pipeline():
        found = filtering()
        probs = [softmax(logits)[:, 1] for logits in forward_batch(state, found)]
        votes = [RoiVotes.of(s.roi.box_label, s.roi.box_conf, s.stixel_ids, pc) for s, pc in zip(found, probs)]
        return fuse(frame.frame_id, frame.stixel_ids, votes, bps_config)

    timings = {name: _time(fn, runs, warmups) for name, fn in
               (('filtering', filtering), ('model', model), ('bps', selection), ('overall', pipeline))}
    means = {name: float(np.mean(t)) for name, t in timings.items()}
    report = BenchReport(workload, runs, warmups, means['filtering'], means['model'], means['bps'],
                         means['overall'], len(samples), {name: float(np.std(t)) for name, t in timings.items()})
    logger.info('workload %s: filtering %.2f ms, model %.2f ms, BPS %.2f ms, overall %.2f ms',
                workload, 1e3 * report.filtering, 1e3 * report.model, 1e3 * report.bps, 1e3 * report.overall)
    return report


def run_table(workloads: Sequence[Workload] = TABLE_WORKLOADS, runs: int = 100, seed: int = 0,
              warmups: int = DEFAULT_WARMUPS, spec: Optional[ArchitectureSpec] = None,
              params: FilterParams = FilterParams(), bps_config: BpsConfig = BpsConfig()) -> List[BenchReport]:
    """One report per workload, all sharing seed, run counts and pipeline parameters."""
    if not workloads:
        raise ConfigError('Benchmark needs at least one workload.')
    return [run_benchmark(w, runs, seed, warmups, spec, params, bps_config) for w in workloads]


# Output

BENCH_COLUMNS = ['stixels', 'boxes', 'features', 'filtering_ms', 'model_ms', 'bps_ms', 'overall_ms', 'fps', 'runs']


def _row(report: BenchReport) -> List:
    w = report.workload
    return [w.n_stixels, w.n_boxes, w.n_features, f'{1e3 * report.filtering:.3f}', f'{1e3 * report.model:.3f}',
            f'{1e3 * report.bps:.3f}', f'{1e3 * report.overall:.3f}', f'{report.fps:.1f}', report.runs]


def bench_to_csv(reports: Sequence[BenchReport]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(BENCH_COLUMNS)
    for report in reports:
        writer.writerow(_row(report))
    return buffer.getvalue()


def format_bench(reports: Sequence[BenchReport]) -> str:
    widths = [max(len(c), 9) for c in BENCH_COLUMNS]
    lines = [''.join(f'{c:>{w + 1}}' for c, w in zip(BENCH_COLUMNS, widths))]
    for report in reports:
        lines.append(''.join(f'{str(v):>{w + 1}}' for v, w in zip(_row(report), widths)))
    return '\n'.join(lines)
