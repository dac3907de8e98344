"""
GT Service Module - Stixel-level Ground Truth
Assigns Stixels to pixel-level instances by overlap and selects the assignment threshold t_ov
"""

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from domain import (
    BACKGROUND, ClassTable, InstanceId, InstanceLabeling, InvalidGeometryError, Stixel, StixelFrame,
    StixelPointNetError, default_class_table, make_instance_id, rect_pixel_bounds,
)
from services.eval_service import (
    IOU_THRESHOLDS, ApReport, average_precision_regions, mask_gt_instances, stixel_pred_instances,
)
from storage import InstanceMask

logger = logging.getLogger(__name__)

DEFAULT_T_OV = 0.35


class MaskMismatchError(StixelPointNetError):
    """A frame and its instance mask do not share dimensions."""


@dataclass
class OverlapAssignment:
    """Per-Stixel overlap with every instance it touches and the resulting winner."""
    stixel_id: int
    overlaps: Dict[int, float]
    winner: InstanceId
    winner_code: int = 0


@dataclass
class SweepRow:
    threshold: float
    report: ApReport


@dataclass
class SweepResult:
    rows: List[SweepRow]
    best_threshold: float
    criterion: str = 'ap'


def validate_t_ov(t_ov: float) -> Tuple[bool, str]:
    if not isinstance(t_ov, (int, float)) or math.isnan(t_ov):
        return False, 't_ov must be a number.'
    if not 0.0 < t_ov <= 1.0:
        return False, 't_ov must lie in (0, 1].'
    return True, ''


def _patch(stixel: Stixel, mask: InstanceMask) -> np.ndarray:
    u0, v0, u1, v1 = rect_pixel_bounds(stixel.rect, mask.width, mask.height)
    patch = mask.codes[v0:v1, u0:u1]
    if patch.size == 0:
        raise InvalidGeometryError(f"Stixel {stixel.stixel_id} covers no mask pixel.")
    return patch


def stixel_overlaps(stixel: Stixel, mask: InstanceMask) -> Dict[int, float]:
    """Overlap fraction of the stixel rectangle with every instance code it touches."""
    patch = _patch(stixel, mask)
    codes, counts = np.unique(patch, return_counts=True)
    total = float(patch.size)
    return {int(c): n / total for c, n in zip(codes, counts) if c != 0}


def overlap_fraction(stixel: Stixel, mask: InstanceMask, code: int) -> float:
    """
    Fraction of the stixel's pixels carrying one instance code.

    Args:
        stixel: stixel inside the mask bounds
        mask: instance mask
        code: instance code (label id * 1000 + counter)

    Returns:
        float: (stixel pixels with the code) / (stixel pixel count)
    """
    patch = _patch(stixel, mask)
    return float(np.count_nonzero(patch == code)) / float(patch.size)


def assign_overlaps(stixel: Stixel, mask: InstanceMask, t_ov: float,
                    class_table: Optional[ClassTable] = None) -> OverlapAssignment:
    class_table = class_table or default_class_table()
    overlaps = {c: f for c, f in stixel_overlaps(stixel, mask).items()
                if not class_table.instance_from_code(c).is_background}
    winner, winner_code, best = BACKGROUND, 0, -1.0
    # ascending code order: strict comparison keeps the smaller code on ties
    for code in sorted(overlaps):
        if overlaps[code] > best:
            best, winner_code = overlaps[code], code
    if winner_code and best > t_ov:
        winner = class_table.instance_from_code(winner_code)
    else:
        winner_code = 0
    return OverlapAssignment(stixel.stixel_id, overlaps, winner, winner_code)


def assign_stixel(stixel: Stixel, mask: InstanceMask, t_ov: float,
                  class_table: Optional[ClassTable] = None) -> InstanceId:
    """Instance with maximum overlap if it exceeds t_ov, else BACKGROUND (ties: smaller code)."""
    return assign_overlaps(stixel, mask, t_ov, class_table).winner


def generate_gt(frame: StixelFrame, mask: InstanceMask, t_ov: float = DEFAULT_T_OV,
                class_table: Optional[ClassTable] = None) -> InstanceLabeling:
    """
    Stixel-level instance ground truth from a pixel-level mask.

    Counters are re-densified per class (1, 2, ...) in ascending mask code order.
    """
    ok, message = validate_t_ov(t_ov)
    if not ok:
        raise ValueError(message)
    if (frame.width, frame.height) != (mask.width, mask.height):
        raise MaskMismatchError(
            f"Frame {frame.frame_id} is {frame.width}x{frame.height} but its mask is {mask.width}x{mask.height}.")
    class_table = class_table or default_class_table()
    winners = {s.stixel_id: assign_overlaps(s, mask, t_ov, class_table).winner_code for s in frame.stixels}

    dense: Dict[int, InstanceId] = {}
    per_class: Dict[int, int] = {}
    for code in sorted(set(winners.values()) - {0}):
        label = class_table.instance_from_code(code).label
        per_class[label] = per_class.get(label, 0) + 1
        dense[code] = make_instance_id(label, per_class[label])
    labels = {sid: dense.get(code, BACKGROUND) for sid, code in winners.items()}
    return InstanceLabeling(frame.frame_id, labels)


def sweep_t_ov(frames: Sequence[StixelFrame], masks: Sequence[InstanceMask], thresholds: Sequence[float],
               class_table: Optional[ClassTable] = None, criterion: str = 'ap',
               evaluator=average_precision_regions) -> SweepResult:
    """
    Score generated GT as a prediction of the pixel masks for every threshold.

    Args:
        frames, masks: paired frames and pixel-level masks (at least one)
        thresholds: sorted thresholds in (0, 1]
        criterion: 'ap' or 'ap50', the score that picks the best threshold
        evaluator: AP function over (predictions, GT) region pairs

    Returns:
        SweepResult: one row per threshold, best threshold (ties: smaller)
    """
    if not thresholds:
        raise ValueError('Threshold list is empty.')
    if not frames or len(frames) != len(masks):
        raise ValueError('Need at least one frame and one mask per frame.')
    if list(thresholds) != sorted(thresholds):
        raise ValueError('Thresholds must be sorted.')
    if criterion not in ('ap', 'ap50'):
        raise ValueError(f"Unknown sweep criterion '{criterion}'.")
    class_table = class_table or default_class_table()
    gt_instances = [mask_gt_instances(m, class_table) for m in masks]

    rows = []
    best_threshold, best_score = None, -1.0
    for t_ov in thresholds:
        pairs = []
        for frame, mask, gts in zip(frames, masks, gt_instances):
            labeling = generate_gt(frame, mask, t_ov, class_table)
            pairs.append((stixel_pred_instances(frame, labeling, class_table), gts))
        report = evaluator(pairs, class_table)
        rows.append(SweepRow(float(t_ov), report))
        score = report.mean_ap if criterion == 'ap' else report.mean_ap50
        score = -1.0 if math.isnan(score) else score
        logger.debug('t_ov=%.3f AP=%.4f AP50=%.4f', t_ov, report.mean_ap, report.mean_ap50)
        if score > best_score:
            best_threshold, best_score = float(t_ov), score
    return SweepResult(rows, best_threshold, criterion)


def parse_thresholds(spec: str) -> List[float]:
    """'0.05:0.95:0.05' (start:stop:step, inclusive) or '0.1,0.35,0.5'."""
    spec = spec.strip()
    if ':' in spec:
        start, stop, step = (float(p) for p in spec.split(':'))
        if step <= 0:
            raise ValueError('Sweep step must be positive.')
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 10) for i in range(count)]
    return sorted(float(p) for p in spec.split(',') if p.strip())


def sweep_to_csv(result: SweepResult) -> str:
    names = list(result.rows[0].report.class_names.values()) if result.rows else []
    ids = list(result.rows[0].report.class_names) if result.rows else []
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(['threshold'] + [f'AP_{n}' for n in names] + ['mean_AP', 'mean_AP50'])
    for row in result.rows:
        writer.writerow([f'{row.threshold:g}'] + [f'{row.report.ap[c]:.6f}' for c in ids]
                        + [f'{row.report.mean_ap:.6f}', f'{row.report.mean_ap50:.6f}'])
    return buffer.getvalue()
