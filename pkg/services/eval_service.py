"""
Eval Service Module - Average Precision
Instance matching and Cityscapes-style AP on Stixel-level and pixel-level regions
"""

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from domain import ClassTable, InstanceId, InstanceLabeling, Rect, StixelFrame, rect_pixel_bounds
from storage import Dataset, InstanceMask

logger = logging.getLogger(__name__)

# IoU thresholds 0.50:0.05:0.95
IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass
class Region:
    """A set of pixels: boolean grid over a bounding window at (u0, v0)."""
    u0: int
    v0: int
    pixels: np.ndarray

    @property
    def area(self) -> int:
        return int(self.pixels.sum())


@dataclass
class GtInstance:
    label: int
    region: Region
    key: object = None


@dataclass
class PredInstance:
    label: int
    score: float
    region: Region
    key: object = None


@dataclass
class Match:
    """Greedy matching outcome for one frame at one IoU threshold."""
    tp: List[Tuple[int, int]]
    fp: List[int]
    fn: List[int]


@dataclass
class ApReport:
    """
    AP per evaluated class (mean over IoU thresholds) and AP50.

    Classes with neither GT nor predictions hold NaN and are excluded from the means.
    counts[class][threshold] = (TP, FP, FN)
    """
    class_names: Dict[int, str]
    ap: Dict[int, float]
    ap50: Dict[int, float]
    counts: Dict[int, Dict[float, Tuple[int, int, int]]] = field(default_factory=dict)

    @property
    def mean_ap(self) -> float:
        return _nanmean(self.ap.values())

    @property
    def mean_ap50(self) -> float:
        return _nanmean(self.ap50.values())


def _nanmean(values: Iterable[float]) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float('nan')


# Regions

def rects_region(rects: Sequence[Rect], width: int, height: int) -> Region:
    """Union of rectangles rasterized at pixel resolution (pixel centers, half-open bounds)."""
    bounds = [rect_pixel_bounds(r, width, height) for r in rects]
    bounds = [b for b in bounds if b[2] > b[0] and b[3] > b[1]]
    if not bounds:
        return Region(0, 0, np.zeros((0, 0), dtype=bool))
    u0 = min(b[0] for b in bounds)
    v0 = min(b[1] for b in bounds)
    u1 = max(b[2] for b in bounds)
    v1 = max(b[3] for b in bounds)
    pixels = np.zeros((v1 - v0, u1 - u0), dtype=bool)
    for bu0, bv0, bu1, bv1 in bounds:
        pixels[bv0 - v0:bv1 - v0, bu0 - u0:bu1 - u0] = True
    return Region(u0, v0, pixels)


def mask_region(codes: np.ndarray, code: int) -> Region:
    hits = codes == code
    if not hits.any():
        return Region(0, 0, np.zeros((0, 0), dtype=bool))
    rows = np.flatnonzero(hits.any(axis=1))
    cols = np.flatnonzero(hits.any(axis=0))
    v0, v1, u0, u1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    return Region(int(u0), int(v0), hits[v0:v1, u0:u1])


def region_iou(a: Region, b: Region) -> float:
    area_a, area_b = a.area, b.area
    if area_a == 0 or area_b == 0:
        return 0.0
    ha, wa = a.pixels.shape
    hb, wb = b.pixels.shape
    u0, v0 = max(a.u0, b.u0), max(a.v0, b.v0)
    u1, v1 = min(a.u0 + wa, b.u0 + wb), min(a.v0 + ha, b.v0 + hb)
    inter = 0
    if u1 > u0 and v1 > v0:
        pa = a.pixels[v0 - a.v0:v1 - a.v0, u0 - a.u0:u1 - a.u0]
        pb = b.pixels[v0 - b.v0:v1 - b.v0, u0 - b.u0:u1 - b.u0]
        inter = int(np.logical_and(pa, pb).sum())
    return inter / float(area_a + area_b - inter)


def instance_iou(pred_stixels: Iterable[int], gt_stixels: Iterable[int], frame: StixelFrame) -> float:
    """IoU of the pixel regions formed by the union of each set's stixel rectangles."""
    by_id = frame.by_id()
    a = rects_region([by_id[s].rect for s in pred_stixels], frame.width, frame.height)
    b = rects_region([by_id[s].rect for s in gt_stixels], frame.width, frame.height)
    return region_iou(a, b)


# Instance adapters

def _scored_label(label: int, class_table: Optional[ClassTable]) -> int:
    return class_table.merged(label) if class_table is not None else label


def stixel_gt_instances(frame: StixelFrame, gt: InstanceLabeling,
                        class_table: Optional[ClassTable] = None) -> List[GtInstance]:
    by_id = frame.by_id()
    return [GtInstance(_scored_label(iid.label, class_table),
                       rects_region([by_id[s].rect for s in sids], frame.width, frame.height), iid)
            for iid, sids in gt.groups().items()]


def stixel_pred_instances(frame: StixelFrame, pred: InstanceLabeling,
                          class_table: Optional[ClassTable] = None) -> List[PredInstance]:
    """Predicted instances; with a class table, labels are scored under their merged class."""
    by_id = frame.by_id()
    return [PredInstance(_scored_label(iid.label, class_table), float(pred.confidences.get(iid, 1.0)),
                         rects_region([by_id[s].rect for s in sids], frame.width, frame.height), iid)
            for iid, sids in pred.groups().items()]


def mask_gt_instances(mask: InstanceMask, class_table: ClassTable) -> List[GtInstance]:
    instances = []
    for code in mask.instance_codes():
        iid = class_table.instance_from_code(code)
        if not iid.is_background:
            instances.append(GtInstance(iid.label, mask_region(mask.codes, code), iid))
    return instances


# Matching

def match_instances(preds: Sequence[PredInstance], gts: Sequence[GtInstance], iou_threshold: float,
                    ious: Optional[np.ndarray] = None) -> Match:
    """
    Greedy matching in descending confidence order (stable for ties).

    Each prediction takes the unmatched same-class GT with highest IoU if that
    IoU exceeds the threshold; remaining predictions are FP, remaining GT are FN.
    """
    if ious is None:
        ious = iou_matrix(preds, gts)
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    taken = [False] * len(gts)
    tp, fp = [], []
    for p in order:
        best, best_iou = -1, iou_threshold
        for g, gt in enumerate(gts):
            if taken[g] or gt.label != preds[p].label:
                continue
            if ious[p, g] > best_iou:
                best, best_iou = g, ious[p, g]
        if best >= 0:
            taken[best] = True
            tp.append((p, best))
        else:
            fp.append(p)
    fn = [g for g in range(len(gts)) if not taken[g]]
    return Match(tp, fp, fn)


def match_labelings(frame: StixelFrame, pred: InstanceLabeling, gt: InstanceLabeling,
                     iou_threshold: float) -> Tuple[List[InstanceId], List[InstanceId], List[InstanceId]]:
    """
    Match a predicted labeling against GT on one frame.

    Returns:
        tuple: (matched prediction ids, false-positive ids, missed GT ids)
    """
    preds = stixel_pred_instances(frame, pred)
    gts = stixel_gt_instances(frame, gt)
    match = match_instances(preds, gts, iou_threshold)
    return ([preds[p].key for p, _ in match.tp], [preds[p].key for p in match.fp],
            [gts[g].key for g in match.fn])


def iou_matrix(preds: Sequence[PredInstance], gts: Sequence[GtInstance]) -> np.ndarray:
    ious = np.zeros((len(preds), len(gts)))
    for p, pred in enumerate(preds):
        for g, gt in enumerate(gts):
            if pred.label == gt.label:
                ious[p, g] = region_iou(pred.region, gt.region)
    return ious


def precision_recall_ap(scores: Sequence[float], is_tp: Sequence[bool], n_gt: int) -> float:
    """Area under the all-point interpolated precision-recall curve."""
    if n_gt == 0:
        return 0.0
    if not scores:
        return 0.0
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    hits = np.array([1.0 if is_tp[i] else 0.0 for i in order])
    tps = np.cumsum(hits)
    fps = np.cumsum(1.0 - hits)
    recall = tps / n_gt
    precision = tps / (tps + fps)
    # precision envelope from the right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate(([0.0], recall[:-1]))
    return float(np.sum((recall - prev_recall) * envelope))


def average_precision_regions(frames: Sequence[Tuple[List[PredInstance], List[GtInstance]]],
                              class_table: ClassTable,
                              thresholds: Sequence[float] = IOU_THRESHOLDS) -> ApReport:
    """
    Dataset-level AP from per-frame prediction and GT instances.

    Predictions are ranked across the whole dataset; frame order then
    in-frame order break confidence ties.
    """
    evaluated = sorted(class_table.evaluated)
    ious = [iou_matrix(p, g) for p, g in frames]
    ap: Dict[int, float] = {}
    ap50: Dict[int, float] = {}
    counts: Dict[int, Dict[float, Tuple[int, int, int]]] = {c: {} for c in evaluated}
    per_class_ap: Dict[int, List[float]] = {c: [] for c in evaluated}

    n_gt = {c: sum(1 for _, gts in frames for g in gts if g.label == c) for c in evaluated}
    n_pred = {c: sum(1 for preds, _ in frames for p in preds if p.label == c) for c in evaluated}

    for th in thresholds:
        scores: Dict[int, List[float]] = {c: [] for c in evaluated}
        hits: Dict[int, List[bool]] = {c: [] for c in evaluated}
        tally = {c: [0, 0, 0] for c in evaluated}
        for (preds, gts), frame_ious in zip(frames, ious):
            match = match_instances(preds, gts, th, frame_ious)
            matched = {p for p, _ in match.tp}
            for p, pred in enumerate(preds):
                if pred.label in scores:
                    scores[pred.label].append(pred.score)
                    hits[pred.label].append(p in matched)
                    tally[pred.label][0 if p in matched else 1] += 1
            for g in match.fn:
                if gts[g].label in tally:
                    tally[gts[g].label][2] += 1
        for c in evaluated:
            counts[c][th] = tuple(tally[c])
            per_class_ap[c].append(precision_recall_ap(scores[c], hits[c], n_gt[c]))

    for c in evaluated:
        if n_gt[c] == 0 and n_pred[c] == 0:
            ap[c] = ap50[c] = float('nan')
            continue
        ap[c] = float(np.mean(per_class_ap[c]))
        ap50[c] = per_class_ap[c][list(thresholds).index(0.5)] if 0.5 in thresholds else float('nan')
    names = {c: class_table.names[c] for c in evaluated}
    return ApReport(names, ap, ap50, counts)


def average_precision(dataset: Dataset, predictions: Sequence[InstanceLabeling]) -> ApReport:
    """
    Stixel-level AP of predicted labelings against the dataset's GT labelings.

    Args:
        dataset: frames with ground truth
        predictions: one labeling per frame (matched by frame_id; missing frames count as empty)
    """
    by_frame = {p.frame_id: p for p in predictions}
    table = dataset.class_table
    frames = []
    for record in dataset:
        pred = by_frame.get(record.frame.frame_id)
        preds = stixel_pred_instances(record.frame, pred, table) if pred is not None else []
        gts = stixel_gt_instances(record.frame, record.labeling, table) if record.labeling is not None else []
        frames.append((preds, gts))
    report = average_precision_regions(frames, table)
    logger.debug('Stixel-level AP %.4f / AP50 %.4f over %d frames', report.mean_ap, report.mean_ap50, len(frames))
    return report


def pixel_average_precision(frames: Sequence[StixelFrame], masks: Sequence[InstanceMask],
                            predictions: Sequence[InstanceLabeling], class_table: ClassTable) -> ApReport:
    """Pixel-level AP: Stixel predictions scored against pixel instance masks."""
    pairs = []
    for frame, mask, pred in zip(frames, masks, predictions):
        pairs.append((stixel_pred_instances(frame, pred, class_table), mask_gt_instances(mask, class_table)))
    return average_precision_regions(pairs, class_table)


def normalized_ap50(report: ApReport, upper_bound: ApReport) -> float:
    """Mean AP50 divided by the AP50 reached when Stixel GT itself is the prediction."""
    bound = upper_bound.mean_ap50
    if not bound or math.isnan(bound):
        return float('nan')
    return report.mean_ap50 / bound


# Output

def report_rows(report: ApReport) -> List[Dict]:
    rows = []
    for c, name in report.class_names.items():
        rows.append({'class': name, 'AP': report.ap[c], 'AP50': report.ap50[c]})
    rows.append({'class': 'mean', 'AP': report.mean_ap, 'AP50': report.mean_ap50})
    return rows


def report_to_csv(report: ApReport) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=['class', 'AP', 'AP50'], lineterminator='\n')
    writer.writeheader()
    for row in report_rows(report):
        writer.writerow({k: (f'{v:.6f}' if isinstance(v, float) else v) for k, v in row.items()})
    return buffer.getvalue()


def format_report(report: ApReport) -> str:
    lines = [f"{'class':<12}{'AP':>8}{'AP50':>8}"]
    for row in report_rows(report):
        ap = '-' if math.isnan(row['AP']) else f"{100 * row['AP']:.1f}"
        ap50 = '-' if math.isnan(row['AP50']) else f"{100 * row['AP50']:.1f}"
        lines.append(f"{row['class']:<12}{ap:>8}{ap50:>8}")
    return '\n'.join(lines)
