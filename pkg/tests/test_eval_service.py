import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import CAR, PERSON, make_frame, make_stixel
from domain import BACKGROUND, InstanceId, InstanceLabeling, Rect, default_class_table
from services.eval_service import (
    IOU_THRESHOLDS, ApReport, GtInstance, PredInstance, average_precision, average_precision_regions,
    format_report, instance_iou, mask_region, match_instances, match_labelings, normalized_ap50,
    pixel_average_precision, precision_recall_ap, rects_region, region_iou, report_to_csv,
)
from storage import Dataset, DatasetRecord, InstanceMask


def _region(u0, v0, u1, v1, width=100, height=100):
    return rects_region([Rect(u0, v0, u1, v1)], width, height)


# --- Tests for regions and IoU ---

def test_iou_thresholds():
    """Test the ten IoU thresholds 0.50 to 0.95."""
    assert len(IOU_THRESHOLDS) == 10
    assert IOU_THRESHOLDS[0] == 0.5 and IOU_THRESHOLDS[-1] == 0.95


def test_rects_region_counts_overlap_once():
    """Test that overlapping Stixel rectangles form one pixel union."""
    region = rects_region([Rect(0, 0, 10, 10), Rect(5, 5, 15, 15)], 100, 100)
    assert region.area == 175


def test_region_iou():
    """Test IoU of offset pixel regions."""
    assert region_iou(_region(0, 0, 10, 10), _region(5, 0, 15, 10)) == pytest.approx(50 / 150)
    assert region_iou(_region(0, 0, 10, 10), _region(20, 20, 30, 30)) == 0.0
    assert region_iou(_region(0, 0, 10, 10), rects_region([], 100, 100)) == 0.0


def test_mask_region_matches_rectangle_region():
    """Test that a painted mask and the equal rectangle give IoU 1."""
    codes = np.zeros((20, 20), dtype=np.int64)
    codes[2:8, 3:9] = 26001
    assert region_iou(mask_region(codes, 26001), _region(3, 2, 9, 8, 20, 20)) == 1.0


def test_instance_iou(two_car_frame):
    """Test IoU of two Stixel sets of a frame."""
    frame, _, _ = two_car_frame
    assert instance_iou([0, 1, 2, 3], [0, 1, 2, 3], frame) == 1.0
    assert instance_iou([0, 1], [0, 1, 2, 3], frame) == pytest.approx(0.5)
    assert instance_iou([0], [4], frame) == 0.0


# --- Tests for matching ---

def test_match_prefers_higher_confidence():
    """Test that the more confident prediction takes the shared GT."""
    gt = [GtInstance(CAR, _region(0, 0, 10, 10))]
    preds = [PredInstance(CAR, 0.4, _region(0, 0, 10, 10)), PredInstance(CAR, 0.9, _region(0, 0, 10, 9))]
    match = match_instances(preds, gt, 0.5)
    assert match.tp == [(1, 0)]
    assert match.fp == [0]
    assert match.fn == []


def test_match_needs_iou_above_threshold():
    """Test that IoU equal to the threshold does not match."""
    gt = [GtInstance(CAR, _region(0, 0, 10, 10))]
    preds = [PredInstance(CAR, 1.0, _region(0, 0, 10, 5))]
    assert match_instances(preds, gt, 0.5).tp == []
    assert match_instances(preds, gt, 0.45).tp == [(0, 0)]


def test_match_ignores_other_classes():
    """Test that a prediction never matches GT of another class."""
    gt = [GtInstance(PERSON, _region(0, 0, 10, 10))]
    preds = [PredInstance(CAR, 1.0, _region(0, 0, 10, 10))]
    match = match_instances(preds, gt, 0.5)
    assert match.fp == [0] and match.fn == [0]


def test_match_labelings(two_car_frame):
    """Test labeling-level matching returns instance ids."""
    frame, gt, _ = two_car_frame
    pred = InstanceLabeling('f0', {**gt.labels, 4: BACKGROUND, 5: BACKGROUND})
    tp, fp, fn = match_labelings(frame, pred, gt, 0.5)
    assert tp == [InstanceId(CAR, 1)]
    assert fp == []
    assert fn == [InstanceId(CAR, 2)]


# --- Tests for precision-recall ---

def test_precision_recall_all_point_interpolation():
    """Test AP against a hand-computed precision-recall curve."""
    # recall 0.5 at precision 1, then recall 1 at precision 2/3
    ap = precision_recall_ap([0.9, 0.8, 0.7], [True, False, True], n_gt=2)
    assert ap == pytest.approx(0.5 * 1.0 + 0.5 * (2 / 3))


def test_precision_recall_envelope_lifts_earlier_points():
    """Test that a later higher precision raises earlier recall levels."""
    ap = precision_recall_ap([0.9, 0.8, 0.7, 0.6], [False, True, True, True], n_gt=4)
    # recall 0.25 / 0.5 / 0.75 at precision 1/2, 2/3, 3/4; envelope is 3/4 throughout
    assert ap == pytest.approx(0.75 * 0.75)


def test_precision_recall_empty_cases():
    """Test AP without GT or without predictions."""
    assert precision_recall_ap([], [], n_gt=3) == 0.0
    assert precision_recall_ap([0.5], [False], n_gt=0) == 0.0


# --- Tests for dataset AP ---

def _dataset(two_car_frame):
    frame, gt, boxes = two_car_frame
    return Dataset([DatasetRecord(frame, boxes, gt)])


def test_perfect_prediction_scores_one(two_car_frame):
    """Test that predicting the GT yields AP 1 for the present class."""
    dataset = _dataset(two_car_frame)
    _, gt, _ = two_car_frame
    report = average_precision(dataset, [gt])
    assert report.ap[CAR] == 1.0
    assert report.ap50[CAR] == 1.0
    assert math.isnan(report.ap[PERSON])
    assert report.mean_ap == 1.0


def test_missing_prediction_scores_zero(two_car_frame):
    """Test that a frame without prediction counts every GT instance as missed."""
    report = average_precision(_dataset(two_car_frame), [])
    assert report.ap[CAR] == 0.0
    assert report.counts[CAR][0.5] == (0, 0, 2)


def test_false_class_prediction_enters_mean(two_car_frame):
    """Test that predictions of an absent class score 0 and lower the mean."""
    _, gt, _ = two_car_frame
    labels = dict(gt.labels)
    labels[6] = InstanceId(PERSON, 1)
    report = average_precision(_dataset(two_car_frame), [InstanceLabeling('f0', labels)])
    assert report.ap[PERSON] == 0.0
    assert report.mean_ap == pytest.approx(0.5)


def test_confidence_ordering_matters(two_car_frame):
    """Test that a confident false positive lowers AP more than an unconfident one."""
    _, gt, _ = two_car_frame
    dataset = _dataset(two_car_frame)
    labels = dict(gt.labels)
    labels[6] = InstanceId(CAR, 3)

    def score(fp_conf):
        conf = {InstanceId(CAR, 1): 0.9, InstanceId(CAR, 2): 0.8, InstanceId(CAR, 3): fp_conf}
        return average_precision(dataset, [InstanceLabeling('f0', labels, conf)]).ap[CAR]

    assert score(0.1) == pytest.approx(1.0)
    assert score(0.95) < score(0.1)


def test_regions_ap_ranks_across_frames():
    """Test that predictions of all frames form one ranking."""
    gt_a = [GtInstance(CAR, _region(0, 0, 10, 10))]
    gt_b = [GtInstance(CAR, _region(0, 0, 10, 10))]
    preds_a = [PredInstance(CAR, 0.9, _region(0, 0, 10, 10))]
    preds_b = [PredInstance(CAR, 0.95, _region(50, 50, 60, 60))]
    report = average_precision_regions([(preds_a, gt_a), (preds_b, gt_b)], default_class_table())
    # FP first at precision 0, then TP at recall 0.5 with precision 0.5
    assert report.ap50[CAR] == pytest.approx(0.25)


# --- Tests for AP properties on random detections ---

BOX = 40


def _random_frames(rng, n_frames=3):
    """
    Frames of well separated 40x40 GT boxes with jittered predictions and false positives.

    Returns (frames, truth) where truth lists per frame (label, score, gt index or None, IoU) for each prediction.
    """
    frames, truth = [], []
    for _ in range(n_frames):
        gts, preds, info = [], [], []
        for cell in range(int(rng.integers(0, 7))):
            u0, v0 = 30 + 100 * (cell % 3), 30 + 100 * (cell // 3)
            label = CAR if rng.random() < 0.6 else PERSON
            gts.append(GtInstance(label, _region(u0, v0, u0 + BOX, v0 + BOX, 400, 300)))
            for _ in range(int(rng.integers(0, 3))):
                du, dv = (int(d) for d in rng.integers(-20, 21, size=2))
                pred_label = label if rng.random() < 0.85 else CAR + PERSON - label
                inter = (BOX - abs(du)) * (BOX - abs(dv))
                preds.append(PredInstance(pred_label, float(rng.random()),
                                          _region(u0 + du, v0 + dv, u0 + du + BOX, v0 + dv + BOX, 400, 300)))
                info.append((pred_label, preds[-1].score, len(gts) - 1 if pred_label == label else None,
                             inter / (2 * BOX * BOX - inter)))
        for _ in range(int(rng.integers(0, 3))):
            v0 = int(rng.integers(0, 250))
            preds.append(PredInstance(CAR if rng.random() < 0.5 else PERSON, float(rng.random()),
                                      _region(320, v0, 360, v0 + BOX, 400, 300)))
            info.append((preds[-1].label, preds[-1].score, None, 0.0))
        frames.append((preds, gts))
        truth.append(info)
    return frames, truth


def _exhaustive_ap(frames, truth, label, threshold):
    """AP from every score cut: per-frame greedy matching, then the best precision at each recall level."""
    n_gt = sum(1 for _, gts in frames for g in gts if g.label == label)
    ranked = []
    for info in truth:
        taken = set()
        for pred_label, score, gt, iou in sorted(info, key=lambda item: -item[1]):
            hit = gt is not None and iou > threshold and gt not in taken
            if hit:
                taken.add(gt)
            if pred_label == label:
                ranked.append((score, hit))
    if n_gt == 0:
        return 0.0
    ranked.sort(key=lambda item: -item[0])
    cuts = []
    for k in range(1, len(ranked) + 1):
        tp = sum(1 for _, hit in ranked[:k] if hit)
        cuts.append((tp / n_gt, tp / k))
    ap, previous = 0.0, 0.0
    for recall, _ in cuts:
        if recall > previous:
            ap += (recall - previous) * max(p for r, p in cuts if r >= recall)
            previous = recall
    return ap


def test_ap_matches_exhaustive_precision_recall(rng):
    """Test dataset AP against a cut-by-cut precision/recall computation on 3-frame datasets."""
    table = default_class_table()
    for _ in range(40):
        frames, truth = _random_frames(rng)
        for threshold in (0.5, 0.75):
            report = average_precision_regions(frames, table, thresholds=(threshold,))
            for label in (CAR, PERSON):
                if math.isnan(report.ap[label]):
                    assert not any(g.label == label for _, gts in frames for g in gts)
                    continue
                assert report.ap[label] == pytest.approx(_exhaustive_ap(frames, truth, label, threshold), abs=1e-12)


def test_stricter_iou_never_raises_ap(rng):
    """Test that AP at IoU 0.75 never exceeds AP at IoU 0.5."""
    table = default_class_table()
    for _ in range(50):
        frames, _ = _random_frames(rng)
        loose = average_precision_regions(frames, table, thresholds=(0.5,))
        strict = average_precision_regions(frames, table, thresholds=(0.75,))
        for label in (CAR, PERSON):
            if not math.isnan(loose.ap[label]):
                assert strict.ap[label] <= loose.ap[label] + 1e-12


def test_ap_ignores_monotone_confidence_rescaling(rng):
    """Test that a strictly increasing map of all confidences leaves AP unchanged."""
    table = default_class_table()
    for _ in range(30):
        frames, _ = _random_frames(rng)
        rescaled = [([replace(p, score=0.05 + 0.9 * p.score ** 3) for p in preds], gts) for preds, gts in frames]
        before = average_precision_regions(frames, table)
        after = average_precision_regions(rescaled, table)
        for label in table.evaluated:
            if math.isnan(before.ap[label]):
                assert math.isnan(after.ap[label])
            else:
                assert after.ap[label] == before.ap[label]
                assert after.ap50[label] == before.ap50[label]


def test_pixel_ap_and_normalization():
    """Test pixel-level AP against masks and its normalization by the GT bound."""
    frame = make_frame([make_stixel(0, 0, 0, 10, 10), make_stixel(1, 10, 0, 20, 10, PERSON)], width=20, height=10)
    codes = np.zeros((10, 20), dtype=np.int64)
    codes[:, :10] = 26001
    codes[:, 10:] = 24001
    mask = InstanceMask(codes)
    gt = InstanceLabeling('f0', {0: InstanceId(CAR, 1), 1: InstanceId(PERSON, 1)})
    pred = InstanceLabeling('f0', {0: InstanceId(CAR, 1), 1: BACKGROUND})

    bound = pixel_average_precision([frame], [mask], [gt], default_class_table())
    report = pixel_average_precision([frame], [mask], [pred], default_class_table())
    assert bound.mean_ap50 == 1.0
    assert report.mean_ap50 == pytest.approx(0.5)
    assert normalized_ap50(report, bound) == pytest.approx(0.5)


def test_normalized_ap50_without_bound():
    """Test that a zero bound gives NaN."""
    empty = ApReport({CAR: 'car'}, {CAR: 0.0}, {CAR: 0.0})
    assert math.isnan(normalized_ap50(empty, empty))


# --- Tests for report output ---

def test_report_csv_and_table(two_car_frame):
    """Test CSV rows and the printed table with NaN classes."""
    _, gt, _ = two_car_frame
    report = average_precision(_dataset(two_car_frame), [gt])
    lines = report_to_csv(report).splitlines()
    assert lines[0] == 'class,AP,AP50'
    assert 'car,1.000000,1.000000' in lines
    assert lines[-1] == 'mean,1.000000,1.000000'

    table = format_report(report)
    assert 'person' in table and '-' in table
    assert '100.0' in table
