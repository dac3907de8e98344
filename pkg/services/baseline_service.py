"""
Baseline Service Module - Non-learned Competitors
Statistical center-fill segmentation and hierarchical clustering per RoI and per image
"""

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from domain import BACKGROUND, ClassTable, ConfigError, InstanceId, InstanceLabeling, StixelFrame, default_class_table
from services.filter_service import FilterParams, RoiSample, filter_frame
from services.pointnet_service import target_assignment
from storage import Dataset

logger = logging.getLogger(__name__)

STATISTICAL_METRICS = ('l1', 'l2')
HAC_WINNER_RULES = ('area', 'count')

DEFAULT_MU = {
    'person': 1.0,
    'rider': 5.0,
    'car': 5.0,
    'truck': 15.0,
    'bus': 20.0,
    'motorcycle': 5.0,
    'bicycle': 2.5,
}


class MissingPercentageError(KeyError):
    """No p_c was estimated for a class."""


@dataclass
class ClassPercentages:
    """Average share of object Stixels among the captured Stixels of a class's RoIs."""
    values: Dict[int, float] = field(default_factory=dict)
    support: Dict[int, int] = field(default_factory=dict)

    def __getitem__(self, label: int) -> float:
        if label not in self.values:
            raise MissingPercentageError(f"No percentage estimated for class {label}.")
        return self.values[label]

    def __contains__(self, label: int) -> bool:
        return label in self.values

    def to_csv(self, class_table: ClassTable) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(['class', 'p_c', 'rois'])
        for label in sorted(self.values):
            writer.writerow([class_table.names[label], f'{self.values[label]:.6f}', self.support.get(label, 0)])
        return buffer.getvalue()

    def to_dict(self) -> Dict[str, float]:
        return {str(k): v for k, v in sorted(self.values.items())}

    @classmethod
    def from_dict(cls, data: Dict) -> 'ClassPercentages':
        values = {int(k): float(v) for k, v in data.items()}
        if any(not 0.0 < v <= 1.0 for v in values.values()):
            raise ConfigError('Class percentages must lie in (0, 1].')
        return cls(values)


@dataclass(frozen=True)
class HacConfig:
    """Complete linkage on Euclidean (x, z) distance with per-class stop thresholds in meters."""
    mu: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_MU))
    winner: str = 'area'

    def mu_for(self, label: int, class_table: ClassTable) -> float:
        name = class_table.names[class_table.merged(label)]
        if name not in self.mu:
            raise ConfigError(f"No HAC distance threshold configured for class '{name}'.")
        return self.mu[name]


def validate_hac_config(config: HacConfig) -> Tuple[bool, str]:
    for name, mu in config.mu.items():
        if not mu > 0:
            return False, f"HAC threshold for '{name}' must be positive."
    if config.winner not in HAC_WINNER_RULES:
        return False, f"HAC winner rule must be one of {', '.join(HAC_WINNER_RULES)}."
    return True, ''


# Statistical baseline

def estimate_percentages(dataset: Dataset, params: FilterParams,
                         class_table: Optional[ClassTable] = None) -> ClassPercentages:
    """
    Mean object-Stixel fraction per class over all RoIs associated with a GT instance.

    Classes without any such RoI are absent from the result.
    """
    class_table = class_table or dataset.class_table
    fractions: Dict[int, List[float]] = {}
    for record in dataset:
        if record.labeling is None:
            continue
        for sample in filter_frame(record.frame, record.detections, params, class_table):
            targets, instance = target_assignment(sample, record.labeling, class_table)
            if instance is None:
                continue
            label = class_table.merged(sample.roi.box_label)
            fractions.setdefault(label, []).append(float(targets.sum()) / len(sample))
    values = {c: float(np.mean(f)) for c, f in sorted(fractions.items())}
    logger.debug('Estimated class percentages %s', values)
    return ClassPercentages(values, {c: len(f) for c, f in fractions.items()})


def statistical_count(p: float, n: int) -> int:
    return int(math.floor(p * n + 1e-9))


def statistical_segment(sample: RoiSample, p: float, metric: str = 'l2') -> np.ndarray:
    """
    Label the floor(p * N') Stixels closest to the RoI center as object.

    Distances run from stixel rectangle centers to the RoI rectangle center in
    pixels; ties go to the lower stixel_id.
    """
    if not 0.0 < p <= 1.0:
        raise ConfigError(f"Percentage must lie in (0, 1], got {p}.")
    if metric not in STATISTICAL_METRICS:
        raise ConfigError(f"Unknown distance metric '{metric}'.")
    rects = sample.rects
    cu, cv = sample.roi.rect.center
    du = (rects[:, 0] + rects[:, 2]) / 2.0 - cu
    dv = (rects[:, 1] + rects[:, 3]) / 2.0 - cv
    dist = np.abs(du) + np.abs(dv) if metric == 'l1' else np.hypot(du, dv)
    order = np.lexsort((np.asarray(sample.stixel_ids), dist))
    labels = np.zeros(len(sample), dtype=np.int64)
    labels[order[:statistical_count(p, len(sample))]] = 1
    return labels


# Hierarchical clustering

def _relabel(raw: np.ndarray) -> np.ndarray:
    mapping: Dict[int, int] = {}
    return np.array([mapping.setdefault(int(c), len(mapping)) for c in raw], dtype=np.int64)


def hac_cluster(points: np.ndarray, mu: float) -> np.ndarray:
    """
    Complete-linkage agglomerative clustering stopped once the next merge distance exceeds mu.

    Returns:
        np.ndarray: cluster index per point, numbered by first appearance
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if points.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    if points.shape[0] == 1:
        return np.zeros(1, dtype=np.int64)
    if math.isinf(mu):
        return np.zeros(points.shape[0], dtype=np.int64)
    tree = linkage(points, method='complete', metric='euclidean')
    return _relabel(fcluster(tree, t=mu, criterion='distance'))


def _cluster_areas(rects: np.ndarray, clusters: np.ndarray) -> np.ndarray:
    areas = (rects[:, 2] - rects[:, 0]) * (rects[:, 3] - rects[:, 1])
    return np.bincount(clusters, weights=areas)


def hac_img(frame: StixelFrame, config: HacConfig = HacConfig(),
            class_table: Optional[ClassTable] = None) -> InstanceLabeling:
    """
    Cluster the Stixels of every semantic class separately; each cluster is one instance.

    Counters follow descending cluster area, first appearance breaking ties;
    every instance has confidence 1.0.
    """
    class_table = class_table or default_class_table()
    labels: Dict[int, InstanceId] = {sid: BACKGROUND for sid in frame.stixel_ids}
    confidences: Dict[InstanceId, float] = {}
    stixels = sorted(frame.stixels, key=lambda s: s.stixel_id)
    by_class: Dict[int, list] = {}
    for s in stixels:
        if class_table.is_instance_class(s.label):
            by_class.setdefault(class_table.merged(s.label), []).append(s)

    for label in sorted(by_class):
        members = by_class[label]
        points = np.array([(s.x, s.z) for s in members])
        rects = np.array([s.rect for s in members], dtype=np.float64)
        clusters = hac_cluster(points, config.mu_for(label, class_table))
        areas = _cluster_areas(rects, clusters)
        ranked = sorted(range(len(areas)), key=lambda c: (-areas[c], c))
        counter_of = {c: rank + 1 for rank, c in enumerate(ranked)}
        for s, c in zip(members, clusters):
            iid = InstanceId(label, counter_of[int(c)])
            labels[s.stixel_id] = iid
            confidences[iid] = 1.0
    return InstanceLabeling(frame.frame_id, labels, confidences)


def hac_roi(sample: RoiSample, config: HacConfig = HacConfig(),
            class_table: Optional[ClassTable] = None) -> np.ndarray:
    """
    Binary segmentation of one RoI by clustering its same-class Stixels.

    The cluster with the largest summed pixel area (or Stixel count, per
    config.winner) is labeled 1, first appearance breaking ties.
    """
    class_table = class_table or default_class_table()
    box_class = class_table.merged(sample.roi.box_label)
    result = np.zeros(len(sample), dtype=np.int64)
    same = np.array([class_table.merged(int(l)) == box_class for l in sample.labels], dtype=bool)
    if not same.any():
        return result
    rows = np.flatnonzero(same)
    clusters = hac_cluster(sample.ground_points[rows], config.mu_for(box_class, class_table))
    if config.winner == 'count':
        scores = np.bincount(clusters).astype(np.float64)
    else:
        scores = _cluster_areas(sample.rects[rows], clusters)
    # argmax keeps the first cluster on ties
    result[rows[clusters == int(np.argmax(scores))]] = 1
    return result
