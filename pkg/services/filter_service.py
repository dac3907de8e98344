"""
Filter Service Module - RoI Filtering
Scales detection boxes into RoI boxes, captures Stixels and builds the network input features
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from domain import ClassTable, ConfigError, DetectionBox, Rect, StixelFrame, default_class_table

FEATURE_NAMES = ('x', 'y', 'z', 'w', 'h', 'u_rel', 'v_rel', 'h_rel', 'l', 'l_bb')
METRIC_COLUMNS = 5


@dataclass(frozen=True)
class FilterParams:
    sc_roi: float = 1.0
    t_roi: float = 0.1


@dataclass(frozen=True)
class RoiBox:
    """A detection box scaled by sc_roi around its center and clamped to the image."""
    rect: Rect
    source: DetectionBox
    scale: float

    @property
    def box_label(self) -> int:
        return self.source.box_label

    @property
    def box_conf(self) -> float:
        return self.source.box_conf


@dataclass
class RoiSample:
    """
    The captured Stixels of one RoI box.

    features: (N', 10) rows [x, y, z, w, h, u', v', h', l, l_bb] in stixel_id order
    rects: (N', 4) raw pixel rectangles, labels: (N',) raw semantic labels
    roi_index: index of the source detection in the frame's box list
    metric: (N', 5) unscaled x, y, z, w, h
    """
    roi: RoiBox
    stixel_ids: List[int]
    features: np.ndarray
    rects: np.ndarray
    labels: np.ndarray
    roi_index: int = 0
    metric: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.stixel_ids)

    @property
    def ground_points(self) -> np.ndarray:
        """(x, z) positions in meters."""
        metric = self.metric if self.metric is not None else self.features[:, :METRIC_COLUMNS]
        return metric[:, [0, 2]]


@dataclass
class FeatureScaler:
    """Optional standardization of the metric columns x, y, z, w, h."""
    mean: np.ndarray = field(default_factory=lambda: np.zeros(METRIC_COLUMNS))
    std: np.ndarray = field(default_factory=lambda: np.ones(METRIC_COLUMNS))

    @classmethod
    def fit(cls, samples: Sequence[RoiSample]) -> 'FeatureScaler':
        if not samples:
            return cls()
        rows = np.concatenate([s.features[:, :METRIC_COLUMNS] for s in samples], axis=0)
        std = rows.std(axis=0)
        std[std < 1e-12] = 1.0
        return cls(rows.mean(axis=0), std)

    def transform(self, features: np.ndarray) -> np.ndarray:
        out = features.copy()
        out[:, :METRIC_COLUMNS] = (out[:, :METRIC_COLUMNS] - self.mean) / self.std
        return out

    def to_dict(self) -> dict:
        return {'mean': [float(v) for v in self.mean], 'std': [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> Optional['FeatureScaler']:
        if not data:
            return None
        return cls(np.array(data['mean'], dtype=np.float64), np.array(data['std'], dtype=np.float64))


def validate_filter_params(params: FilterParams) -> Tuple[bool, str]:
    if params.sc_roi < 1.0:
        return False, 'sc_RoI must be >= 1.'
    if not 0.0 < params.t_roi <= 1.0:
        return False, 't_RoI must lie in (0, 1].'
    return True, ''


def scale_box(det: DetectionBox, sc_roi: float, image_size: Optional[Tuple[int, int]] = None) -> RoiBox:
    """
    Center-preserving scaling of a detection box.

    Args:
        det: detection box
        sc_roi: scale factor >= 1
        image_size: (width, height) to clamp to, or None

    Returns:
        RoiBox: the scaled box
    """
    if sc_roi < 1.0:
        raise ConfigError(f"sc_RoI must be >= 1, got {sc_roi}.")
    if sc_roi == 1.0:
        u0, v0, u1, v1 = det.u_tl, det.v_tl, det.u_br, det.v_br
    else:
        cu, cv = (det.u_tl + det.u_br) / 2.0, (det.v_tl + det.v_br) / 2.0
        half_w = (det.u_br - det.u_tl) * sc_roi / 2.0
        half_h = (det.v_br - det.v_tl) * sc_roi / 2.0
        u0, v0, u1, v1 = cu - half_w, cv - half_h, cu + half_w, cv + half_h
    if image_size is not None:
        width, height = image_size
        u0, v0 = max(0.0, u0), max(0.0, v0)
        u1, v1 = min(float(width), u1), min(float(height), v1)
    return RoiBox(Rect(u0, v0, u1, v1), det, sc_roi)


def capture_matrix(rects: np.ndarray, rois: Sequence[RoiBox], t_roi: float) -> np.ndarray:
    """(B, N) capture decisions of B RoI boxes against an (N, 4) rectangle array."""
    if rects.shape[0] == 0 or not rois:
        return np.zeros((len(rois), rects.shape[0]), dtype=bool)
    boxes = np.array([roi.rect for roi in rois], dtype=np.float64)
    du = np.minimum(rects[None, :, 2], boxes[:, None, 2]) - np.maximum(rects[None, :, 0], boxes[:, None, 0])
    dv = np.minimum(rects[None, :, 3], boxes[:, None, 3]) - np.maximum(rects[None, :, 1], boxes[:, None, 1])
    inter = np.clip(du, 0.0, None) * np.clip(dv, 0.0, None)
    area = (rects[:, 2] - rects[:, 0]) * (rects[:, 3] - rects[:, 1])
    return inter / area[None, :] > t_roi


def capture_mask(rects: np.ndarray, roi: RoiBox, t_roi: float) -> np.ndarray:
    """Boolean capture decision for every row of an (N, 4) rectangle array."""
    return capture_matrix(rects, [roi], t_roi)[0]


def capture(frame: StixelFrame, roi: RoiBox, t_roi: float) -> List[int]:
    """Stixel ids with more than t_roi of their area inside the RoI box, ascending."""
    if not 0.0 < t_roi <= 1.0:
        raise ConfigError(f"t_RoI must lie in (0, 1], got {t_roi}.")
    hits = capture_mask(frame.rect_array(), roi, t_roi)
    ids = np.array(frame.stixel_ids, dtype=np.int64)
    return sorted(int(i) for i in ids[hits])


def build_sample(frame: StixelFrame, roi: RoiBox, captured: Sequence[int],
                 class_table: Optional[ClassTable] = None, roi_index: int = 0,
                 scaler: Optional[FeatureScaler] = None) -> Optional[RoiSample]:
    """
    Feature matrix of the captured Stixels; None when nothing was captured.

    u' and v' place the stixel rectangle center inside the RoI box, h' is the
    stixel pixel height relative to the RoI height; labels are scaled class indices.
    """
    if not captured:
        return None
    class_table = class_table or default_class_table()
    table = StixelTable.of(frame)
    rows = np.array([table.row_of[sid] for sid in sorted(captured)], dtype=np.int64)
    return _sample_from_rows(table, rows, roi, class_table, roi_index, scaler)


@dataclass
class StixelTable:
    """Column arrays of a frame's Stixels, sorted by stixel_id."""
    ids: np.ndarray
    metric: np.ndarray
    rects: np.ndarray
    labels: np.ndarray
    row_of: dict

    @classmethod
    def of(cls, frame: StixelFrame) -> 'StixelTable':
        stixels = sorted(frame.stixels, key=lambda s: s.stixel_id)
        ids = np.array([s.stixel_id for s in stixels], dtype=np.int64)
        metric = np.array([(s.x, s.y, s.z, s.w, s.h) for s in stixels], dtype=np.float64).reshape(-1, 5)
        rects = np.array([s.rect for s in stixels], dtype=np.float64).reshape(-1, 4)
        labels = np.array([s.label for s in stixels], dtype=np.int64)
        return cls(ids, metric, rects, labels, {int(sid): i for i, sid in enumerate(ids)})


def _sample_from_rows(table: StixelTable, rows: np.ndarray, roi: RoiBox, class_table: ClassTable,
                      roi_index: int, scaler: Optional[FeatureScaler]) -> RoiSample:
    r = roi.rect
    roi_w = max(r.u_br - r.u_tl, 1e-9)
    roi_h = max(r.v_br - r.v_tl, 1e-9)
    rects = table.rects[rows]
    labels = table.labels[rows]
    features = np.empty((len(rows), len(FEATURE_NAMES)), dtype=np.float64)
    features[:, :METRIC_COLUMNS] = table.metric[rows]
    features[:, 5] = ((rects[:, 0] + rects[:, 2]) / 2.0 - r.u_tl) / roi_w
    features[:, 6] = ((rects[:, 1] + rects[:, 3]) / 2.0 - r.v_tl) / roi_h
    features[:, 7] = (rects[:, 3] - rects[:, 1]) / roi_h
    features[:, 8] = labels / max(1, len(class_table) - 1)
    features[:, 9] = class_table.encode_label(roi.box_label)
    if scaler is not None:
        features = scaler.transform(features)
    return RoiSample(roi, [int(i) for i in table.ids[rows]], features, rects, labels, roi_index,
                     table.metric[rows])


def filter_frame(frame: StixelFrame, detections: Sequence[DetectionBox], params: FilterParams,
                 class_table: Optional[ClassTable] = None,
                 scaler: Optional[FeatureScaler] = None) -> List[RoiSample]:
    """Run scaling, capture and feature building for every box; empty RoIs are skipped."""
    ok, message = validate_filter_params(params)
    if not ok:
        raise ConfigError(message)
    class_table = class_table or default_class_table()
    table = StixelTable.of(frame)
    rois = [scale_box(det, params.sc_roi, (frame.width, frame.height)) for det in detections]
    hits = capture_matrix(table.rects, rois, params.t_roi)
    samples = []
    for index, roi in enumerate(rois):
        rows = np.flatnonzero(hits[index])
        if rows.size:
            samples.append(_sample_from_rows(table, rows, roi, class_table, index, scaler))
    return samples


def augment_features(sample: RoiSample, n_extra: int, rng: np.random.Generator) -> RoiSample:
    """Append n_extra arbitrary feature columns (runtime studies only)."""
    if n_extra <= 0:
        return sample
    extra = rng.standard_normal((len(sample), n_extra))
    return RoiSample(sample.roi, sample.stixel_ids, np.hstack([sample.features, extra]),
                     sample.rects, sample.labels, sample.roi_index, sample.metric)
