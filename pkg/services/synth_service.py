"""
Synth Service Module - Synthetic Scene Generation
Renders deterministic Stixel frames, pixel instance masks, ground truth and SSD-like detections
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from domain import (
    BACKGROUND, ClassTable, ConfigError, DetectionBox, InstanceId, InstanceLabeling,
    Stixel, StixelFrame, default_class_table, make_instance_id,
)
from storage import Dataset, DatasetRecord, InstanceMask

logger = logging.getLogger(__name__)

Seed = Union[int, Sequence[int]]

DEFAULT_OBJECT_COUNTS = {
    'person': (0, 4),
    'rider': (0, 1),
    'car': (1, 4),
    'truck': (0, 1),
    'bus': (0, 1),
    'train': (0, 0),
    'motorcycle': (0, 1),
    'bicycle': (0, 2),
}

# (width range, height range) in meters, as seen by the camera
DEFAULT_OBJECT_SIZES = {
    'person': ((0.5, 0.8), (1.5, 1.9)),
    'rider': ((0.6, 1.8), (1.6, 1.9)),
    'car': ((1.7, 4.5), (1.4, 1.7)),
    'truck': ((2.4, 7.0), (2.8, 3.8)),
    'bus': ((2.5, 11.0), (3.0, 3.4)),
    'train': ((3.0, 20.0), (3.5, 4.0)),
    'motorcycle': ((0.8, 2.0), (1.1, 1.5)),
    'bicycle': ((0.6, 1.8), (1.0, 1.2)),
}

# semantic confusions of flipped object Stixels, by class name
DEFAULT_CONFUSIONS = {
    'person': ('rider',),
    'rider': ('person', 'bicycle', 'motorcycle'),
    'car': ('truck',),
    'truck': ('car', 'bus'),
    'bus': ('truck',),
    'train': ('truck',),
    'motorcycle': ('bicycle', 'rider'),
    'bicycle': ('motorcycle', 'rider'),
}


@dataclass
class SceneConfig:
    """
    Scene generator settings.

    Camera: pinhole at camera_height meters over a flat ground plane, optical
    axis parallel to the ground, principal point at (width / 2, horizon_row).

    Semantic noise: an object Stixel keeps its class with probability
    1 - label_flip_rate, otherwise it turns into the background class or a
    confusable class with equal odds; a free-space Stixel turns into a random
    instance class with probability background_flip_rate. With
    group_probability a new object stands beside an earlier object of its
    class at nearly the same depth (parked cars, groups of pedestrians).
    """
    width: int = 512
    height: int = 256
    focal: float = 300.0
    camera_height: float = 1.5
    horizon_row: Optional[float] = None
    object_counts: Dict[str, Tuple[int, int]] = field(default_factory=lambda: dict(DEFAULT_OBJECT_COUNTS))
    object_sizes: Dict[str, Tuple[Tuple[float, float], Tuple[float, float]]] = field(
        default_factory=lambda: dict(DEFAULT_OBJECT_SIZES))
    depth_range: Tuple[float, float] = (6.0, 40.0)
    column_width: int = 8
    occlusion_probability: float = 0.3
    snap_to_columns: bool = True
    stixel_jitter_px: float = 0.0
    background_stixels: bool = True
    max_stixel_height: int = 64
    label_flip_rate: float = 0.05
    background_flip_rate: float = 0.01
    confusions: Dict[str, Tuple[str, ...]] = field(default_factory=lambda: dict(DEFAULT_CONFUSIONS))
    group_probability: float = 0.3
    # lateral gap in meters between grouped objects and std of their depth offset
    group_gap: Tuple[float, float] = (0.1, 0.6)
    group_depth_jitter: float = 0.3
    seed: int = 0

    @property
    def cy(self) -> float:
        return self.horizon_row if self.horizon_row is not None else 0.45 * self.height

    @property
    def cx(self) -> float:
        return self.width / 2.0

    def validate(self, class_table: ClassTable) -> None:
        if self.width < 1 or self.height < 1:
            raise ConfigError('Image size must be positive.')
        if self.column_width < 1:
            raise ConfigError('Column width must be at least one pixel.')
        if self.focal <= 0 or self.camera_height <= 0:
            raise ConfigError('Focal length and camera height must be positive.')
        lo, hi = self.depth_range
        if not 0 < lo <= hi:
            raise ConfigError('Depth range must be a nonempty positive interval.')
        rates = (self.occlusion_probability, self.label_flip_rate, self.background_flip_rate,
                 self.group_probability)
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise ConfigError('Probabilities must lie in [0, 1].')
        if not 0.0 <= self.group_gap[0] <= self.group_gap[1] or self.group_depth_jitter < 0:
            raise ConfigError('Group gap must be a nonempty range >= 0 and its depth jitter >= 0.')
        for name, targets in self.confusions.items():
            if any(n not in class_table.names for n in (name,) + tuple(targets)):
                raise ConfigError(f"Unknown class in the confusions of '{name}'.")
        if self.stixel_jitter_px < 0 or self.max_stixel_height < 1:
            raise ConfigError('Stixel jitter must be >= 0 and max stixel height >= 1.')
        for name, (c_lo, c_hi) in self.object_counts.items():
            if name not in class_table.names:
                raise ConfigError(f"Unknown class '{name}' in object counts.")
            if not 0 <= c_lo <= c_hi:
                raise ConfigError(f"Object count range of '{name}' is empty.")
            if c_hi > 0 and name not in self.object_sizes:
                raise ConfigError(f"No size range for class '{name}'.")
        for name, ((w_lo, w_hi), (h_lo, h_hi)) in self.object_sizes.items():
            if not (0 < w_lo <= w_hi and 0 < h_lo <= h_hi):
                raise ConfigError(f"Size range of '{name}' is empty.")


@dataclass
class DetectorNoise:
    """
    Detector emulation settings.

    Confidence model: conf = clamp(conf_base - conf_jitter_weight * jitter
    - conf_occlusion_weight * occlusion_fraction + N(0, conf_noise), 0, 1).
    """
    center_jitter: float = 0.05
    scale_jitter: float = 0.08
    miss_rate: float = 0.1
    class_miss_rates: Dict[str, float] = field(default_factory=dict)
    false_positive_rate: float = 0.1
    conf_base: float = 0.95
    conf_jitter_weight: float = 0.5
    conf_occlusion_weight: float = 0.3
    conf_noise: float = 0.05
    fp_conf_mean: float = 0.4

    @classmethod
    def zero(cls) -> 'DetectorNoise':
        return cls(center_jitter=0.0, scale_jitter=0.0, miss_rate=0.0, false_positive_rate=0.0,
                   conf_base=1.0, conf_jitter_weight=0.0, conf_occlusion_weight=0.0, conf_noise=0.0)

    def validate(self) -> None:
        rates = [self.miss_rate, self.false_positive_rate] + list(self.class_miss_rates.values())
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise ConfigError('Detector rates must lie in [0, 1].')
        if min(self.center_jitter, self.scale_jitter, self.conf_noise) < 0:
            raise ConfigError('Detector standard deviations must be >= 0.')

    def miss_rate_for(self, name: str) -> float:
        return self.class_miss_rates.get(name, self.miss_rate)


@dataclass(frozen=True)
class SceneObject:
    """An axis-aligned fronto-parallel box standing on the ground plane."""
    label: int
    x: float
    z: float
    width: float
    height: float


# Camera geometry

def project_u(config: SceneConfig, x: float, z: float) -> float:
    return config.cx + config.focal * x / z


def project_v(config: SceneConfig, y: float, z: float) -> float:
    return config.cy + config.focal * (config.camera_height - y) / z


def pixel_to_x(config: SceneConfig, u: float, z: float) -> float:
    return (u - config.cx) * z / config.focal


def pixel_to_y(config: SceneConfig, v: float, z: float) -> float:
    return config.camera_height - (v - config.cy) * z / config.focal


def ground_depth(config: SceneConfig, v: float) -> float:
    """Depth of the ground plane seen at image row v; rows at or above the horizon map to the far limit."""
    far = 2.0 * config.depth_range[1]
    if v <= config.cy + 1e-6:
        return far
    return min(far, config.focal * config.camera_height / (v - config.cy))


def object_pixel_rect(config: SceneConfig, obj: SceneObject) -> Tuple[int, int, int, int]:
    """Integer pixel rectangle covered by an object, clipped to the image (may be empty)."""
    u_l = project_u(config, obj.x - obj.width / 2.0, obj.z)
    u_r = project_u(config, obj.x + obj.width / 2.0, obj.z)
    v_t = project_v(config, obj.height, obj.z)
    v_b = project_v(config, 0.0, obj.z)
    cw = config.column_width
    if config.snap_to_columns:
        u0 = int(math.floor(u_l / cw + 0.5)) * cw
        u1 = int(math.floor(u_r / cw + 0.5)) * cw
        if u1 <= u0:
            u1 = u0 + cw
    else:
        u0 = int(math.floor(u_l + 0.5))
        u1 = max(u0 + 1, int(math.floor(u_r + 0.5)))
    v0 = int(math.floor(v_t + 0.5))
    v1 = max(v0 + 1, int(math.floor(v_b + 0.5)))
    u0, u1 = max(0, u0), min(config.width, u1)
    v0, v1 = max(0, v0), min(config.height, v1)
    return u0, v0, u1, v1


# Scene sampling and rendering

def sample_objects(config: SceneConfig, rng: np.random.Generator, class_table: ClassTable) -> List[SceneObject]:
    """Draw the object list of one scene."""
    objects: List[SceneObject] = []
    z_lo, z_hi = config.depth_range
    for name in class_table.names:
        if name not in config.object_counts:
            continue
        c_lo, c_hi = config.object_counts[name]
        count = int(rng.integers(c_lo, c_hi + 1))
        (w_lo, w_hi), (h_lo, h_hi) = config.object_sizes.get(name, ((1.0, 1.0), (1.0, 1.0)))
        label = class_table.index(name)
        for _ in range(count):
            z = float(rng.uniform(z_lo, z_hi))
            width = float(rng.uniform(w_lo, w_hi))
            height = float(rng.uniform(h_lo, h_hi))
            peers = [o for o in objects if o.label == label]
            if peers and rng.random() < config.group_probability:
                anchor = peers[int(rng.integers(len(peers)))]
                side = 1.0 if rng.random() < 0.5 else -1.0
                gap = float(rng.uniform(*config.group_gap))
                z = float(np.clip(anchor.z + rng.normal(0.0, config.group_depth_jitter), z_lo, z_hi))
                x = anchor.x + side * (anchor.width / 2.0 + width / 2.0 + gap)
                objects.append(SceneObject(label, x, z, width, height))
                continue
            if objects and rng.random() < config.occlusion_probability:
                # place next to an existing object so that one partly hides the other
                anchor = objects[int(rng.integers(len(objects)))]
                u_anchor = project_u(config, anchor.x, anchor.z)
                span = config.focal * anchor.width / anchor.z
                u_center = u_anchor + float(rng.normal(0.0, 0.5 * span))
            else:
                u_center = float(rng.uniform(0, config.width))
            objects.append(SceneObject(label, pixel_to_x(config, u_center, z), z, width, height))
    return objects


def _column_runs(column: np.ndarray) -> List[Tuple[int, int, int]]:
    """Runs of equal values as (start, end, value)."""
    if column.size == 0:
        return []
    change = np.flatnonzero(np.diff(column)) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [column.size]))
    return [(int(s), int(e), int(column[s])) for s, e in zip(starts, ends)]


def _confused_label(config: SceneConfig, class_table: ClassTable, label: int, rng: np.random.Generator) -> int:
    """Noisy semantic label of an object Stixel: background or a confusable class."""
    own = class_table.merged(label)
    names = config.confusions.get(class_table.names[label], ())
    choices = sorted({class_table.merged(class_table.index(n)) for n in names} - {own})
    if class_table.background is not None and (not choices or rng.random() < 0.5):
        return class_table.background
    if not choices:
        return own
    return int(choices[int(rng.integers(len(choices)))])


def render_scene(config: SceneConfig, objects: Sequence[SceneObject], rng: np.random.Generator,
                 frame_id: str = 'frame', class_table: Optional[ClassTable] = None
                 ) -> Tuple[StixelFrame, InstanceMask, InstanceLabeling]:
    """
    Render objects into an instance mask and extract one Stixel per visible run.

    Each Stixel column is sampled at its center pixel column; every vertical run
    of one object becomes an object Stixel, free runs become background Stixels
    when enabled. Nearest object wins per pixel, ties go to the earlier object.
    """
    class_table = class_table or default_class_table()
    width, height = config.width, config.height
    buffer = np.zeros((height, width), dtype=np.int32)
    order = sorted(range(len(objects)), key=lambda i: (-objects[i].z, -i))
    for i in order:
        u0, v0, u1, v1 = object_pixel_rect(config, objects[i])
        if u1 > u0 and v1 > v0:
            buffer[v0:v1, u0:u1] = i + 1

    cw = config.column_width
    columns = [(u, min(width, u + cw)) for u in range(0, width, cw)]
    samples = [u0 + (u1 - u0) // 2 for u0, u1 in columns]

    # counters per merged class: objects owning Stixels first, then objects only the mask shows,
    # each group in generation order
    visible = set(int(v) for v in np.unique(buffer) if v > 0)
    owning = set(int(v) for v in np.unique(buffer[:, samples]) if v > 0)
    instance_of: Dict[int, InstanceId] = {}
    counters: Dict[int, int] = {}
    for group in (owning, visible - owning):
        for i, obj in enumerate(objects):
            if i + 1 in group:
                label = class_table.merged(obj.label)
                counters[label] = counters.get(label, 0) + 1
                instance_of[i + 1] = make_instance_id(label, counters[label])

    code_lookup = np.zeros(len(objects) + 1, dtype=np.int64)
    for index, iid in instance_of.items():
        code_lookup[index] = class_table.instance_code(iid)
    mask = InstanceMask(code_lookup[buffer])

    free_label = class_table.background if class_table.background is not None else 0
    instance_labels = sorted({class_table.merged(c) for c in range(len(class_table))
                              if class_table.is_instance_class(c)})
    stixels: List[Stixel] = []
    labels: Dict[int, InstanceId] = {}
    for (u_start, u_end), u_sample in zip(columns, samples):
        u_center = (u_start + u_end) / 2.0
        for v_start, v_end, value in _column_runs(buffer[:, u_sample]):
            if value > 0:
                pieces = [(v_start, v_end)]
            elif config.background_stixels:
                pieces = [(s, min(v_end, s + config.max_stixel_height))
                          for s in range(v_start, v_end, config.max_stixel_height)]
            else:
                continue
            for v_tl, v_br in pieces:
                if value > 0 and config.stixel_jitter_px > 0:
                    v_tl = v_tl + int(round(rng.normal(0.0, config.stixel_jitter_px)))
                    v_br = v_br + int(round(rng.normal(0.0, config.stixel_jitter_px)))
                    v_tl = min(max(0, v_tl), height - 1)
                    v_br = min(max(v_tl + 1, v_br), height)
                if value > 0:
                    obj = objects[value - 1]
                    z = obj.z
                    label = class_table.merged(obj.label)
                    conf = float(rng.uniform(0.6, 1.0))
                    if rng.random() < config.label_flip_rate:
                        label = _confused_label(config, class_table, obj.label, rng)
                        conf = float(rng.uniform(0.3, 0.6))
                    gt = instance_of[value]
                else:
                    z = ground_depth(config, v_br)
                    label = free_label
                    conf = float(rng.uniform(0.7, 1.0))
                    if rng.random() < config.background_flip_rate and instance_labels:
                        label = instance_labels[int(rng.integers(len(instance_labels)))]
                        conf = float(rng.uniform(0.3, 0.6))
                    gt = BACKGROUND
                sid = len(stixels)
                stixels.append(Stixel(
                    x=pixel_to_x(config, u_center, z),
                    y=pixel_to_y(config, v_br, z),
                    z=z,
                    w=(u_end - u_start) * z / config.focal,
                    h=(v_br - v_tl) * z / config.focal,
                    u_tl=float(u_start), v_tl=float(v_tl), u_br=float(u_end), v_br=float(v_br),
                    label=int(label), label_conf=conf, stixel_id=sid,
                ))
                labels[sid] = gt

    frame = StixelFrame(frame_id, width, height, tuple(stixels))
    return frame, mask, InstanceLabeling(frame_id, labels)


def generate_frame(config: SceneConfig, seed: Seed, frame_id: str = 'frame',
                   class_table: Optional[ClassTable] = None
                   ) -> Tuple[StixelFrame, InstanceMask, InstanceLabeling]:
    """
    Generate one synthetic frame.

    Returns:
        tuple: (StixelFrame, InstanceMask, ground-truth InstanceLabeling)
    """
    class_table = class_table or default_class_table()
    config.validate(class_table)
    rng = np.random.default_rng(seed)
    objects = sample_objects(config, rng, class_table)
    return render_scene(config, objects, rng, frame_id, class_table)


# Detector emulation

def simulate_detections(frame: StixelFrame, gt: InstanceLabeling, mask: InstanceMask,
                        noise: DetectorNoise, seed: Seed,
                        class_table: Optional[ClassTable] = None) -> List[DetectionBox]:
    """
    Emulate an SSD-like detector from ground truth.

    One jittered box per surviving GT instance (tight pixel bounding rectangle
    of the instance's mask pixels before jitter), plus sampled false positives.
    """
    class_table = class_table or default_class_table()
    noise.validate()
    rng = np.random.default_rng(seed)
    width, height = frame.width, frame.height
    boxes: List[DetectionBox] = []
    by_id = frame.by_id()

    for iid in gt.instances():
        pixels = mask.codes == class_table.instance_code(iid)
        count = int(pixels.sum())
        if count:
            rows = np.flatnonzero(pixels.any(axis=1))
            cols = np.flatnonzero(pixels.any(axis=0))
            u0, u1 = float(cols[0]), float(cols[-1] + 1)
            v0, v1 = float(rows[0]), float(rows[-1] + 1)
        else:
            rects = np.array([by_id[sid].rect for sid in gt.stixels_of(iid)])
            u0, v0 = rects[:, 0].min(), rects[:, 1].min()
            u1, v1 = rects[:, 2].max(), rects[:, 3].max()
            count = int((u1 - u0) * (v1 - v0))

        if rng.random() < noise.miss_rate_for(class_table.names[iid.label]):
            continue
        bw, bh = u1 - u0, v1 - v0
        du = float(rng.normal(0.0, noise.center_jitter))
        dv = float(rng.normal(0.0, noise.center_jitter))
        log_sw = float(rng.normal(0.0, noise.scale_jitter))
        log_sh = float(rng.normal(0.0, noise.scale_jitter))
        if du == 0.0 and dv == 0.0 and log_sw == 0.0 and log_sh == 0.0:
            rect = (u0, v0, u1, v1)
        else:
            cu = (u0 + u1) / 2.0 + du * bw
            cv = (v0 + v1) / 2.0 + dv * bh
            nw, nh = bw * math.exp(log_sw), bh * math.exp(log_sh)
            rect = (cu - nw / 2.0, cv - nh / 2.0, cu + nw / 2.0, cv + nh / 2.0)
        rect = _clip_box(rect, width, height)
        if rect is None:
            continue
        jitter = abs(du) + abs(dv) + abs(log_sw) + abs(log_sh)
        occlusion = 1.0 - count / max(1.0, bw * bh)
        conf = (noise.conf_base - noise.conf_jitter_weight * jitter
                - noise.conf_occlusion_weight * occlusion + float(rng.normal(0.0, noise.conf_noise)))
        boxes.append(DetectionBox(*rect, box_label=class_table.merged(iid.label),
                                  box_conf=float(np.clip(conf, 0.0, 1.0))))

    if rng.random() < noise.false_positive_rate:
        candidates = sorted({class_table.merged(c) for c in range(len(class_table))
                             if class_table.is_instance_class(c)})
        label = int(candidates[int(rng.integers(len(candidates)))])
        bw = float(rng.uniform(0.05, 0.3)) * width
        bh = float(rng.uniform(0.1, 0.5)) * height
        cu = float(rng.uniform(0, width))
        cv = float(rng.uniform(0, height))
        rect = _clip_box((cu - bw / 2, cv - bh / 2, cu + bw / 2, cv + bh / 2), width, height)
        if rect is not None:
            conf = float(np.clip(noise.fp_conf_mean + rng.normal(0.0, noise.conf_noise), 0.0, 1.0))
            boxes.append(DetectionBox(*rect, box_label=label, box_conf=conf))
    return boxes


def _clip_box(rect, width: int, height: int):
    u0, v0 = max(0.0, float(rect[0])), max(0.0, float(rect[1]))
    u1, v1 = min(float(width), float(rect[2])), min(float(height), float(rect[3]))
    if u1 - u0 < 1.0 or v1 - v0 < 1.0:
        return None
    return u0, v0, u1, v1


# Datasets

def _generate_record(config: SceneConfig, noise: DetectorNoise, seed: int, index: int, split: str,
                     class_table: ClassTable):
    frame_id = f'{split}_{index:06d}'
    frame, mask, gt = generate_frame(config, [seed, index], frame_id, class_table)
    detections = simulate_detections(frame, gt, mask, noise, [seed, index, 1], class_table)
    return DatasetRecord(frame, detections, gt), mask


def generate_dataset(config: SceneConfig, noise: DetectorNoise, n_frames: int, seed: int,
                     split: str = 'train', class_table: Optional[ClassTable] = None,
                     workers: int = 1) -> Dataset:
    """
    Generate n_frames frames; frame i depends only on (seed, i).

    Args:
        config: scene settings
        noise: detector emulation settings
        n_frames: number of frames (>= 0)
        seed: dataset seed
        split: split name, also the frame id prefix
        class_table: classes (defaults to the Cityscapes table)
        workers: threads used for generation; output order is fixed

    Returns:
        Dataset: records, masks and a manifest echo of the generator settings
    """
    if n_frames < 0:
        raise ConfigError('n_frames must be >= 0.')
    class_table = class_table or default_class_table()
    config.validate(class_table)
    noise.validate()

    def make(index: int):
        return _generate_record(config, noise, seed, index, split, class_table)

    if workers > 1 and n_frames > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(make, range(n_frames)))
    else:
        results = [make(i) for i in range(n_frames)]

    records = [r for r, _ in results]
    masks = {r.frame.frame_id: m for r, m in results}
    logger.debug('Generated %d frames (%d stixels, %d boxes) for split %s', n_frames,
                 sum(len(r.frame.stixels) for r in records), sum(len(r.detections) for r in records), split)
    metadata = {'scene_config': _jsonable(asdict(config)), 'detector_noise': _jsonable(asdict(noise))}
    return Dataset(records, class_table, split, seed, masks, metadata)


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in sorted(value.items())}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def generate_workload(n_stixels: int, n_boxes: int, seed: Seed, width: int = 2048, height: int = 1024,
                      column_width: int = 8, class_table: Optional[ClassTable] = None
                      ) -> Tuple[StixelFrame, List[DetectionBox]]:
    """
    Synthesize a frame with exactly n_stixels Stixels and n_boxes random boxes.

    Stixels are distributed over the columns and stacked vertically with random
    cut points; used for runtime estimation where semantics do not matter.
    """
    class_table = class_table or default_class_table()
    rng = np.random.default_rng(seed)
    config = SceneConfig(width=width, height=height, focal=1000.0, column_width=column_width)
    n_cols = int(math.ceil(width / column_width))
    per_col = np.full(n_cols, n_stixels // n_cols)
    per_col[: n_stixels % n_cols] += 1
    if per_col.max(initial=0) >= height:
        raise ConfigError('Too many stixels for the image height.')
    labels = list(range(len(class_table)))
    stixels: List[Stixel] = []
    for col, k in enumerate(per_col):
        if k == 0:
            continue
        u0 = col * column_width
        u1 = min(width, u0 + column_width)
        cuts = np.sort(rng.choice(np.arange(1, height), size=int(k) - 1, replace=False)) if k > 1 else []
        edges = [0] + [int(c) for c in cuts] + [height]
        for v0, v1 in zip(edges[:-1], edges[1:]):
            z = float(rng.uniform(*config.depth_range))
            stixels.append(Stixel(
                x=pixel_to_x(config, (u0 + u1) / 2.0, z), y=pixel_to_y(config, v1, z), z=z,
                w=(u1 - u0) * z / config.focal, h=(v1 - v0) * z / config.focal,
                u_tl=float(u0), v_tl=float(v0), u_br=float(u1), v_br=float(v1),
                label=int(labels[int(rng.integers(len(labels)))]),
                label_conf=float(rng.uniform(0.5, 1.0)), stixel_id=len(stixels),
            ))
    boxes = []
    box_labels = sorted({class_table.merged(c) for c in labels if class_table.is_instance_class(c)})
    for _ in range(n_boxes):
        bw = float(rng.uniform(40, 400))
        bh = float(rng.uniform(40, 400))
        cu = float(rng.uniform(bw / 2, width - bw / 2))
        cv = float(rng.uniform(bh / 2, height - bh / 2))
        boxes.append(DetectionBox(cu - bw / 2, cv - bh / 2, cu + bw / 2, cv + bh / 2,
                                  box_label=int(box_labels[int(rng.integers(len(box_labels)))]),
                                  box_conf=float(rng.uniform(0.3, 1.0))))
    return StixelFrame('workload', width, height, tuple(stixels)), boxes
