"""
Storage module for StixelPointNet
Handles all file persistence: datasets, labelings, instance masks and model checkpoints
"""

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from domain import (
    INSTANCE_CODE_BASE, ClassTable, DetectionBox, InstanceId, InstanceLabeling,
    Stixel, StixelFrame, StixelPointNetError, default_class_table,
)

# Storage configuration
DATASET_FORMAT_VERSION = 1
MANIFEST_NAME = 'manifest.json'
MASK_DIR = 'masks'
CHECKPOINT_MAGIC = b'STXPNCKP'
CHECKPOINT_VERSION = 1
MASK_ENCODINGS = ('cityscapes', 'text')

STIXEL_FIELDS = ('x', 'y', 'z', 'w', 'h', 'u_tl', 'v_tl', 'u_br', 'v_br', 'label', 'label_conf', 'stixel_id')
BOX_FIELDS = ('u_tl', 'v_tl', 'u_br', 'v_br', 'box_label', 'box_conf')


class StorageError(StixelPointNetError):
    """A file could not be read or written in the expected format."""


class DatasetFormatError(StorageError):
    """A dataset record is malformed; carries the file path and line number."""

    def __init__(self, path: str, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class MaskFormatError(StorageError):
    """An instance mask is unreadable or uses an unknown encoding."""


class CheckpointError(StorageError):
    """A checkpoint file is truncated, corrupted or of an unknown version."""


@dataclass
class InstanceMask:
    """Pixel-level instance ground truth: class label id * 1000 + counter, 0 = background."""
    codes: np.ndarray

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.int64)
        if codes.ndim != 2:
            raise MaskFormatError("Instance mask must be a single-channel 2D grid.")
        codes = codes.copy()
        codes[codes < INSTANCE_CODE_BASE] = 0
        self.codes = codes

    @property
    def width(self) -> int:
        return int(self.codes.shape[1])

    @property
    def height(self) -> int:
        return int(self.codes.shape[0])

    def instance_codes(self) -> List[int]:
        """Distinct non-background codes in ascending order."""
        return [int(c) for c in np.unique(self.codes) if c >= INSTANCE_CODE_BASE]

    def __eq__(self, other) -> bool:
        return isinstance(other, InstanceMask) and np.array_equal(self.codes, other.codes)


@dataclass
class DatasetRecord:
    frame: StixelFrame
    detections: List[DetectionBox]
    labeling: Optional[InstanceLabeling]


@dataclass
class Dataset:
    """Ordered frames with detections and ground truth, bound together by a manifest."""
    records: List[DatasetRecord]
    class_table: ClassTable = field(default_factory=default_class_table)
    split: str = 'train'
    seed: Optional[int] = None
    masks: Dict[str, InstanceMask] = field(default_factory=dict)
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        frame_ids = [r.frame.frame_id for r in self.records]
        if len(set(frame_ids)) != len(frame_ids):
            raise StorageError("Dataset frame ids must be unique.")
        for record in self.records:
            if record.labeling is not None and record.labeling.frame_id != record.frame.frame_id:
                raise StorageError(f"Labeling {record.labeling.frame_id} does not match its frame.")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[DatasetRecord]:
        return iter(self.records)

    def frame_ids(self) -> List[str]:
        return [r.frame.frame_id for r in self.records]


@dataclass
class NetworkCheckpoint:
    """
    Weights, ADAM moments and architecture of the segmentation network.

    params, adam_m and adam_v hold arrays in declared layer order
    (W0, b0, W1, b1, ...). architecture is the plain-dict form of the
    network's ArchitectureSpec.
    """
    architecture: Dict
    params: List[np.ndarray]
    adam_m: List[np.ndarray]
    adam_v: List[np.ndarray]
    step: int = 0
    epoch: int = 0
    train_config: Dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


# Helper Functions for record encoding

def _dumps(record: Dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(',', ':'))


def frame_to_record(frame: StixelFrame) -> Dict:
    return {
        'frame_id': frame.frame_id,
        'width': frame.width,
        'height': frame.height,
        'stixels': [{name: getattr(s, name) for name in STIXEL_FIELDS} for s in frame.stixels],
    }


def frame_from_record(record: Dict) -> StixelFrame:
    stixels = []
    for item in record['stixels']:
        values = {name: item[name] for name in STIXEL_FIELDS}
        values['label'] = int(values['label'])
        values['stixel_id'] = int(values['stixel_id'])
        stixels.append(Stixel(**values))
    return StixelFrame(str(record['frame_id']), int(record['width']), int(record['height']), tuple(stixels))


def detections_to_record(frame_id: str, boxes: List[DetectionBox]) -> Dict:
    return {'frame_id': frame_id, 'boxes': [{name: getattr(b, name) for name in BOX_FIELDS} for b in boxes]}


def detections_from_record(record: Dict) -> Tuple[str, List[DetectionBox]]:
    boxes = []
    for item in record['boxes']:
        values = {name: item[name] for name in BOX_FIELDS}
        values['box_label'] = int(values['box_label'])
        boxes.append(DetectionBox(**values))
    return str(record['frame_id']), boxes


def labeling_to_record(labeling: InstanceLabeling) -> Dict:
    return {
        'frame_id': labeling.frame_id,
        'labels': [
            {'stixel_id': sid, 'label': labeling.labels[sid].label, 'counter': labeling.labels[sid].counter}
            for sid in sorted(labeling.labels)
        ],
        'confidences': [
            {'label': iid.label, 'counter': iid.counter, 'confidence': labeling.confidences[iid]}
            for iid in sorted(labeling.confidences)
        ],
    }


def labeling_from_record(record: Dict) -> InstanceLabeling:
    labels = {int(item['stixel_id']): InstanceId(int(item['label']), int(item['counter']))
              for item in record['labels']}
    if len(labels) != len(record['labels']):
        raise ValueError('duplicate stixel_id in labeling')
    confidences = {InstanceId(int(item['label']), int(item['counter'])): float(item['confidence'])
                   for item in record.get('confidences', [])}
    return InstanceLabeling(str(record['frame_id']), labels, confidences)


def _write_jsonl(path: str, records: List[Dict]) -> None:
    with open(path, 'w', encoding='utf-8', newline='\n') as fh:
        for record in records:
            fh.write(_dumps(record))
            fh.write('\n')


def _read_jsonl(path: str, decode) -> List:
    """Decode every non-empty line, reporting the offending line number on failure."""
    items = []
    try:
        fh = open(path, 'r', encoding='utf-8')
    except OSError as e:
        raise StorageError(f"Cannot read {path}: {e}") from e
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                items.append(decode(json.loads(line)))
            except (ValueError, KeyError, TypeError, StixelPointNetError) as e:
                raise DatasetFormatError(path, lineno, str(e)) from e
    return items


# Datasets

def save_dataset(dataset: Dataset, path: str) -> None:
    """
    Write a dataset directory: manifest.json plus the three record files and masks.

    Args:
        dataset: Dataset to persist
        path: target directory (created if missing)
    """
    os.makedirs(path, exist_ok=True)
    split = dataset.split
    files = {}
    if dataset.records:
        files = {
            'frames': f'{split}.frames.jsonl',
            'detections': f'{split}.dets.jsonl',
            'labels': f'{split}.labels.jsonl',
        }
        _write_jsonl(os.path.join(path, files['frames']),
                     [frame_to_record(r.frame) for r in dataset.records])
        _write_jsonl(os.path.join(path, files['detections']),
                     [detections_to_record(r.frame.frame_id, r.detections) for r in dataset.records])
        _write_jsonl(os.path.join(path, files['labels']),
                     [labeling_to_record(r.labeling) for r in dataset.records if r.labeling is not None])
    if dataset.masks:
        files['masks'] = MASK_DIR
        os.makedirs(os.path.join(path, MASK_DIR), exist_ok=True)
        for frame_id in dataset.frame_ids():
            if frame_id in dataset.masks:
                save_instance_mask(dataset.masks[frame_id], os.path.join(path, MASK_DIR, f'{frame_id}.png'))

    manifest = {
        'format_version': DATASET_FORMAT_VERSION,
        'split': split,
        'seed': dataset.seed,
        'frame_count': len(dataset.records),
        'class_table': dataset.class_table.to_dict(),
        'files': files,
        'metadata': dataset.metadata,
    }
    with open(os.path.join(path, MANIFEST_NAME), 'w', encoding='utf-8', newline='\n') as fh:
        fh.write(json.dumps(manifest, sort_keys=True, indent=2))
        fh.write('\n')


def load_manifest(path: str) -> Dict:
    manifest_path = os.path.join(path, MANIFEST_NAME)
    try:
        with open(manifest_path, 'r', encoding='utf-8') as fh:
            manifest = json.load(fh)
    except OSError as e:
        raise StorageError(f"Cannot read {manifest_path}: {e}") from e
    except ValueError as e:
        raise DatasetFormatError(manifest_path, 1, str(e)) from e
    version = manifest.get('format_version')
    if version != DATASET_FORMAT_VERSION:
        raise StorageError(
            f"{manifest_path}: format version {version!r} is not supported (expected {DATASET_FORMAT_VERSION}).")
    return manifest


def load_dataset(path: str, load_masks: bool = True) -> Dataset:
    """Load a dataset directory written by save_dataset."""
    manifest = load_manifest(path)
    files = manifest.get('files', {})
    class_table = ClassTable.from_dict(manifest['class_table'])

    frames: List[StixelFrame] = []
    detections: Dict[str, List[DetectionBox]] = {}
    labelings: Dict[str, InstanceLabeling] = {}
    if 'frames' in files:
        frames = _read_jsonl(os.path.join(path, files['frames']), frame_from_record)
    if 'detections' in files:
        detections = dict(_read_jsonl(os.path.join(path, files['detections']), detections_from_record))
    if 'labels' in files:
        labels_path = os.path.join(path, files['labels'])
        for labeling in _read_jsonl(labels_path, labeling_from_record):
            labelings[labeling.frame_id] = labeling

    if len(frames) != manifest.get('frame_count', len(frames)):
        raise StorageError(f"{path}: manifest announces {manifest['frame_count']} frames, found {len(frames)}.")

    frame_map = {f.frame_id: f for f in frames}
    for frame_id in list(detections) + list(labelings):
        if frame_id not in frame_map:
            raise StorageError(f"{path}: record references unknown frame {frame_id}.")
    for frame_id, labeling in labelings.items():
        if not labeling.covers(frame_map[frame_id]):
            raise StorageError(f"{path}: labeling of {frame_id} does not cover every stixel exactly once.")

    masks: Dict[str, InstanceMask] = {}
    if load_masks and 'masks' in files:
        for frame in frames:
            mask_path = os.path.join(path, files['masks'], f'{frame.frame_id}.png')
            if os.path.exists(mask_path):
                masks[frame.frame_id] = import_instance_mask(mask_path)

    records = [DatasetRecord(f, detections.get(f.frame_id, []), labelings.get(f.frame_id)) for f in frames]
    return Dataset(records, class_table, manifest.get('split', 'train'), manifest.get('seed'),
                   masks, manifest.get('metadata', {}))


# Labelings

def save_labelings(path: str, labelings: List[InstanceLabeling]) -> None:
    """Write prediction or ground-truth labelings as one JSON record per line."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    _write_jsonl(path, [labeling_to_record(l) for l in labelings])


def load_labelings(path: str) -> List[InstanceLabeling]:
    return _read_jsonl(path, labeling_from_record)


# Instance masks

def import_instance_mask(path: str, encoding: str = 'cityscapes') -> InstanceMask:
    """
    Decode a pixel-level instance mask.

    Args:
        path: image (16-bit PNG/PGM) for 'cityscapes', whitespace integer grid for 'text'
        encoding: 'cityscapes' or 'text'; both use class * 1000 + counter codes

    Returns:
        InstanceMask: codes below 1000 are mapped to background
    """
    if encoding not in MASK_ENCODINGS:
        raise MaskFormatError(f"Unknown mask encoding '{encoding}'.")
    if encoding == 'text':
        try:
            codes = np.loadtxt(path, dtype=np.int64, ndmin=2)
        except (OSError, ValueError) as e:
            raise MaskFormatError(f"Cannot read mask {path}: {e}") from e
        return InstanceMask(codes)

    try:
        with Image.open(path) as img:
            if len(img.getbands()) != 1:
                raise MaskFormatError(f"Mask {path} must be single-channel, got mode {img.mode}.")
            codes = np.array(img, dtype=np.int64)
    except (OSError, UnidentifiedImageError) as e:
        raise MaskFormatError(f"Cannot read mask {path}: {e}") from e
    return InstanceMask(codes)


def save_instance_mask(mask: InstanceMask, path: str) -> None:
    """Write a mask as a 16-bit single-channel PNG."""
    if mask.codes.size and mask.codes.max() > np.iinfo(np.uint16).max:
        raise MaskFormatError(f"Mask codes exceed 16 bits, cannot write {path}.")
    Image.fromarray(mask.codes.astype(np.uint16)).save(path, format='PNG')


# Checkpoints

def save_checkpoint(ckpt: NetworkCheckpoint, path: str) -> None:
    """
    Binary little-endian layout:
        magic | u32 version | u32 header length | JSON header | u64 payload length | float64 payload
    The payload holds params, then ADAM first moments, then second moments.
    """
    shapes = [list(p.shape) for p in ckpt.params]
    header = {
        'architecture': ckpt.architecture,
        'shapes': shapes,
        'step': ckpt.step,
        'epoch': ckpt.epoch,
        'train_config': ckpt.train_config,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    arrays = list(ckpt.params) + list(ckpt.adam_m) + list(ckpt.adam_v)
    payload = b''.join(np.ascontiguousarray(a, dtype='<f8').tobytes() for a in arrays)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack('<II', ckpt.version, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack('<Q', len(payload)))
        fh.write(payload)


def load_checkpoint(path: str) -> NetworkCheckpoint:
    """Read a checkpoint; any inconsistency raises CheckpointError before anything is built."""
    try:
        with open(path, 'rb') as fh:
            blob = fh.read()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

    magic_len = len(CHECKPOINT_MAGIC)
    if blob[:magic_len] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file.")
    offset = magic_len
    if len(blob) < offset + 8:
        raise CheckpointError(f"{path} is truncated.")
    version, header_len = struct.unpack_from('<II', blob, offset)
    offset += 8
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} is not supported.")
    if len(blob) < offset + header_len + 8:
        raise CheckpointError(f"{path} is truncated.")
    try:
        header = json.loads(blob[offset:offset + header_len].decode('utf-8'))
    except (UnicodeDecodeError, ValueError) as e:
        raise CheckpointError(f"{path}: corrupted header.") from e
    offset += header_len
    (payload_len,) = struct.unpack_from('<Q', blob, offset)
    offset += 8

    missing = [key for key in ('shapes', 'architecture', 'step') if key not in header]
    if missing:
        raise CheckpointError(f"{path}: header lacks {', '.join(missing)}.")
    try:
        shapes = [tuple(int(d) for d in s) for s in header['shapes']]
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: malformed parameter shapes.") from e
    sizes = [int(np.prod(s)) for s in shapes]
    expected = 3 * sum(sizes) * 8
    if payload_len != expected or len(blob) - offset != expected:
        raise CheckpointError(
            f"{path}: payload length {payload_len} (file holds {len(blob) - offset}) does not match "
            f"the {expected} bytes the architecture requires.")

    flat = np.frombuffer(blob, dtype='<f8', offset=offset).astype(np.float64)
    arrays = []
    pos = 0
    for _ in range(3):
        for shape, size in zip(shapes, sizes):
            arrays.append(flat[pos:pos + size].reshape(shape).copy())
            pos += size
    n = len(shapes)
    return NetworkCheckpoint(
        architecture=header['architecture'],
        params=arrays[:n],
        adam_m=arrays[n:2 * n],
        adam_v=arrays[2 * n:],
        step=int(header['step']),
        epoch=int(header.get('epoch', 0)),
        train_config=header.get('train_config', {}),
        version=version,
    )
