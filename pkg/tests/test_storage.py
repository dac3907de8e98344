import json
import os
import struct

import numpy as np
import pytest

from conftest import CAR, PERSON, make_frame, make_stixel
from domain import BACKGROUND, DetectionBox, InstanceId, InstanceLabeling
from services.synth_service import DetectorNoise, SceneConfig, generate_dataset
from storage import (
    CHECKPOINT_MAGIC, CheckpointError, Dataset, DatasetFormatError, DatasetRecord, InstanceMask, MaskFormatError,
    NetworkCheckpoint, StorageError, import_instance_mask, load_checkpoint, load_dataset, load_labelings,
    save_checkpoint, save_dataset, save_instance_mask, save_labelings,
)


def _small_dataset():
    frame = make_frame([make_stixel(0, 0, 0, 10, 10), make_stixel(1, 10, 0, 20, 10, PERSON)], width=20, height=10)
    labeling = InstanceLabeling('f0', {0: InstanceId(CAR, 1), 1: BACKGROUND})
    boxes = [DetectionBox(0, 0, 10, 10, box_label=CAR, box_conf=0.7)]
    codes = np.zeros((10, 20), dtype=np.int64)
    codes[:, :10] = 26001
    return Dataset([DatasetRecord(frame, boxes, labeling)], split='val', seed=7,
                   masks={'f0': InstanceMask(codes)}, metadata={'source': 'test'})


# --- Tests for dataset files ---

def test_dataset_save_and_load(tmp_path):
    """Test that a saved dataset loads back with frames, boxes, labels and masks."""
    dataset = _small_dataset()
    save_dataset(dataset, str(tmp_path))

    loaded = load_dataset(str(tmp_path))
    assert loaded.split == 'val'
    assert loaded.seed == 7
    assert loaded.metadata == {'source': 'test'}
    assert loaded.class_table == dataset.class_table
    record = loaded.records[0]
    assert record.frame == dataset.records[0].frame
    assert record.detections == dataset.records[0].detections
    assert record.labeling == dataset.records[0].labeling
    assert loaded.masks['f0'] == dataset.masks['f0']


def test_dataset_load_without_masks(tmp_path):
    """Test that masks can be skipped on load."""
    save_dataset(_small_dataset(), str(tmp_path))
    assert load_dataset(str(tmp_path), load_masks=False).masks == {}


def test_manifest_lists_record_files(tmp_path):
    """Test the manifest contents."""
    save_dataset(_small_dataset(), str(tmp_path))
    with open(tmp_path / 'manifest.json', encoding='utf-8') as fh:
        manifest = json.load(fh)
    assert manifest['frame_count'] == 1
    assert manifest['files']['frames'] == 'val.frames.jsonl'
    assert manifest['files']['masks'] == 'masks'


def test_malformed_record_reports_line(tmp_path):
    """Test that a broken JSON line is reported with file and line number."""
    save_dataset(_small_dataset(), str(tmp_path))
    path = tmp_path / 'val.dets.jsonl'
    path.write_text(path.read_text() + '{not json\n')

    with pytest.raises(DatasetFormatError) as info:
        load_dataset(str(tmp_path))
    assert info.value.line == 2


def test_unsupported_format_version(tmp_path):
    """Test that an unknown manifest version is refused."""
    save_dataset(_small_dataset(), str(tmp_path))
    manifest_path = tmp_path / 'manifest.json'
    manifest = json.loads(manifest_path.read_text())
    manifest['format_version'] = 99
    manifest_path.write_text(json.dumps(manifest))

    with pytest.raises(StorageError):
        load_dataset(str(tmp_path))


def test_labeling_must_cover_frame(tmp_path):
    """Test that a labeling missing a Stixel is rejected."""
    save_dataset(_small_dataset(), str(tmp_path))
    path = tmp_path / 'val.labels.jsonl'
    record = json.loads(path.read_text().splitlines()[0])
    record['labels'] = record['labels'][:1]
    path.write_text(json.dumps(record) + '\n')

    with pytest.raises(StorageError):
        load_dataset(str(tmp_path))


def test_duplicate_frame_ids_rejected():
    """Test that a Dataset refuses duplicate frame ids."""
    record = _small_dataset().records[0]
    with pytest.raises(StorageError):
        Dataset([record, record])


def test_labelings_file(tmp_path):
    """Test that predicted labelings keep their instance confidences."""
    labeling = InstanceLabeling('f0', {0: InstanceId(CAR, 1), 1: BACKGROUND}, {InstanceId(CAR, 1): 0.625})
    path = str(tmp_path / 'out' / 'pred.jsonl')
    save_labelings(path, [labeling])

    assert load_labelings(path) == [labeling]


def _tree_bytes(root):
    """Relative path -> file bytes for every file under root."""
    files = {}
    for directory, _, names in os.walk(root):
        for name in names:
            path = os.path.join(directory, name)
            with open(path, 'rb') as fh:
                files[os.path.relpath(path, root)] = fh.read()
    return files


def test_resave_is_byte_identical(tmp_path):
    """Test that loading and saving a synthetic dataset reproduces every file byte for byte."""
    dataset = generate_dataset(SceneConfig(width=256, height=128), DetectorNoise(), 100, seed=5, split='val')
    save_dataset(dataset, str(tmp_path / 'a'))
    save_dataset(load_dataset(str(tmp_path / 'a')), str(tmp_path / 'b'))

    first, second = _tree_bytes(str(tmp_path / 'a')), _tree_bytes(str(tmp_path / 'b'))
    assert len(first) == 100 + 4
    assert first == second


def _random_dataset(rng, n_frames):
    records, masks = [], {}
    for index in range(n_frames):
        frame_id = f'r{index}'
        edges = np.unique(rng.integers(1, 200, size=int(rng.integers(1, 12))))
        starts = np.concatenate(([0], edges[:-1]))
        stixels = [make_stixel(i, int(u0), int(rng.integers(0, 50)), int(u1), int(rng.integers(50, 100)),
                               label=int(rng.integers(0, 9)), x=float(rng.normal(0, 10)),
                               z=float(rng.uniform(1, 80)), label_conf=float(rng.random()))
                   for i, (u0, u1) in enumerate(zip(starts, edges))]
        frame = make_frame(stixels, frame_id=frame_id)
        labels = {s.stixel_id: BACKGROUND if rng.random() < 0.3 else InstanceId(int(rng.integers(0, 8)),
                                                                               int(rng.integers(1, 4)))
                  for s in stixels}
        boxes = [DetectionBox(float(u), float(v), float(u) + float(rng.uniform(1, 50)),
                              float(v) + float(rng.uniform(1, 40)), box_label=int(rng.integers(0, 8)),
                              box_conf=float(rng.random()))
                 for u, v in rng.uniform(0, [100, 50], size=(int(rng.integers(0, 5)), 2))]
        records.append(DatasetRecord(frame, boxes, InstanceLabeling(frame_id, labels)))
        palette = np.array([0, 24001, 26002, 33003])
        masks[frame_id] = InstanceMask(palette[rng.integers(0, 4, size=(100, 200))])
    return Dataset(records, seed=int(rng.integers(0, 1000)), masks=masks)


def test_random_datasets_round_trip(tmp_path, rng):
    """Test that random frames, boxes, labelings and masks survive save and load unchanged."""
    for trial in range(20):
        dataset = _random_dataset(rng, int(rng.integers(1, 6)))
        path = str(tmp_path / f'd{trial}')
        save_dataset(dataset, path)
        loaded = load_dataset(path)
        assert loaded.seed == dataset.seed
        assert loaded.masks == dataset.masks
        for ours, theirs in zip(loaded.records, dataset.records):
            assert ours.frame == theirs.frame
            assert ours.detections == theirs.detections
            assert ours.labeling == theirs.labeling


# --- Tests for instance masks ---

def test_mask_codes_below_base_are_background():
    """Test that semantic-only codes become background."""
    mask = InstanceMask(np.array([[26, 26001], [0, 24002]]))
    assert mask.codes.tolist() == [[0, 26001], [0, 24002]]
    assert mask.instance_codes() == [24002, 26001]
    assert (mask.width, mask.height) == (2, 2)


def test_mask_png_file(tmp_path):
    """Test that a 16-bit PNG mask keeps its instance codes."""
    mask = InstanceMask(np.array([[0, 26001, 26001], [33002, 0, 24001]]))
    path = str(tmp_path / 'm.png')
    save_instance_mask(mask, path)
    assert import_instance_mask(path) == mask


def test_mask_text_encoding(tmp_path):
    """Test the whitespace integer grid encoding."""
    path = tmp_path / 'm.txt'
    path.write_text('0 26001\n7 26001\n')
    mask = import_instance_mask(str(path), encoding='text')
    assert mask.codes.tolist() == [[0, 26001], [0, 26001]]


def test_mask_unknown_encoding(tmp_path):
    """Test that an unknown encoding is refused."""
    with pytest.raises(MaskFormatError):
        import_instance_mask(str(tmp_path / 'm.png'), encoding='rle')


def test_mask_unreadable_file(tmp_path):
    """Test that a file that is not an image raises MaskFormatError."""
    path = tmp_path / 'm.png'
    path.write_bytes(b'not an image')
    with pytest.raises(MaskFormatError):
        import_instance_mask(str(path))


# --- Tests for checkpoints ---

def _checkpoint():
    rng = np.random.default_rng(3)
    params = [rng.standard_normal((3, 4)), rng.standard_normal(4)]
    return NetworkCheckpoint(
        architecture={'input_width': 3},
        params=params,
        adam_m=[p * 0.5 for p in params],
        adam_v=[p * p for p in params],
        step=12,
        epoch=2,
        train_config={'seed': 1},
    )


def test_checkpoint_file(tmp_path):
    """Test that a checkpoint restores bit-exact arrays and counters."""
    ckpt = _checkpoint()
    path = str(tmp_path / 'net.ckpt')
    save_checkpoint(ckpt, path)

    loaded = load_checkpoint(path)
    assert loaded.architecture == ckpt.architecture
    assert loaded.step == 12 and loaded.epoch == 2
    assert loaded.train_config == {'seed': 1}
    for a, b in zip(loaded.params + loaded.adam_m + loaded.adam_v, ckpt.params + ckpt.adam_m + ckpt.adam_v):
        assert np.array_equal(a, b)


def test_truncated_checkpoint(tmp_path):
    """Test that a truncated checkpoint raises CheckpointError."""
    path = str(tmp_path / 'net.ckpt')
    save_checkpoint(_checkpoint(), path)
    with open(path, 'rb') as fh:
        blob = fh.read()
    with open(path, 'wb') as fh:
        fh.write(blob[:-16])

    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    """Test that a foreign file is not taken for a checkpoint."""
    path = tmp_path / 'net.ckpt'
    path.write_bytes(b'GARBAGE!' + bytes(32))
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))


def test_missing_checkpoint(tmp_path):
    """Test that a missing checkpoint raises CheckpointError."""
    with pytest.raises(CheckpointError):
        load_checkpoint(os.path.join(str(tmp_path), 'nope.ckpt'))


def test_checkpoint_header_without_shapes(tmp_path):
    """Test that a header missing the parameter shapes raises CheckpointError."""
    path = tmp_path / 'net.ckpt'
    save_checkpoint(_checkpoint(), str(path))
    blob = path.read_bytes()
    offset = len(CHECKPOINT_MAGIC)
    version, header_len = struct.unpack_from('<II', blob, offset)
    header = json.loads(blob[offset + 8:offset + 8 + header_len])
    del header['shapes']
    new_header = json.dumps(header).encode('utf-8')
    path.write_bytes(blob[:offset] + struct.pack('<II', version, len(new_header)) + new_header
                     + blob[offset + 8 + header_len:])

    with pytest.raises(CheckpointError, match='shapes'):
        load_checkpoint(str(path))
