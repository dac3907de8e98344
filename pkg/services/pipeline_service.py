"""
Pipeline Service Module - Inference Methods
Runs StixelPointNet, the baselines, the oracle and the GT passthrough frame by frame
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from domain import ClassTable, ConfigError, InstanceLabeling, StixelPointNetError
from services.baseline_service import ClassPercentages, HacConfig, hac_img, hac_roi, statistical_segment
from services.bps_service import BpsConfig, RoiVotes, fuse
from services.filter_service import FeatureScaler, FilterParams, RoiSample, filter_frame
from services.pointnet_service import ModelState, forward_batch, softmax, state_from_checkpoint, target_assignment
from storage import Dataset, DatasetRecord, NetworkCheckpoint

logger = logging.getLogger(__name__)

INFERENCE_METHODS = ('stxpn', 'statistical', 'hac-roi', 'hac-img', 'oracle', 'gt')


class MissingGroundTruthError(StixelPointNetError):
    """A method that needs ground truth met a frame without it."""


@dataclass
class Model:
    """A trained network with the input preparation it was trained with."""
    state: ModelState
    params: FilterParams = field(default_factory=FilterParams)
    scaler: Optional[FeatureScaler] = None


def model_from_checkpoint(ckpt: NetworkCheckpoint) -> Model:
    state, _ = state_from_checkpoint(ckpt)
    echo = ckpt.train_config or {}
    stored = echo.get('filter') or {}
    params = FilterParams(float(stored.get('sc_roi', 1.0)), float(stored.get('t_roi', 0.1)))
    return Model(state, params, FeatureScaler.from_dict(echo.get('scaler')))


def warn_filter_override(model: Model, requested: FilterParams) -> bool:
    """Log when requested filter parameters differ from the ones stored with the network; the stored ones win."""
    if requested == model.params:
        return False
    logger.warning('stxpn keeps the checkpoint filter parameters sc_roi=%g t_roi=%g; ignoring sc_roi=%g t_roi=%g',
                   model.params.sc_roi, model.params.t_roi, requested.sc_roi, requested.t_roi)
    return True


@dataclass
class InferenceOptions:
    params: FilterParams = field(default_factory=FilterParams)
    bps: BpsConfig = field(default_factory=BpsConfig)
    hac: HacConfig = field(default_factory=HacConfig)
    metric: str = 'l2'
    model: Optional[Model] = None
    percentages: Optional[ClassPercentages] = None


def validate_method(method: str, options: InferenceOptions):
    if method not in INFERENCE_METHODS:
        return False, f"Unknown method '{method}'; choose one of {', '.join(INFERENCE_METHODS)}."
    if method == 'stxpn' and options.model is None:
        return False, 'Method stxpn needs a checkpoint.'
    if method == 'statistical' and options.percentages is None:
        return False, 'Method statistical needs class percentages.'
    return True, ''


def _fuse(record: DatasetRecord, samples: Sequence[RoiSample], pcs: Sequence[np.ndarray],
          options: InferenceOptions) -> InstanceLabeling:
    rois = [RoiVotes.of(s.roi.box_label, s.roi.box_conf, s.stixel_ids, pc) for s, pc in zip(samples, pcs)]
    return fuse(record.frame.frame_id, record.frame.stixel_ids, rois, options.bps)


def infer_frame(record: DatasetRecord, method: str, options: InferenceOptions,
                class_table: ClassTable) -> InstanceLabeling:
    """
    Instance labeling of one frame.

    Binary baselines and the oracle pass pc = 1 or 0 per Stixel through BPS;
    hac-img works on the whole frame and gt returns the Stixel GT itself.
    """
    frame = record.frame
    if method in ('oracle', 'gt') and record.labeling is None:
        raise MissingGroundTruthError(f"Frame {frame.frame_id} has no ground truth for method {method}.")
    if method == 'gt':
        return InstanceLabeling(frame.frame_id, dict(record.labeling.labels),
                                {iid: 1.0 for iid in record.labeling.instances()})
    if method == 'hac-img':
        return hac_img(frame, options.hac, class_table)

    if method == 'stxpn':
        model = options.model
        samples = filter_frame(frame, record.detections, model.params, class_table, model.scaler)
        pcs = [softmax(logits)[:, 1] for logits in forward_batch(model.state, samples)]
        return _fuse(record, samples, pcs, options)

    samples = filter_frame(frame, record.detections, options.params, class_table)
    if method == 'statistical':
        pcs = [statistical_segment(s, options.percentages[class_table.merged(s.roi.box_label)], options.metric)
               for s in samples]
    elif method == 'hac-roi':
        pcs = [hac_roi(s, options.hac, class_table) for s in samples]
    else:
        pcs = [target_assignment(s, record.labeling, class_table)[0] for s in samples]
    return _fuse(record, samples, [np.asarray(pc, dtype=np.float64) for pc in pcs], options)


def infer_dataset(dataset: Dataset, method: str, options: InferenceOptions,
                  workers: int = 1) -> List[InstanceLabeling]:
    """One labeling per frame in dataset order; frames run on up to `workers` threads."""
    ok, message = validate_method(method, options)
    if not ok:
        raise ConfigError(message)
    class_table = dataset.class_table

    def run(record: DatasetRecord) -> InstanceLabeling:
        return infer_frame(record, method, options, class_table)

    if workers <= 1:
        labelings = [run(r) for r in dataset]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            labelings = list(pool.map(run, dataset.records))
    logger.info('%s inference on %d frames produced %d instances', method, len(labelings),
                sum(len(l.instances()) for l in labelings))
    return labelings
