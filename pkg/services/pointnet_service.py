"""
PointNet Service Module - Binary Segmentation Network
Shared per-Stixel MLPs, max-pooled global feature and segmentation head,
with hand-written backpropagation, cross-entropy loss and ADAM training
"""

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from domain import ClassTable, ConfigError, EmptyDatasetError, InstanceId, InstanceLabeling, StixelPointNetError
from services.filter_service import FeatureScaler, FilterParams, RoiSample, filter_frame
from storage import Dataset, NetworkCheckpoint

logger = logging.getLogger(__name__)


class ArchitectureMismatchError(StixelPointNetError):
    """Parameters or inputs do not fit the declared architecture."""


@dataclass(frozen=True)
class ArchitectureSpec:
    """
    Layer widths of the network.

    The head consumes concat(extractor output at tap_index, global feature);
    ReLU follows every extractor layer and every head layer except the last.
    """
    input_width: int = 10
    extractor: Tuple[int, ...] = (64, 64, 64, 128, 1024)
    head: Tuple[int, ...] = (512, 256, 128, 2)
    tap_index: int = 1

    def __post_init__(self):
        if self.input_width < 1:
            raise ConfigError('Input width must be positive.')
        if not self.extractor or not self.head:
            raise ConfigError('Extractor and head need at least one layer each.')
        if any(w < 1 for w in self.extractor + self.head):
            raise ConfigError('Layer widths must be positive.')
        if self.head[-1] != 2:
            raise ConfigError('The last head layer must have width 2.')
        if not 0 <= self.tap_index < len(self.extractor):
            raise ConfigError(f"Tap index {self.tap_index} outside the extractor.")

    @property
    def global_width(self) -> int:
        return self.extractor[-1]

    @property
    def tap_width(self) -> int:
        return self.extractor[self.tap_index]

    def layer_shapes(self) -> List[Tuple[int, int]]:
        """(fan_in, fan_out) of every layer, extractor first."""
        shapes = []
        fan_in = self.input_width
        for width in self.extractor:
            shapes.append((fan_in, width))
            fan_in = width
        fan_in = self.tap_width + self.global_width
        for width in self.head:
            shapes.append((fan_in, width))
            fan_in = width
        return shapes

    def to_dict(self) -> Dict:
        return {
            'input_width': self.input_width,
            'extractor': list(self.extractor),
            'head': list(self.head),
            'tap_index': self.tap_index,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'ArchitectureSpec':
        try:
            return cls(int(data['input_width']), tuple(int(w) for w in data['extractor']),
                       tuple(int(w) for w in data['head']), int(data.get('tap_index', 1)))
        except (KeyError, TypeError, ValueError) as e:
            raise ArchitectureMismatchError(f"Malformed architecture description: {e}") from e


@dataclass
class ModelState:
    """Weights (fan_in, fan_out) and biases in layer order W0, b0, W1, b1, ..."""
    spec: ArchitectureSpec
    params: List[np.ndarray]

    def __post_init__(self):
        expected = []
        for fan_in, fan_out in self.spec.layer_shapes():
            expected += [(fan_in, fan_out), (fan_out,)]
        actual = [tuple(p.shape) for p in self.params]
        if actual != expected:
            raise ArchitectureMismatchError(f"Parameter shapes {actual} do not match the architecture {expected}.")

    @property
    def n_extractor(self) -> int:
        return len(self.spec.extractor)

    @property
    def dtype(self):
        return self.params[0].dtype

    def layer(self, index: int) -> Tuple[np.ndarray, np.ndarray]:
        return self.params[2 * index], self.params[2 * index + 1]

    def copy(self) -> 'ModelState':
        return ModelState(self.spec, [p.copy() for p in self.params])


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 30
    seed: int = 0
    # multiplicative per-epoch factor; 1.0 keeps the rate constant
    lr_decay: float = 1.0

    def learning_rate_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay ** epoch

    def to_dict(self) -> Dict:
        return asdict(self)


def validate_train_config(config: TrainConfig) -> Tuple[bool, str]:
    if config.batch_size < 1:
        return False, 'Batch size must be at least 1.'
    if config.learning_rate <= 0:
        return False, 'Learning rate must be positive.'
    if not (0.0 <= config.beta1 < 1.0 and 0.0 <= config.beta2 < 1.0):
        return False, 'ADAM betas must lie in [0, 1).'
    if config.epsilon <= 0:
        return False, 'ADAM epsilon must be positive.'
    if config.epochs < 0:
        return False, 'Epoch count cannot be negative.'
    if not 0.0 < config.lr_decay <= 1.0:
        return False, 'Learning-rate decay must lie in (0, 1].'
    return True, ''


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> 'AdamState':
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


@dataclass
class RoiPrediction:
    """Per-Stixel probability of belonging to the RoI's instance."""
    stixel_ids: List[int]
    pc: np.ndarray

    @property
    def decisions(self) -> np.ndarray:
        return self.pc > 0.5


@dataclass
class TrainingSample:
    """Features of one RoI with its binary targets and associated GT instance."""
    features: np.ndarray
    targets: np.ndarray
    instance: Optional[InstanceId] = None
    frame_id: str = ''
    roi_index: int = 0


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    wall_time: float


@dataclass
class TrainResult:
    state: ModelState
    adam: AdamState
    epoch: int
    history: List[EpochLog] = field(default_factory=list)


# Initialization

def init_state(spec: ArchitectureSpec, seed: int = 0) -> ModelState:
    """He-uniform weights and zero biases drawn from the run seed."""
    rng = np.random.default_rng([seed, 0])
    params = []
    for fan_in, fan_out in spec.layer_shapes():
        limit = np.sqrt(6.0 / fan_in)
        params.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return ModelState(spec, params)


def cast_state(state: ModelState, dtype=np.float32) -> ModelState:
    """Copy of the state in another float type (float32 for inference timing)."""
    return ModelState(state.spec, [p.astype(dtype) for p in state.params])


# Forward pass

@dataclass
class _Cache:
    bounds: np.ndarray
    inputs: List[np.ndarray]
    pre: List[np.ndarray]
    argmax: np.ndarray
    logits: np.ndarray


def _segment_bounds(lengths: Sequence[int]) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)


def _check_input(state: ModelState, features: np.ndarray) -> None:
    if features.ndim != 2 or features.shape[1] != state.spec.input_width:
        raise ArchitectureMismatchError(
            f"Feature width {features.shape[-1] if features.ndim else 0} does not match "
            f"the network input width {state.spec.input_width}.")
    if features.shape[0] == 0:
        raise ArchitectureMismatchError('A sample needs at least one Stixel.')


def _forward_segments(state: ModelState, x: np.ndarray, bounds: np.ndarray) -> _Cache:
    spec = state.spec
    inputs, pre = [], []
    h = x
    tap = None
    for i in range(state.n_extractor):
        w, b = state.layer(i)
        inputs.append(h)
        a = h @ w + b
        pre.append(a)
        h = np.maximum(a, 0)
        if i == spec.tap_index:
            tap = h

    n_segments = len(bounds) - 1
    argmax = np.empty((n_segments, h.shape[1]), dtype=np.int64)
    pooled = np.empty((n_segments, h.shape[1]), dtype=h.dtype)
    for s in range(n_segments):
        lo, hi = bounds[s], bounds[s + 1]
        # argmax keeps the first maximum, i.e. the lowest row
        local = h[lo:hi].argmax(axis=0)
        argmax[s] = local + lo
        pooled[s] = h[lo:hi][local, np.arange(h.shape[1])]
    segment_of_row = np.repeat(np.arange(n_segments), np.diff(bounds))
    h = np.concatenate([tap, pooled[segment_of_row]], axis=1)

    n_head = len(spec.head)
    for j in range(n_head):
        w, b = state.layer(state.n_extractor + j)
        inputs.append(h)
        a = h @ w + b
        pre.append(a)
        h = np.maximum(a, 0) if j < n_head - 1 else a
    return _Cache(bounds, inputs, pre, argmax, h)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _as_features(sample: Union[RoiSample, TrainingSample, np.ndarray]) -> np.ndarray:
    if isinstance(sample, np.ndarray):
        return sample
    return sample.features


def _distinct_rows(features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # sorted distinct rows: the computation no longer sees row order or repeats
    rows, inverse = np.unique(features, axis=0, return_inverse=True)
    return rows, inverse.reshape(-1)


def forward(state: ModelState, sample: Union[RoiSample, np.ndarray]) -> Tuple[np.ndarray, RoiPrediction]:
    """
    Segment one RoI sample.

    Distinct feature rows are evaluated once in sorted order, so the logits of
    a row are bitwise independent of row order and of duplicated rows.

    Args:
        state: network weights
        sample: RoiSample or an (N', input_width) feature array

    Returns:
        tuple: (logits N'x2, RoiPrediction with pc = softmax object column)
    """
    features = np.asarray(_as_features(sample), dtype=state.dtype)
    _check_input(state, features)
    rows, inverse = _distinct_rows(features)
    logits = _forward_segments(state, rows, _segment_bounds([rows.shape[0]])).logits[inverse]
    ids = list(sample.stixel_ids) if isinstance(sample, RoiSample) else list(range(features.shape[0]))
    return logits, RoiPrediction(ids, softmax(logits)[:, 1])


def forward_batch(state: ModelState, samples: Sequence[Union[RoiSample, np.ndarray]]) -> List[np.ndarray]:
    """Logits of several samples in one pass over their concatenated rows."""
    if not samples:
        return []
    features = [np.asarray(_as_features(s), dtype=state.dtype) for s in samples]
    for f in features:
        _check_input(state, f)
    bounds = _segment_bounds([f.shape[0] for f in features])
    cache = _forward_segments(state, np.concatenate(features, axis=0), bounds)
    return [cache.logits[bounds[s]:bounds[s + 1]] for s in range(len(features))]


def global_feature(state: ModelState, features: np.ndarray) -> np.ndarray:
    """Max-pooled extractor output of one sample."""
    features = np.asarray(features, dtype=state.dtype)
    _check_input(state, features)
    h, _ = _distinct_rows(features)
    for i in range(state.n_extractor):
        w, b = state.layer(i)
        h = np.maximum(h @ w + b, 0)
    return h.max(axis=0)


# Loss and gradients

def _row_losses(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    return lse - logits[np.arange(logits.shape[0]), targets]


def loss(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean per-Stixel softmax cross-entropy."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (logits.shape[0],) or np.any((targets != 0) & (targets != 1)):
        raise ValueError('Targets must hold one 0/1 value per Stixel.')
    return float(_row_losses(logits, targets).mean())


def _backward_segments(state: ModelState, cache: _Cache, targets: np.ndarray,
                       row_weight: np.ndarray) -> List[np.ndarray]:
    spec = state.spec
    grads: List[Optional[np.ndarray]] = [None] * len(state.params)

    probs = softmax(cache.logits)
    d = probs
    d[np.arange(d.shape[0]), targets] -= 1.0
    d *= row_weight[:, None]

    n_head = len(spec.head)
    for j in reversed(range(n_head)):
        index = state.n_extractor + j
        if j < n_head - 1:
            d = d * (cache.pre[index] > 0)
        w, _ = state.layer(index)
        grads[2 * index] = cache.inputs[index].T @ d
        grads[2 * index + 1] = d.sum(axis=0)
        d = d @ w.T

    d_tap = d[:, :spec.tap_width]
    d_rows = d[:, spec.tap_width:]
    n_segments = len(cache.bounds) - 1
    d_pooled = np.add.reduceat(d_rows, cache.bounds[:-1], axis=0) if n_segments else d_rows[:0]
    dh = np.zeros((d.shape[0], spec.global_width), dtype=d.dtype)
    columns = np.arange(spec.global_width)
    for s in range(n_segments):
        np.add.at(dh, (cache.argmax[s], columns), d_pooled[s])

    for i in reversed(range(state.n_extractor)):
        if i == spec.tap_index:
            dh = dh + d_tap
        d = dh * (cache.pre[i] > 0)
        w, _ = state.layer(i)
        grads[2 * i] = cache.inputs[i].T @ d
        grads[2 * i + 1] = d.sum(axis=0)
        dh = d @ w.T
    return grads


def backward(state: ModelState, sample: Union[RoiSample, TrainingSample, np.ndarray],
             targets: np.ndarray) -> List[np.ndarray]:
    """
    Exact gradients of loss(forward(sample), targets) for every parameter.

    The max pool routes each feature's gradient to its argmax row; ties go to the lowest row.
    """
    grads, _ = batch_gradients(state, [_as_features(sample)], [targets])
    return grads


def batch_gradients(state: ModelState, features: Sequence[np.ndarray],
                    targets: Sequence[np.ndarray]) -> Tuple[List[np.ndarray], List[float]]:
    """
    Gradient of the batch loss (mean of per-sample mean cross-entropy).

    Returns:
        tuple: (gradients in parameter order, per-sample losses)
    """
    features = [np.asarray(f, dtype=state.dtype) for f in features]
    for f in features:
        _check_input(state, f)
    lengths = [f.shape[0] for f in features]
    t = np.concatenate([np.asarray(v, dtype=np.int64) for v in targets])
    if t.shape[0] != sum(lengths) or np.any((t != 0) & (t != 1)):
        raise ValueError('Targets must hold one 0/1 value per Stixel.')
    bounds = _segment_bounds(lengths)
    cache = _forward_segments(state, np.concatenate(features, axis=0), bounds)
    per_row = _row_losses(cache.logits, t)
    losses = [float(per_row[bounds[s]:bounds[s + 1]].mean()) for s in range(len(features))]
    row_weight = np.repeat([1.0 / (n * len(features)) for n in lengths], lengths).astype(state.dtype)
    return _backward_segments(state, cache, t, row_weight), losses


# Optimizer

def adam_step(state: ModelState, adam: AdamState, grads: Sequence[np.ndarray], config: TrainConfig,
              learning_rate: Optional[float] = None) -> Tuple[ModelState, AdamState]:
    """One ADAM update with bias correction; returns new state and moments."""
    t = adam.step + 1
    lr = config.learning_rate if learning_rate is None else learning_rate
    b1, b2 = config.beta1, config.beta2
    params, m_out, v_out = [], [], []
    for p, m, v, g in zip(state.params, adam.m, adam.v, grads):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        params.append(p - lr * m_hat / (np.sqrt(v_hat) + config.epsilon))
        m_out.append(m)
        v_out.append(v)
    return ModelState(state.spec, params), AdamState(m_out, v_out, t)


# Targets

def target_assignment(sample: RoiSample, gt: InstanceLabeling,
                      class_table: ClassTable) -> Tuple[np.ndarray, Optional[InstanceId]]:
    """
    Binary targets of a RoI sample.

    The associated instance is the GT instance of the RoI's merged class owning
    the most captured Stixels (ties: smaller InstanceId); without one every
    target is 0.
    """
    box_class = class_table.merged(sample.roi.box_label)
    counts: Dict[InstanceId, int] = {}
    owners = [gt.labels.get(sid) for sid in sample.stixel_ids]
    for iid in owners:
        if iid is None or iid.is_background or class_table.merged(iid.label) != box_class:
            continue
        counts[iid] = counts.get(iid, 0) + 1
    if not counts:
        return np.zeros(len(sample), dtype=np.int64), None
    best = min(counts, key=lambda iid: (-counts[iid], iid))
    return np.array([1 if iid == best else 0 for iid in owners], dtype=np.int64), best


# Training

def fit(samples: Sequence[TrainingSample], spec: ArchitectureSpec, config: TrainConfig,
        resume: Optional[NetworkCheckpoint] = None,
        on_epoch: Optional[Callable[[EpochLog], None]] = None) -> TrainResult:
    """
    Mini-batch ADAM training over whole RoI samples.

    Args:
        samples: training samples (at least one)
        spec: architecture
        config: training hyperparameters
        resume: checkpoint to continue from at its epoch boundary
        on_epoch: callback receiving each epoch's log

    Returns:
        TrainResult: final state, optimizer moments and per-epoch history
    """
    ok, message = validate_train_config(config)
    if not ok:
        raise ConfigError(message)
    if not samples:
        raise EmptyDatasetError('No RoI samples to train on.')
    if resume is not None:
        state, adam = state_from_checkpoint(resume, spec)
        start = resume.epoch
    else:
        state = init_state(spec, config.seed)
        adam = AdamState.zeros_like(state.params)
        start = 0

    history = []
    n = len(samples)
    for epoch in range(start, config.epochs):
        started = time.perf_counter()
        order = np.random.default_rng([config.seed, 1, epoch]).permutation(n)
        lr = config.learning_rate_at(epoch)
        epoch_losses = []
        for lo in range(0, n, config.batch_size):
            batch = [samples[k] for k in order[lo:lo + config.batch_size]]
            grads, losses = batch_gradients(state, [s.features for s in batch], [s.targets for s in batch])
            state, adam = adam_step(state, adam, grads, config, lr)
            epoch_losses.extend(losses)
        entry = EpochLog(epoch + 1, float(np.mean(epoch_losses)), time.perf_counter() - started)
        history.append(entry)
        logger.info('epoch %d/%d loss=%.6f (%.2fs)', entry.epoch, config.epochs, entry.mean_loss, entry.wall_time)
        if on_epoch is not None:
            on_epoch(entry)
    return TrainResult(state, adam, max(start, config.epochs), history)


def history_to_csv(history: Sequence[EpochLog]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(['epoch', 'mean_loss', 'wall_time'])
    for entry in history:
        writer.writerow([entry.epoch, f'{entry.mean_loss:.8f}', f'{entry.wall_time:.4f}'])
    return buffer.getvalue()


# Checkpoint conversion

def to_checkpoint(result: TrainResult, config: TrainConfig, extra: Optional[Dict] = None) -> NetworkCheckpoint:
    """Checkpoint of a training result; extra is merged into the training-config echo."""
    train_config = config.to_dict()
    train_config.update(extra or {})
    return NetworkCheckpoint(
        architecture=result.state.spec.to_dict(),
        params=[p.astype(np.float64) for p in result.state.params],
        adam_m=[m.astype(np.float64) for m in result.adam.m],
        adam_v=[v.astype(np.float64) for v in result.adam.v],
        step=result.adam.step,
        epoch=result.epoch,
        train_config=train_config,
    )


def state_from_checkpoint(ckpt: NetworkCheckpoint,
                          spec: Optional[ArchitectureSpec] = None) -> Tuple[ModelState, AdamState]:
    """Model state and optimizer moments; spec, when given, must equal the stored architecture."""
    stored = ArchitectureSpec.from_dict(ckpt.architecture)
    if spec is not None and spec != stored:
        raise ArchitectureMismatchError(f"Checkpoint architecture {stored} differs from the requested {spec}.")
    state = ModelState(stored, [p.copy() for p in ckpt.params])
    adam = AdamState([m.copy() for m in ckpt.adam_m], [v.copy() for v in ckpt.adam_v], ckpt.step)
    return state, adam


# Dataset-level training

def build_training_samples(dataset: Dataset, params: FilterParams, class_table: Optional[ClassTable] = None,
                           scaler: Optional[FeatureScaler] = None) -> List[TrainingSample]:
    """RoI samples of every labeled frame with their binary targets, in frame then detection order."""
    class_table = class_table or dataset.class_table
    samples = []
    for record in dataset:
        if record.labeling is None:
            continue
        for sample in filter_frame(record.frame, record.detections, params, class_table, scaler):
            targets, instance = target_assignment(sample, record.labeling, class_table)
            samples.append(TrainingSample(sample.features, targets, instance,
                                          record.frame.frame_id, sample.roi_index))
    return samples


def train(dataset: Dataset, spec: ArchitectureSpec, config: TrainConfig,
          params: FilterParams = FilterParams(), standardize: bool = False,
          resume: Optional[NetworkCheckpoint] = None,
          on_epoch: Optional[Callable[[EpochLog], None]] = None) -> Tuple[NetworkCheckpoint, List[EpochLog]]:
    """
    Train the network on a dataset and package the result as a checkpoint.

    The checkpoint's training-config echo also records the filter parameters
    and, with standardize, the fitted feature scaler so inference can rebuild
    identical inputs.
    """
    if len(dataset) == 0:
        raise EmptyDatasetError('Cannot train on an empty dataset.')
    scaler = None
    if standardize:
        scaler = FeatureScaler.fit(build_training_samples(dataset, params))
    elif resume is not None:
        scaler = FeatureScaler.from_dict(resume.train_config.get('scaler'))
    samples = build_training_samples(dataset, params, scaler=scaler)
    if not samples:
        raise EmptyDatasetError('The dataset yields no RoI samples.')
    logger.info('training on %d RoI samples from %d frames', len(samples), len(dataset))
    result = fit(samples, spec, config, resume, on_epoch)
    extra = {'filter': {'sc_roi': params.sc_roi, 't_roi': params.t_roi},
             'scaler': scaler.to_dict() if scaler is not None else None}
    return to_checkpoint(result, config, extra), result.history
