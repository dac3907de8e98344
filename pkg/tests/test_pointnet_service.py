from unittest.mock import Mock

import numpy as np
import pytest

from conftest import CAR, PERSON, make_frame, make_sample, make_stixel
from domain import ConfigError, DetectionBox, EmptyDatasetError, InstanceId, InstanceLabeling
from services.filter_service import FilterParams
from services.pointnet_service import (
    AdamState, ArchitectureMismatchError, ArchitectureSpec, EpochLog, ModelState, RoiPrediction, TrainConfig,
    TrainingSample, adam_step, backward, batch_gradients, build_training_samples, cast_state, fit, forward,
    forward_batch, global_feature, history_to_csv, init_state, loss, state_from_checkpoint, target_assignment,
    to_checkpoint, train, validate_train_config,
)
from storage import Dataset, DatasetRecord

SMALL_KWARGS = {'input_width': 5, 'extractor': (4, 8), 'head': (8, 2), 'tap_index': 1}
SMALL = ArchitectureSpec(**SMALL_KWARGS)


def _features(rng, rows, width=5):
    return rng.standard_normal((rows, width))


# --- Tests for ArchitectureSpec and ModelState ---

def test_default_architecture_widths():
    """Test the default layer widths and head input width."""
    spec = ArchitectureSpec()
    shapes = spec.layer_shapes()
    assert shapes[0] == (10, 64)
    assert shapes[4] == (128, 1024)
    # head input is the tapped 64-wide layer plus the 1024-wide global feature
    assert shapes[5] == (64 + 1024, 512)
    assert shapes[-1] == (128, 2)


@pytest.mark.parametrize('kwargs', [
    {'head': (8, 3)},
    {'tap_index': 2},
    {'extractor': ()},
    {'input_width': 0},
])
def test_invalid_architecture(kwargs):
    """Test architecture checks."""
    with pytest.raises(ConfigError):
        ArchitectureSpec(**{**SMALL_KWARGS, **kwargs})


def test_architecture_dict_form():
    """Test the plain-dict architecture description."""
    assert ArchitectureSpec.from_dict(SMALL.to_dict()) == SMALL
    with pytest.raises(ArchitectureMismatchError):
        ArchitectureSpec.from_dict({'extractor': [4]})


def test_model_state_checks_shapes():
    """Test that parameters of the wrong shape are refused."""
    state = init_state(SMALL, seed=0)
    params = list(state.params)
    params[0] = params[0][:, :3]
    with pytest.raises(ArchitectureMismatchError):
        ModelState(SMALL, params)


def test_init_is_seeded():
    """Test that initialization depends only on the seed."""
    a, b, c = init_state(SMALL, 1), init_state(SMALL, 1), init_state(SMALL, 2)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    assert not np.array_equal(a.params[0], c.params[0])
    assert not np.any(a.params[1])


# --- Tests for the forward pass ---

def test_forward_outputs_probabilities(rng):
    """Test logits shape and pc in [0, 1]."""
    state = init_state(SMALL, 0)
    logits, prediction = forward(state, _features(rng, 7))
    assert logits.shape == (7, 2)
    assert prediction.stixel_ids == list(range(7))
    assert np.all((prediction.pc >= 0) & (prediction.pc <= 1))


def test_forward_uses_sample_stixel_ids(two_car_frame, class_table):
    """Test that an RoiSample keeps its Stixel ids in the prediction."""
    frame, _, boxes = two_car_frame
    state = init_state(ArchitectureSpec(input_width=10, extractor=(8, 16), head=(8, 2)), 0)
    _, prediction = forward(state, make_sample(frame, boxes[1], class_table))
    assert prediction.stixel_ids == [0, 1, 2, 3, 4, 5, 6, 7]


def test_forward_rejects_wrong_width(rng):
    """Test that the input width must match the architecture."""
    state = init_state(SMALL, 0)
    with pytest.raises(ArchitectureMismatchError):
        forward(state, _features(rng, 3, width=6))
    with pytest.raises(ArchitectureMismatchError):
        forward(state, np.zeros((0, 5)))


@pytest.mark.parametrize('spec', [SMALL, ArchitectureSpec()], ids=['small', 'default'])
def test_forward_is_permutation_equivariant(rng, spec):
    """Test that permuting Stixels permutes the logits bitwise."""
    state = init_state(spec, 3)
    for _ in range(100):
        x = _features(rng, int(rng.integers(1, 40)), width=spec.input_width)
        perm = rng.permutation(x.shape[0])
        logits, _ = forward(state, x)
        permuted, _ = forward(state, x[perm])
        assert np.array_equal(permuted, logits[perm])


@pytest.mark.parametrize('spec', [SMALL, ArchitectureSpec()], ids=['small', 'default'])
def test_forward_ignores_duplicated_stixels(rng, spec):
    """Test that appending copies of Stixels leaves every logit bitwise unchanged."""
    state = init_state(spec, 3)
    for _ in range(100):
        x = _features(rng, int(rng.integers(1, 40)), width=spec.input_width)
        extra = rng.integers(0, x.shape[0], size=int(rng.integers(1, 10)))
        logits, _ = forward(state, x)
        duplicated, _ = forward(state, np.vstack([x, x[extra]]))
        assert np.array_equal(duplicated[:x.shape[0]], logits)
        assert np.array_equal(duplicated[x.shape[0]:], logits[extra])


def test_global_feature_ignores_duplicates_and_order(rng):
    """Test that the pooled feature is a set function of the rows."""
    state = init_state(SMALL, 3)
    for _ in range(100):
        x = _features(rng, int(rng.integers(1, 20)))
        base = global_feature(state, x)
        assert np.array_equal(global_feature(state, x[rng.permutation(x.shape[0])]), base)
        assert np.array_equal(global_feature(state, np.vstack([x, x[:1]])), base)


def test_forward_batch_matches_single_samples(rng):
    """Test that batching samples does not change their logits."""
    state = init_state(SMALL, 4)
    samples = [_features(rng, n) for n in (1, 4, 7)]
    batched = forward_batch(state, samples)
    for x, logits in zip(samples, batched):
        assert np.allclose(logits, forward(state, x)[0], rtol=0, atol=1e-12)
    assert forward_batch(state, []) == []


def test_float32_inference_is_close(rng):
    """Test that a float32 copy predicts nearly the same probabilities."""
    state = init_state(SMALL, 5)
    x = _features(rng, 5)
    _, p64 = forward(state, x)
    _, p32 = forward(cast_state(state, np.float32), x)
    assert p32.pc.dtype == np.float32
    assert np.allclose(p32.pc, p64.pc, atol=1e-4)


def test_decisions_threshold_half():
    """Test that a Stixel is assigned when pc exceeds 0.5."""
    prediction = RoiPrediction([1, 2, 3], np.array([0.2, 0.5, 0.51]))
    assert prediction.decisions.tolist() == [False, False, True]


# --- Tests for loss and gradients ---

def test_loss_of_known_logits():
    """Test mean cross-entropy on hand-picked logits."""
    logits = np.array([[0.0, 0.0], [0.0, np.log(3.0)]])
    assert loss(logits, np.array([0, 1])) == pytest.approx((np.log(2.0) + np.log(4.0 / 3.0)) / 2)


def test_loss_is_stable_for_large_logits():
    """Test that huge logits do not overflow."""
    logits = np.array([[1000.0, -1000.0]])
    assert loss(logits, np.array([0])) == pytest.approx(0.0)
    assert loss(logits, np.array([1])) == pytest.approx(2000.0)


def test_loss_rejects_bad_targets():
    """Test target validation."""
    with pytest.raises(ValueError):
        loss(np.zeros((2, 2)), np.array([0, 2]))
    with pytest.raises(ValueError):
        loss(np.zeros((2, 2)), np.array([0]))


@pytest.mark.parametrize('tap_index', [0, 1])
def test_gradients_match_finite_differences(rng, tap_index):
    """Test every parameter gradient against central finite differences."""
    spec = ArchitectureSpec(input_width=5, extractor=(4, 8), head=(8, 2), tap_index=tap_index)
    state = init_state(spec, 11)
    x = _features(rng, 5)
    targets = np.array([1, 0, 1, 1, 0])
    grads = backward(state, x, targets)

    eps = 1e-6
    for k, param in enumerate(state.params):
        numeric = np.zeros_like(param)
        for index in np.ndindex(param.shape):
            original = param[index]
            param[index] = original + eps
            up = loss(forward(state, x)[0], targets)
            param[index] = original - eps
            down = loss(forward(state, x)[0], targets)
            param[index] = original
            numeric[index] = (up - down) / (2 * eps)
        tolerance = 1e-4 * np.maximum(np.abs(grads[k]) + np.abs(numeric), 1e-5)
        assert np.all(np.abs(grads[k] - numeric) <= tolerance), f'parameter {k}'


def test_batch_gradient_is_mean_of_sample_gradients(rng):
    """Test that the batch loss averages per-sample mean losses."""
    state = init_state(SMALL, 2)
    a, b = _features(rng, 3), _features(rng, 6)
    ta, tb = np.array([1, 0, 0]), np.array([0, 1, 1, 0, 0, 1])
    grads, losses = batch_gradients(state, [a, b], [ta, tb])
    ga, gb = backward(state, a, ta), backward(state, b, tb)
    for g, x, y in zip(grads, ga, gb):
        assert np.allclose(g, (x + y) / 2, rtol=1e-10, atol=1e-12)
    assert losses[0] == pytest.approx(loss(forward(state, a)[0], ta))
    assert losses[1] == pytest.approx(loss(forward(state, b)[0], tb))


def test_dead_relu_unit_gets_no_gradient(rng):
    """Test that a unit inactive on every Stixel passes exactly zero gradient."""
    state = init_state(SMALL, 6)
    state.params[1][2] = -1e6
    x = _features(rng, 8)
    grads = backward(state, x, rng.integers(0, 2, size=8))
    assert not np.any(grads[0][:, 2])
    assert grads[1][2] == 0.0
    # the dead unit's output row into the next layer
    assert not np.any(grads[2][2, :])
    assert np.any(grads[0])


def test_zero_loss_gives_zero_gradients(rng):
    """Test that saturated correct logits give exactly zero loss and gradients."""
    state = init_state(SMALL, 6)
    state.params[-2][...] = 0.0
    state.params[-1][...] = [1000.0, -1000.0]
    x = _features(rng, 5)
    targets = np.zeros(5, dtype=np.int64)
    assert loss(forward(state, x)[0], targets) == 0.0
    grads = backward(state, x, targets)
    assert all(not np.any(g) for g in grads)


# --- Tests for ADAM ---

def test_adam_zero_gradient_leaves_parameters():
    """Test that zero gradients do not move parameters."""
    state = init_state(SMALL, 0)
    adam = AdamState.zeros_like(state.params)
    new_state, new_adam = adam_step(state, adam, [np.zeros_like(p) for p in state.params], TrainConfig())
    assert all(np.array_equal(p, q) for p, q in zip(new_state.params, state.params))
    assert new_adam.step == 1


def test_adam_first_step_moves_by_learning_rate():
    """Test the bias-corrected first step on a unit gradient."""
    state = init_state(SMALL, 0)
    grads = [np.zeros_like(p) for p in state.params]
    grads[0][0, 0] = 1.0
    config = TrainConfig(learning_rate=0.01)
    new_state, _ = adam_step(state, AdamState.zeros_like(state.params), grads, config)
    moved = state.params[0][0, 0] - new_state.params[0][0, 0]
    assert moved == pytest.approx(0.01 / (1.0 + 1e-8), rel=1e-12)
    assert new_state.params[0][0, 1] == state.params[0][0, 1]


def test_adam_descends_a_quadratic_bowl():
    """Test that ADAM shrinks parameters under the gradient of half their squared norm."""
    state = init_state(SMALL, 0)
    adam = AdamState.zeros_like(state.params)
    config = TrainConfig(learning_rate=0.05)
    start = np.sqrt(sum(float((p ** 2).sum()) for p in state.params))
    for _ in range(200):
        state, adam = adam_step(state, adam, [p.copy() for p in state.params], config)
    end = np.sqrt(sum(float((p ** 2).sum()) for p in state.params))
    assert adam.step == 200
    assert end < 0.5 * start


# --- Tests for training ---

def _separable_samples(rng, count=5):
    samples = []
    for _ in range(count):
        targets = rng.integers(0, 2, size=6)
        targets[0], targets[1] = 0, 1
        x = 0.1 * rng.standard_normal((6, 4))
        x[:, 0] = np.where(targets == 1, 2.0, -2.0)
        samples.append(TrainingSample(x, targets))
    return samples


TINY = ArchitectureSpec(input_width=4, extractor=(16, 16), head=(16, 2), tap_index=0)


def test_fit_learns_separable_targets(rng):
    """Test that training drives the loss down on separable Stixels."""
    samples = _separable_samples(rng)
    result = fit(samples, TINY, TrainConfig(batch_size=2, learning_rate=0.01, epochs=150, seed=0))
    assert len(result.history) == 150
    assert result.history[-1].mean_loss < 0.1
    assert result.history[-1].mean_loss < result.history[0].mean_loss
    for sample in samples:
        _, prediction = forward(result.state, sample.features)
        assert prediction.decisions.tolist() == (sample.targets == 1).tolist()


def test_fit_is_deterministic(rng):
    """Test that identical runs give identical weights."""
    samples = _separable_samples(rng)
    config = TrainConfig(batch_size=2, learning_rate=0.01, epochs=3, seed=4)
    a, b = fit(samples, TINY, config), fit(samples, TINY, config)
    assert all(np.array_equal(p, q) for p, q in zip(a.state.params, b.state.params))
    assert [e.mean_loss for e in a.history] == [e.mean_loss for e in b.history]


def test_resume_matches_uninterrupted_training(rng):
    """Test that stopping at an epoch boundary and resuming changes nothing."""
    samples = _separable_samples(rng)
    full = fit(samples, TINY, TrainConfig(batch_size=2, learning_rate=0.01, epochs=4, seed=9))
    half_config = TrainConfig(batch_size=2, learning_rate=0.01, epochs=2, seed=9)
    half = fit(samples, TINY, half_config)
    resumed = fit(samples, TINY, TrainConfig(batch_size=2, learning_rate=0.01, epochs=4, seed=9),
                  resume=to_checkpoint(half, half_config))

    assert resumed.epoch == 4
    assert [e.epoch for e in resumed.history] == [3, 4]
    assert all(np.array_equal(p, q) for p, q in zip(full.state.params, resumed.state.params))
    assert resumed.adam.step == full.adam.step


def test_zero_epochs_returns_initial_state(rng):
    """Test that zero epochs only initializes."""
    result = fit(_separable_samples(rng), TINY, TrainConfig(epochs=0, seed=1))
    assert result.history == []
    assert all(np.array_equal(p, q) for p, q in zip(result.state.params, init_state(TINY, 1).params))


def test_fit_rejects_bad_input(rng):
    """Test training argument checks."""
    with pytest.raises(EmptyDatasetError):
        fit([], TINY, TrainConfig())
    with pytest.raises(ConfigError):
        fit(_separable_samples(rng), TINY, TrainConfig(batch_size=0))


@pytest.mark.parametrize('config, ok', [
    (TrainConfig(), True),
    (TrainConfig(learning_rate=0.0), False),
    (TrainConfig(beta1=1.0), False),
    (TrainConfig(epochs=-1), False),
    (TrainConfig(lr_decay=1.5), False),
])
def test_validate_train_config(config, ok):
    """Test hyperparameter validation."""
    assert validate_train_config(config)[0] == ok


def test_learning_rate_decay():
    """Test the per-epoch multiplicative decay."""
    config = TrainConfig(learning_rate=0.1, lr_decay=0.5)
    assert config.learning_rate_at(0) == 0.1
    assert config.learning_rate_at(2) == pytest.approx(0.025)


def test_history_csv():
    """Test the loss log layout."""
    text = history_to_csv([EpochLog(1, 0.5, 0.25)])
    assert text.splitlines() == ['epoch,mean_loss,wall_time', '1,0.50000000,0.2500']


# --- Tests for checkpoints ---

def test_checkpoint_restores_state(rng):
    """Test that a checkpoint rebuilds the same network."""
    result = fit(_separable_samples(rng), TINY, TrainConfig(batch_size=2, epochs=1))
    state, adam = state_from_checkpoint(to_checkpoint(result, TrainConfig()))
    assert state.spec == TINY
    assert all(np.array_equal(p, q) for p, q in zip(state.params, result.state.params))
    assert adam.step == result.adam.step


def test_checkpoint_architecture_mismatch(rng):
    """Test that resuming into another architecture is refused."""
    result = fit(_separable_samples(rng), TINY, TrainConfig(epochs=1))
    with pytest.raises(ArchitectureMismatchError):
        state_from_checkpoint(to_checkpoint(result, TrainConfig()), SMALL)


# --- Tests for target assignment ---

def test_targets_follow_majority_instance(two_car_frame, class_table):
    """Test binary targets of an RoI over both cars and background."""
    frame, gt, boxes = two_car_frame
    sample = make_sample(frame, DetectionBox(0, 0, 80, 100, box_label=CAR, box_conf=0.9), class_table)
    targets, instance = target_assignment(sample, gt, class_table)
    assert instance == InstanceId(CAR, 1)
    assert dict(zip(sample.stixel_ids, targets.tolist())) == {0: 1, 1: 1, 2: 1, 3: 1, 4: 0, 5: 0, 6: 0, 7: 0}


def test_targets_need_matching_class(two_car_frame, class_table):
    """Test that a person box over a car has no associated instance."""
    frame, gt, boxes = two_car_frame
    sample = make_sample(frame, DetectionBox(10, 20, 50, 80, box_label=PERSON, box_conf=0.9), class_table)
    targets, instance = target_assignment(sample, gt, class_table)
    assert instance is None
    assert not targets.any()


def test_targets_tie_goes_to_smaller_instance(class_table):
    """Test the tie-break between equally represented instances."""
    frame = make_frame([make_stixel(i, 10 * i, 0, 10 * i + 10, 50) for i in range(4)], width=40, height=50)
    gt = InstanceLabeling('f0', {0: InstanceId(CAR, 2), 1: InstanceId(CAR, 2),
                                 2: InstanceId(CAR, 1), 3: InstanceId(CAR, 1)})
    sample = make_sample(frame, DetectionBox(0, 0, 40, 50, box_label=CAR, box_conf=0.9), class_table)
    targets, instance = target_assignment(sample, gt, class_table)
    assert instance == InstanceId(CAR, 1)
    assert targets.tolist() == [0, 0, 1, 1]


def test_build_training_samples(two_car_frame):
    """Test dataset-level sample building in detection order."""
    frame, gt, boxes = two_car_frame
    dataset = Dataset([DatasetRecord(frame, boxes, gt)])
    samples = build_training_samples(dataset, FilterParams(1.0, 0.1))
    assert [s.roi_index for s in samples] == [0, 1]
    assert samples[0].instance == InstanceId(CAR, 1)
    assert samples[1].targets.tolist() == [1, 1]
    assert samples[0].frame_id == 'f0'


def test_train_records_filter_and_scaler(two_car_frame):
    """Test that a trained checkpoint echoes its filter parameters and scaler."""
    frame, gt, boxes = two_car_frame
    dataset = Dataset([DatasetRecord(frame, boxes, gt)])
    spec = ArchitectureSpec(input_width=10, extractor=(8, 8), head=(8, 2), tap_index=0)
    on_epoch = Mock()
    ckpt, history = train(dataset, spec, TrainConfig(batch_size=1, epochs=2), FilterParams(1.0, 0.2),
                          standardize=True, on_epoch=on_epoch)

    assert ckpt.epoch == 2
    assert [e.epoch for e in history] == [1, 2]
    assert on_epoch.call_count == 2
    assert on_epoch.call_args_list[-1].args[0] is history[-1]
    assert ckpt.train_config['filter'] == {'sc_roi': 1.0, 't_roi': 0.2}
    assert len(ckpt.train_config['scaler']['mean']) == 5
    assert ckpt.architecture == spec.to_dict()


def test_train_on_empty_dataset():
    """Test that an empty dataset cannot be trained on."""
    with pytest.raises(EmptyDatasetError):
        train(Dataset([]), SMALL, TrainConfig())
