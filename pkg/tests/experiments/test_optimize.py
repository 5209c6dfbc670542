import math

import numpy as np
import pytest

from lrlc_core.errors import ConfigurationError, DataError, NonFiniteError
from lrlc_core.gradcheck import grad_check
from lrlc_core.network import Dense
from lrlc_core.specs import RANKED_KINDS, Head, LayerKind, ModelTemplate, Placement, WeightNetConfig
from lrlc_experiments.artifacts import write_metrics
from lrlc_experiments.config import TrainingConfig
from lrlc_experiments.datasets import DatasetSplit
from lrlc_experiments.optimize import (
    AdamState,
    Schedule,
    TrainRun,
    adam_step,
    cross_entropy,
    evaluate,
    schedule_rate,
    train,
)

TINY_NET = WeightNetConfig(projection_channels=2, branches=[(1, 1), (2, 2)], bottleneck_channels=4, expansion_channels=4)


def model(kind=LayerKind.CONV, *, head=Head.FC):
    template = ModelTemplate(depth=2, channels=4, head=head, weight_net=TINY_NET)
    rank = 2 if kind in RANKED_KINDS else None
    placement = Placement.ALL if kind == LayerKind.CONV else Placement.SECOND
    return template.build(kind, rank=rank, placement=placement, input_shape=(8, 8, 1), num_classes=4)


def template_split(name="train", copies=16, seed=5):
    templates = np.random.default_rng(seed).standard_normal((4, 8, 8, 1))
    labels = np.tile(np.arange(4), copies)
    return DatasetSplit(name=name, images=templates[labels], labels=labels, checksum="templates")


def training(**changes):
    settings = {"epochs": 3, "batch_size": 16, "warmup_epochs": 1, "peak_rate": 0.01, "test_mode": True}
    settings.update(changes)
    return TrainingConfig(**settings)


def test_uniform_logits_cost_log_of_the_class_count():
    """Test the loss of uniform logits."""
    loss, grad = cross_entropy(np.zeros((1, 10)), np.array([3]))

    assert loss == pytest.approx(math.log(10))
    assert grad.sum() == pytest.approx(0.0, abs=1e-15)


def test_huge_logits_stay_finite():
    """Test the loss of very large logits."""
    logits = np.array([[1000.0, 0.0], [1000.0, 0.0]])

    loss_right, _ = cross_entropy(logits[:1], np.array([0]))
    loss_wrong, grad = cross_entropy(logits[1:], np.array([1]))

    assert loss_right == pytest.approx(0.0, abs=1e-12)
    assert loss_wrong == pytest.approx(1000.0)
    assert np.all(np.isfinite(grad))


def test_cross_entropy_gradient_matches_finite_differences(rng):
    """Test the cross-entropy gradient."""
    logits = rng.standard_normal((5, 4))
    labels = np.array([0, 3, 1, 1, 2])

    report = grad_check(
        "cross_entropy",
        lambda z: np.asarray(cross_entropy(z, labels)[0]),
        lambda w, z: [w * cross_entropy(z, labels)[1]],
        [logits],
        1e-6,
    )

    assert report.passed, report


def test_cross_entropy_rejects_bad_labels():
    """Test labels outside the class range."""
    with pytest.raises(DataError):
        cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(DataError):
        cross_entropy(np.zeros((2, 3)), np.array([0]))


def test_first_adam_step_moves_by_the_rate():
    """Test the size of the first Adam step."""
    params = {"w": np.array([1.0, -2.0])}

    state = adam_step(AdamState(), params, {"w": np.array([0.5, -3.0])}, 0.01)

    assert state.step == 1
    np.testing.assert_allclose(params["w"], [0.99, -1.99], atol=1e-8)


def test_zero_gradients_leave_parameters_alone():
    """Test an Adam step with zero gradients."""
    params = {"w": np.array([1.5])}

    adam_step(AdamState(), params, {"w": np.zeros(1)}, 0.01)

    assert params["w"][0] == 1.5


def test_adam_minimizes_a_quadratic():
    """Test Adam on a quadratic."""
    params = {"w": np.array([3.0])}
    state = AdamState()

    for _ in range(500):
        adam_step(state, params, {"w": 2 * params["w"]}, 0.1)

    assert params["w"][0] ** 2 < 0.1


def test_non_finite_gradients_abort_without_updating():
    """Test that a NaN gradient stops the step before any update."""
    params = {"w": np.array([1.0])}
    state = AdamState()

    with pytest.raises(NonFiniteError):
        adam_step(state, params, {"w": np.array([np.inf])}, 0.01)

    assert params["w"][0] == 1.0
    assert state.step == 0


def test_schedule_warms_up_then_decays_to_zero():
    """Test the warmup and cosine decay."""
    schedule = Schedule(total_epochs=2, warmup_epochs=1, peak_rate=0.02, steps_per_epoch=5)

    assert schedule_rate(schedule, 0) == 0.0
    assert schedule_rate(schedule, 2) == pytest.approx(0.02 * 2 / 5)
    assert schedule_rate(schedule, 5) == pytest.approx(0.02)
    assert schedule_rate(schedule, 7) == pytest.approx(0.01)
    assert schedule_rate(schedule, 9) == pytest.approx(0.0, abs=1e-15)


def test_warmup_must_end_before_the_last_epoch():
    """Test that a warmup covering every epoch is rejected."""
    with pytest.raises(ConfigurationError):
        Schedule(total_epochs=2, warmup_epochs=2, peak_rate=0.02, steps_per_epoch=5)

    Schedule(total_epochs=0, warmup_epochs=2, peak_rate=0.02, steps_per_epoch=5)


@pytest.mark.parametrize("epochs,warmup", [(2, 1), (3, 2), (5, 1)])
def test_final_step_rate_has_decayed(epochs, warmup):
    """Test that the last optimizer step runs at a negligible rate."""
    schedule = Schedule(total_epochs=epochs, warmup_epochs=warmup, peak_rate=0.02, steps_per_epoch=4)

    assert schedule_rate(schedule, schedule.total_steps - 1) <= 1e-3 * 0.02


def test_zero_epochs_leave_the_initialization():
    """Test training for zero epochs."""
    run = TrainRun.create(model(), 0, training(epochs=0))
    before = {key: value.copy() for key, value in run.network.parameters().items()}

    train(run, template_split(), template_split("validation", copies=2))

    assert run.history == []
    assert all(np.array_equal(before[key], value) for key, value in run.network.parameters().items())


def test_memorizes_four_templates():
    """Test that the model memorizes four templates."""
    split = template_split()
    run = TrainRun.create(model(head=Head.FC), 0, training(epochs=50))

    train(run, split, template_split("validation", copies=2))

    assert run.history[-2].split == "train"
    assert run.history[-2].top1 == 1.0
    assert evaluate(run.network, split).top1 == 1.0


@pytest.mark.parametrize("kind", list(LayerKind))
def test_loss_decreases_for_every_layer_kind(kind):
    """Test that the loss falls for every layer kind."""
    run = TrainRun.create(model(kind), 1, training(epochs=13))

    train(run, template_split(), template_split("validation", copies=2))

    losses = [row.loss for row in run.history if row.split == "train"]
    assert losses[-1] < losses[0]


def test_training_is_deterministic(tmp_path):
    """Test that two runs with one seed write byte-identical metrics and parameters."""
    runs, files = [], []
    for attempt in range(2):
        run = TrainRun.create(model(LayerKind.LRLC), 3, training())
        runs.append(train(run, template_split(), template_split("validation", copies=2)))
        files.append(write_metrics(tmp_path / f"run{attempt}" / "metrics.csv", run.history))

    first, second = runs
    assert files[0].read_bytes() == files[1].read_bytes()
    assert len(first.history) == 6
    state = second.network.state()
    assert all(np.array_equal(value, state[key]) for key, value in first.network.state().items())


def test_evaluate_constant_predictions():
    """Test evaluation of a constant predictor."""
    run = TrainRun.create(model(), 0, training())
    head = next(module for module in run.network.modules if isinstance(module, Dense))
    head.params.weights[...] = 0
    head.params.bias[...] = [0.0, 0.0, 5.0, 0.0]
    split = DatasetSplit("test", np.zeros((4, 8, 8, 1)), np.array([2, 2, 0, 1]), checksum="c")

    result = evaluate(run.network, split)

    assert result.top1 == 0.5
    expected = 0.5 * cross_entropy(np.array([[0.0, 0.0, 5.0, 0.0]]), np.array([2]))[0]
    expected += 0.5 * cross_entropy(np.array([[0.0, 0.0, 5.0, 0.0]]), np.array([0]))[0]
    assert result.loss == pytest.approx(expected)


class _Interrupt(Exception):
    pass


def test_resumed_training_matches_an_uninterrupted_run(tmp_path):
    """Test resuming from a checkpoint after an interruption."""
    config = training(epochs=3)
    split, validation = template_split(), template_split("validation", copies=2)
    reference = train(TrainRun.create(model(LayerKind.LRLC), 4, config, tmp_path / "reference"), split, validation)

    def stop_after_first_epoch(run):
        if run.epoch == 1:
            raise _Interrupt

    interrupted = TrainRun.create(model(LayerKind.LRLC), 4, config, tmp_path / "interrupted")
    with pytest.raises(_Interrupt):
        train(interrupted, split, validation, on_epoch=stop_after_first_epoch)
    resumed = train(TrainRun.resume(tmp_path / "interrupted", config), split, validation)

    assert resumed.epoch == 3
    assert resumed.optimizer.step == reference.optimizer.step
    assert [row.to_dict() for row in resumed.history] == [row.to_dict() for row in reference.history]
    state = reference.network.state()
    assert all(np.array_equal(value, state[key]) for key, value in resumed.network.state().items())
