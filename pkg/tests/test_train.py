"""
Tests for the MCSD objective, SGD training and the drop-rate search.
"""
import math

import numpy as np
import pytest
from scipy.special import log_softmax

from mcsd.core.exceptions import TrainingDivergedError, UsageError
from mcsd.models import (
    DecayNormalizer,
    DecayScaling,
    NetworkSpec,
    Regime,
    SplitSpec,
    TrainConfig,
)
from mcsd.services.data import gen_moons, split
from mcsd.services.numerics import Gradient
from mcsd.services.resnet import GateMask, ResidualNet, forward
from mcsd.services.stochastic import DepthSchedule
from mcsd.services.train import (
    SGD,
    batch_slices,
    classification_error,
    decay_coefficients,
    learning_rate,
    mcsd_loss,
    search_drop_rate,
    train,
    training_schedule,
)
from mcsd.utils.instrumentation import sample_value


@pytest.fixture
def moons_split():
    """Small two-moons train/validation split."""
    train_ds, val_ds, _ = split(gen_moons(160, noise_sigma=0.2, seed=1),
                                SplitSpec(train_frac=0.7, val_frac=0.3, test_frac=0.0))
    return train_ds, val_ds


@pytest.fixture
def moons_spec():
    return NetworkSpec(input_dim=2, hidden_dim=6, num_blocks=3, num_classes=2)


@pytest.mark.unit
def test_loss_without_decay_is_cross_entropy(small_net, rng):
    x = rng.standard_normal((6, 3))
    labels = np.array([0, 1, 2, 2, 1, 0])
    mask = GateMask.from_gates([True, False, True])
    logits = forward(small_net.clone(), x, mask, "train")
    expected = -np.mean(log_softmax(logits, axis=1)[np.arange(6), labels])
    assert mcsd_loss(small_net, x, labels, mask, 0.0, None) == pytest.approx(expected, abs=1e-12)


@pytest.mark.unit
def test_uniform_logits_give_log_classes(small_net, rng):
    small_net.params["head.weight"][:] = 0.0
    x = rng.standard_normal((4, 3))
    loss = mcsd_loss(small_net, x, [0, 1, 2, 0], GateMask.all_on(3), 0.0, None)
    assert loss == pytest.approx(math.log(3), abs=1e-12)


@pytest.mark.unit
def test_survival_scaled_decay_term():
    """q = 0.5, lambda = 1, ||M||^2 = 4, batch of 2: decay term 1.0."""
    spec = NetworkSpec(input_dim=1, hidden_dim=2, num_blocks=1, num_classes=2, use_batchnorm=False)
    net = ResidualNet.initialize(spec, seed=0)
    for name in net.params:
        net.params[name][:] = 0.0
    net.params["blocks.0.fc1.weight"][:] = np.array([[2.0, 0.0], [0.0, 0.0]])
    schedule = DepthSchedule.constant(1, 0.5)
    x, labels = np.array([[1.0], [-1.0]]), [0, 1]
    with_decay = mcsd_loss(net, x, labels, GateMask.all_on(1), 1.0, schedule)
    without = mcsd_loss(net, x, labels, GateMask.all_on(1), 0.0, schedule)
    assert with_decay - without == pytest.approx(1.0, abs=1e-12)


@pytest.mark.unit
def test_decay_coefficients(small_net):
    schedule = DepthSchedule(survival=(1.0, 0.75, 0.5))
    coefs = decay_coefficients(small_net, 0.1, schedule, 10)
    assert coefs["stem.weight"] == pytest.approx(0.01)
    assert coefs["blocks.2.fc2.weight"] == pytest.approx(0.005)
    assert "blocks.0.fc1.bias" not in coefs
    drop = decay_coefficients(small_net, 0.1, schedule, 10, DecayScaling.DROP)
    assert drop["blocks.0.fc1.weight"] == 0.0
    assert drop["blocks.1.fc1.weight"] == pytest.approx(0.0025)
    with pytest.raises(ValueError):
        decay_coefficients(small_net, 0.1, schedule, 0)


@pytest.mark.unit
def test_sgd_momentum_step():
    params = {"w": np.array([1.0])}
    opt = SGD(params, lr=0.1, momentum=0.5)
    opt.step(Gradient({"w": np.array([2.0])}))
    opt.step(Gradient({"w": np.array([2.0])}))
    # velocities 2 then 3
    assert params["w"][0] == pytest.approx(1.0 - 0.1 * 2.0 - 0.1 * 3.0)


@pytest.mark.unit
def test_learning_rate_milestones():
    cfg = TrainConfig(lr=0.2, epochs=100)
    assert learning_rate(cfg, 0) == pytest.approx(0.2)
    assert learning_rate(cfg, 49) == pytest.approx(0.2)
    assert learning_rate(cfg, 50) == pytest.approx(0.02)
    assert learning_rate(cfg, 75) == pytest.approx(0.002)


@pytest.mark.unit
def test_batch_slices():
    assert batch_slices(10, 4, 2) == [slice(0, 4), slice(4, 8), slice(8, 10)]
    assert batch_slices(9, 4, 2) == [slice(0, 4), slice(4, 8)]


@pytest.mark.unit
def test_training_schedule_only_for_mcsd():
    assert training_schedule(4, TrainConfig(regime=Regime.DET)) is None
    assert training_schedule(4, TrainConfig(q_final=0.5)).survival[-1] == 0.5


@pytest.mark.unit
@pytest.mark.parametrize("use_batchnorm", [False, True])
@pytest.mark.parametrize("regime", [Regime.DET, Regime.MCSD])
def test_zero_learning_rate_leaves_parameters_unchanged(moons_split, use_batchnorm, regime):
    train_ds, _ = moons_split
    spec = NetworkSpec(input_dim=2, hidden_dim=4, num_blocks=2, num_classes=2, use_batchnorm=use_batchnorm)
    net = ResidualNet.initialize(spec, seed=3)
    before = {k: v.copy() for k, v in net.params.items()}
    cfg = TrainConfig(lr=0.0, epochs=3, batch_size=16, regime=regime, q_final=0.5)
    sub = train_ds.subset(np.arange(96))
    report = train(net, sub, cfg)
    for name, value in before.items():
        np.testing.assert_array_equal(net.params[name], value)
    assert report.train_loss == [report.train_loss[0]] * 3
    full = mcsd_loss(net, sub.features, sub.labels, GateMask.all_on(2), cfg.weight_decay,
                     training_schedule(2, cfg), 16)
    assert report.train_loss[0] == pytest.approx(full, rel=1e-12)


@pytest.mark.unit
def test_training_is_bit_reproducible(moons_split, moons_spec, tmp_path):
    train_ds, val_ds = moons_split
    cfg = TrainConfig(epochs=3, batch_size=16, seed=4)
    paths = []
    for run in range(2):
        net = ResidualNet.initialize(moons_spec, seed=4)
        report = train(net, train_ds, cfg, eval_dataset=val_ds, checkpoint_path=tmp_path / f"run{run}.json")
        paths.append(report.checkpoint)
    assert open(paths[0], "rb").read() == open(paths[1], "rb").read()


@pytest.mark.unit
def test_certain_survival_reduces_to_deterministic_training(moons_split, moons_spec):
    train_ds, _ = moons_split
    mcsd_net = ResidualNet.initialize(moons_spec, seed=2)
    det_net = ResidualNet.initialize(moons_spec, seed=2)
    train(mcsd_net, train_ds, TrainConfig(epochs=2, batch_size=16, q_final=1.0, seed=2))
    train(det_net, train_ds, TrainConfig(epochs=2, batch_size=16, regime=Regime.DET, seed=2))
    for name, value in det_net.params.items():
        np.testing.assert_array_equal(mcsd_net.params[name], value)


@pytest.mark.unit
def test_mcdo_training_runs(moons_split, moons_spec):
    train_ds, val_ds = moons_split
    net = ResidualNet.initialize(moons_spec, seed=0)
    report = train(net, train_ds, TrainConfig(epochs=2, batch_size=16, regime=Regime.MCDO,
                                              dropout_rate=0.2), eval_dataset=val_ds)
    assert len(report.train_loss) == 2
    assert all(np.isfinite(report.train_loss))


@pytest.mark.unit
def test_dataset_normalizer_runs(moons_split, moons_spec):
    train_ds, _ = moons_split
    net = ResidualNet.initialize(moons_spec, seed=0)
    report = train(net, train_ds, TrainConfig(epochs=1, batch_size=16,
                                              decay_normalizer=DecayNormalizer.DATASET))
    assert len(report.train_loss) == 1


@pytest.mark.unit
def test_separable_blobs_are_learned(separable_blobs):
    spec = NetworkSpec(input_dim=2, hidden_dim=8, num_blocks=2, num_classes=2)
    net = ResidualNet.initialize(spec, seed=0)
    train(net, separable_blobs, TrainConfig(epochs=40, batch_size=32, regime=Regime.DET))
    assert classification_error(net, separable_blobs) == 0.0


@pytest.mark.unit
def test_train_counts_steps_and_logs_progress(moons_split, moons_spec, mocker):
    train_ds, _ = moons_split
    net = ResidualNet.initialize(moons_spec, seed=0)
    progress = mocker.patch("mcsd.services.train.progress_logger")
    before = sample_value("mcsd_train_steps_total")
    train(net, train_ds, TrainConfig(epochs=2, batch_size=16), progress=True)
    assert sample_value("mcsd_train_steps_total") - before == 2 * len(batch_slices(train_ds.n, 16, 2))
    epochs = [c.kwargs["extra"]["epoch"] for c in progress.info.call_args_list]
    assert epochs == [0, 1]


@pytest.mark.unit
def test_divergence_is_reported(moons_split, moons_spec, mocker):
    train_ds, _ = moons_split
    net = ResidualNet.initialize(moons_spec, seed=0)
    zero = Gradient({k: np.zeros_like(v) for k, v in net.params.items()})
    mocker.patch("mcsd.services.train.loss_and_gradient", return_value=(float("nan"), zero, b""))
    with pytest.raises(TrainingDivergedError) as exc:
        train(net, train_ds, TrainConfig(epochs=2, batch_size=16))
    assert exc.value.epoch == 0 and exc.value.batch == 0


@pytest.mark.unit
def test_empty_or_tiny_dataset_is_rejected(moons_split, moons_spec):
    train_ds, _ = moons_split
    net = ResidualNet.initialize(moons_spec, seed=0)
    with pytest.raises(UsageError):
        train(net, train_ds.subset(np.arange(0)), TrainConfig(epochs=1))
    with pytest.raises(UsageError):
        train(net, train_ds.subset(np.arange(1)), TrainConfig(epochs=1))


@pytest.mark.unit
def test_search_with_single_candidate(moons_split, moons_spec):
    train_ds, val_ds = moons_split
    result, best = search_drop_rate(train_ds, val_ds, moons_spec, TrainConfig(epochs=2, batch_size=16),
                                    [0.7], passes=5)
    assert result.best == 0.7
    assert result.parameter == "q_final"
    assert len(result.rows) == 1
    assert isinstance(best, ResidualNet)


@pytest.mark.unit
def test_search_ranks_by_validation_nll(moons_split, moons_spec):
    train_ds, val_ds = moons_split
    result, _ = search_drop_rate(train_ds, val_ds, moons_spec, TrainConfig(epochs=2, batch_size=16),
                                 [0.5, 0.7, 0.9], passes=5)
    assert [r.candidate for r in result.rows] == [0.5, 0.7, 0.9]
    assert result.best == min(result.rows, key=lambda r: r.val_nll).candidate


@pytest.mark.unit
def test_search_candidate_one_equals_det_training(moons_split, moons_spec):
    train_ds, val_ds = moons_split
    cfg = TrainConfig(epochs=2, batch_size=16, seed=6)
    _, best = search_drop_rate(train_ds, val_ds, moons_spec, cfg, [1.0], passes=3)
    det = ResidualNet.initialize(moons_spec, seed=6)
    train(det, train_ds, cfg.model_copy(update={"regime": Regime.DET}))
    for name, value in det.params.items():
        np.testing.assert_array_equal(best.params[name], value)


@pytest.mark.unit
def test_search_over_dropout_rates(moons_split, moons_spec):
    train_ds, val_ds = moons_split
    cfg = TrainConfig(epochs=1, batch_size=16, regime=Regime.MCDO, dropout_rate=0.1)
    result, _ = search_drop_rate(train_ds, val_ds, moons_spec, cfg, [0.1, 0.3], passes=3)
    assert result.parameter == "dropout_rate"
    assert len(result.rows) == 2


@pytest.mark.unit
def test_search_refuses_det(moons_split, moons_spec):
    train_ds, val_ds = moons_split
    with pytest.raises(UsageError):
        search_drop_rate(train_ds, val_ds, moons_spec, TrainConfig(regime=Regime.DET), [0.5])
