import json

import numpy as np
import pytest

from driftbench import dataio as dio
from driftbench import model as mdl
from driftbench import tensor as tn
from driftbench import trainer as tr
from driftbench.errors import ConfigError, ContractError, DataError, NumericError
from driftbench.experiment import ExperimentConfig
from driftbench.tensor import Tensor

from conftest import small_task

# ---------------------------------------------------------------------- adam


def test_zero_gradient_leaves_params_unchanged():
    p = Tensor([1.0, -2.0], requires_grad=True)
    state = tr.AdamState.for_params([p])
    tr.adam_step(state, [p], [np.zeros(2)], tr.TrainConfig())
    assert p.data.tolist() == [1.0, -2.0]
    assert state.t == 1


def test_first_adam_step_moves_by_learning_rate():
    p = Tensor([1.0], requires_grad=True)
    cfg = tr.TrainConfig(learning_rate=0.001)
    tr.adam_step(tr.AdamState.for_params([p]), [p], [np.array([2.0])], cfg)
    # bias correction makes the first step lr * g / (|g| + eps)
    assert p.data[0] == pytest.approx(1.0 - 0.001 * 2.0 / (2.0 + 1e-8), rel=1e-15)
    assert p.data[0] == pytest.approx(0.9990, abs=1e-9)


def test_adam_minimizes_a_quadratic():
    w = Tensor([0.0], requires_grad=True)
    state = tr.AdamState.for_params([w])
    cfg = tr.TrainConfig(learning_rate=0.05)
    losses = []
    for _ in range(100):
        w.zero_grad()
        loss = ((w - 3.0) * (w - 3.0)).sum()
        tn.backward(loss)
        losses.append(loss.item())
        tr.adam_step(state, [w], [w.grad], cfg)
    assert abs(w.data[0] - 3.0) < 0.5
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_non_finite_gradient_raises():
    p = Tensor([1.0], requires_grad=True)
    with pytest.raises(NumericError):
        tr.adam_step(tr.AdamState.for_params([p]), [p], [np.array([np.inf])], tr.TrainConfig())


def test_gradient_count_must_match():
    p = Tensor([1.0], requires_grad=True)
    with pytest.raises(ContractError):
        tr.adam_step(tr.AdamState.for_params([p]), [p], [], tr.TrainConfig())


def test_clip_global_norm():
    grads = [np.array([3.0]), np.array([4.0])]
    assert tr.clip_global_norm(grads, 1.0) == pytest.approx(5.0)
    assert np.sqrt(grads[0] ** 2 + grads[1] ** 2)[0] == pytest.approx(1.0)
    small = [np.array([0.1])]
    tr.clip_global_norm(small, 1.0)
    assert small[0][0] == 0.1


# -------------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(DataError):
        tr.TrainConfig(target_label_fraction=0.0)
    with pytest.raises(ConfigError):
        tr.TrainConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        tr.TrainConfig(dropout_p=1.0)
    with pytest.raises(ConfigError):
        tr.TrainConfig(batch_size=0)


# --------------------------------------------------------------- selection


def test_stratified_sample_takes_fraction_of_each_class():
    labels = np.repeat(np.arange(4), [10, 20, 30, 40])
    idx = tr.stratified_sample(labels, 0.2, np.random.default_rng(0))
    assert np.bincount(labels[idx]).tolist() == [2, 4, 6, 8]
    assert np.all(np.diff(idx) > 0)
    again = tr.stratified_sample(labels, 0.2, np.random.default_rng(0))
    assert np.array_equal(idx, again)


def test_stratified_sample_rejects_zero_fraction():
    with pytest.raises(DataError):
        tr.stratified_sample(np.zeros(5, dtype=int), 0.0, np.random.default_rng(0))


def test_accuracy_definition_and_tie_break():
    logits = np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0], [0.0, 0.0, 3.0]])
    assert tr.accuracy(logits, np.array([0, 1, 2])) == 100.0
    assert tr.accuracy(logits, np.array([1, 2, 2])) == pytest.approx(100.0 / 3)


# ---------------------------------------------------------------- evaluate


def test_untrained_classifier_is_at_chance():
    _, _, data = small_task(n_classes=8, trials=6, seed=1)
    clf = mdl.init_classifier(mdl.ModelConfig(8, 8, 16, 2, 16), np.random.default_rng(1))
    acc, losses = tr.evaluate(clf, None, data)
    assert abs(acc - 12.5) <= 5.0
    assert losses.mean == pytest.approx(np.log(8.0), abs=0.1)


def test_evaluate_mean_matches_distribution(trained_small):
    clf, _, _, _, data = trained_small
    acc, losses = tr.evaluate(clf, None, data)
    assert losses.mean == float(np.mean(losses.losses))
    assert int(losses.histogram.counts.sum()) == len(data)


def test_evaluate_rejects_empty_dataset(trained_small):
    clf = trained_small[0]
    with pytest.raises(DataError):
        tr.evaluate(clf, None, dio.Dataset([], 4, 8))


# ------------------------------------------------------------------ stage I


def test_separable_two_class_set_is_learned():
    _, _, data = small_task(n_classes=2, n_channels=4, trials=8, seed=2)
    clf = mdl.init_classifier(mdl.ModelConfig(4, 2, 8, 2, 8), np.random.default_rng(2))
    clf, report = tr.train_source(clf, data, tr.TrainConfig(seed=2, max_epochs=50))
    acc, _ = tr.evaluate(clf, None, data)
    assert acc >= 99.0
    assert report.epochs_run <= 50


def test_source_training_reaches_high_accuracy(trained_small):
    clf, report, _, _, data = trained_small
    acc, _ = tr.evaluate(clf, None, data)
    assert acc >= 95.0
    assert clf.stage == "source-trained"
    assert all(np.isfinite(e.train_loss) and 0.0 <= e.eval_accuracy <= 100.0 for e in report.epochs)


def test_best_validation_parameters_are_restored(trained_small):
    _, report, _, _, _ = trained_small
    best = report.epochs[report.best_epoch - 1]
    assert best.eval_loss == min(e.eval_loss for e in report.epochs)
    assert report.epochs_run >= report.best_epoch


def test_same_seed_gives_identical_checkpoint():
    _, _, data = small_task(trials=4, seed=5)

    def run():
        clf = mdl.init_classifier(mdl.ModelConfig(8, 4, 6, 2, 6), np.random.default_rng(5))
        clf, report = tr.train_source(clf, data, tr.TrainConfig(seed=5, max_epochs=3))
        return mdl.classifier_bytes(clf, 5), report.to_jsonl()

    assert run() == run()


def test_stage_one_leaves_adapter_untouched():
    _, _, data = small_task(trials=4, seed=6)
    clf = mdl.init_classifier(mdl.ModelConfig(8, 4, 6, 1, 6), np.random.default_rng(6))
    adapter = mdl.identity_adapter("deep", 8)
    before = mdl.adapter_bytes(adapter, 0)
    tr.train_source(clf, data, tr.TrainConfig(seed=6, max_epochs=2), adapter=adapter)
    assert mdl.adapter_bytes(adapter, 0) == before


def test_stage_one_requires_identity_adapter():
    _, _, data = small_task(trials=4, seed=6)
    clf = mdl.init_classifier(mdl.ModelConfig(8, 4, 6, 1, 6), np.random.default_rng(6))
    adapter = mdl.identity_adapter("linear", 8)
    adapter.b.data[0] = 0.1
    with pytest.raises(ContractError):
        tr.train_source(clf, data, tr.TrainConfig(max_epochs=1), adapter=adapter)


def test_empty_source_is_rejected():
    clf = mdl.init_classifier(mdl.ModelConfig(8, 4, 6, 1, 6), np.random.default_rng(0))
    with pytest.raises(DataError):
        tr.train_source(clf, dio.Dataset([], 4, 8), tr.TrainConfig())


def test_loss_jump_aborts_training(monkeypatch):
    _, _, data = small_task(trials=4, seed=7)
    clf = mdl.init_classifier(mdl.ModelConfig(8, 4, 6, 1, 6), np.random.default_rng(7))
    calls = {"n": 0}

    def fake_loss(clf, adapter, X, y, mode, rng, dropout_p):
        calls["n"] += 1
        level = 1.0 if calls["n"] == 1 else 50.0
        return clf.out_b.sum() * 0.0 + level

    monkeypatch.setattr(tr, "_batch_loss", fake_loss)
    with pytest.raises(NumericError, match="jumped"):
        # one batch per epoch
        tr.train_source(clf, data, tr.TrainConfig(seed=7, max_epochs=5, batch_size=100_000))


def test_report_jsonl_is_one_object_per_epoch(trained_small):
    report = trained_small[1]
    lines = [json.loads(line) for line in report.to_jsonl().splitlines()]
    assert len(lines) == report.epochs_run + 1
    assert lines[-1]["summary"] and lines[-1]["epochs_run"] == report.epochs_run
    assert all("wall_time" not in line for line in lines)


# ----------------------------------------------------------------- stage II


def test_stage_two_requires_trained_classifier():
    _, _, data = small_task(trials=4, seed=8)
    clf = mdl.init_classifier(mdl.ModelConfig(8, 4, 6, 1, 6), np.random.default_rng(8))
    with pytest.raises(ContractError):
        tr.adapt_target(clf, mdl.identity_adapter("linear", 8), data, tr.TrainConfig())


def test_stage_two_never_touches_the_classifier(trained_small):
    clf, _, trials, stats, _ = trained_small
    target = dio.build_dataset(
        dio.apply_shift(trials, dio.ShiftSpec("affine", seed=1)), stats, dio.WindowConfig(50, 25), 4
    )
    before = mdl.classifier_bytes(clf, 0)
    flags = [t.requires_grad for t in clf.parameters()]
    adapter, report = tr.adapt_target(
        clf, mdl.identity_adapter("deep", 8), target, tr.TrainConfig(seed=0, max_epochs=3, batch_size=16)
    )
    assert mdl.classifier_bytes(clf, 0) == before
    assert [t.requires_grad for t in clf.parameters()] == flags
    assert report.n_train == len(tr.stratified_sample(target.arrays()[1], 0.2, np.random.default_rng(0)))
    assert not np.array_equal(adapter.M1.data, np.eye(8))


def test_no_shift_adaptation_does_no_harm(trained_small):
    clf, _, trials, stats, _ = trained_small
    target = dio.build_dataset(dio.apply_shift(trials, dio.ShiftSpec("none")), stats, dio.WindowConfig(50, 25), 4)
    pre, _ = tr.evaluate(clf, None, target)
    adapter, _ = tr.adapt_target(clf, mdl.identity_adapter("linear", 8), target, ExperimentConfig(seed=1).adapt_train)
    post, _ = tr.evaluate(clf, adapter, target)
    assert post >= pre - 2.0
    assert np.linalg.norm(adapter.M.data - np.eye(8)) < 0.5


def test_stage_two_keeps_identity_when_nothing_improves(trained_small, monkeypatch):
    clf, _, _, _, data = trained_small
    # every epoch scores worse than the starting point
    scores = iter([(100.0, 0.1)] + [(90.0, 0.5)] * 10)
    monkeypatch.setattr(tr, "_score", lambda *args: next(scores))
    adapter, report = tr.adapt_target(
        clf, mdl.identity_adapter("linear", 8), data, tr.TrainConfig(seed=0, max_epochs=10, early_stop_patience=3)
    )
    assert report.best_epoch == 0
    assert report.epochs_run == 3
    assert np.array_equal(adapter.M.data, np.eye(8)) and not np.any(adapter.b.data)


def test_adapter_channel_mismatch(trained_small):
    clf, _, _, _, data = trained_small
    with pytest.raises(ContractError):
        tr.adapt_target(clf, mdl.identity_adapter("linear", 3), data, tr.TrainConfig())
