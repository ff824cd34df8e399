import math

import numpy as np
import pytest

from config import METRICS_FILE, TIMINGS_FILE
from data_loader import Dataset
from models import LeNet5, LocationHead, load_checkpoint
from nn_core import Adam, cross_entropy, grad_check
from tests.conftest import toy_dataset, toy_model
from training import (
    EarlyStopping,
    EpisodeTrace,
    PlateauScheduler,
    TrainConfig,
    baseline_loss,
    collect_traces,
    evaluate,
    fit,
    generator_streams,
    hybrid_objective,
    read_traces,
    reinforce_loss,
    rollout,
    total_loss,
    train_epoch,
    traces_from_rollout,
    write_traces,
)


def make_trace(reward=1.0, baselines=(0.0, 0.0), log_probs=(-1.0, -1.0), logits=(2.0, 0.0, 0.0)):
    steps = len(baselines)
    label = 0
    prediction = 0 if reward else 1
    return EpisodeTrace(
        locations=np.zeros((steps, 2)),
        log_probs=np.array(log_probs, dtype=float),
        baselines=np.array(baselines, dtype=float),
        logits=np.array(logits, dtype=float),
        reward=reward,
        label=label,
        prediction=prediction,
    )


def small_config(**overrides):
    values = dict(batch_size=4, max_epochs=3, patience=2, lr=1e-3, seed=1)
    values.update(overrides)
    return TrainConfig(**values)


# ---------------------------------------------------------------------------
# Objective terms
# ---------------------------------------------------------------------------

def test_reinforce_loss_example():
    assert reinforce_loss(make_trace(reward=1.0, baselines=(0.0, 0.0), log_probs=(-1.0, -1.0))) == pytest.approx(2.0)


def test_reinforce_loss_vanishes_at_perfect_baseline():
    assert reinforce_loss(make_trace(reward=1.0, baselines=(1.0, 1.0), log_probs=(-3.0, -0.2))) == 0.0


def test_baseline_loss_examples():
    assert baseline_loss(make_trace(reward=1.0, baselines=(0.0,) * 4, log_probs=(0.0,) * 4)) == pytest.approx(1.0)
    assert baseline_loss(make_trace(reward=1.0, baselines=(1.0, 1.0))) == 0.0


def test_constant_baseline_minimiser_is_mean_reward():
    rewards = np.array([1.0, 0.0, 1.0, 1.0])
    candidates = np.linspace(0, 1, 101)
    losses = [np.mean([baseline_loss(make_trace(r, baselines=(b, b))) for r in rewards]) for b in candidates]
    assert candidates[int(np.argmin(losses))] == pytest.approx(rewards.mean())


def test_total_loss_combines_terms():
    trace = make_trace(reward=1.0, baselines=(0.3, 0.6), log_probs=(-1.5, -0.5))
    ce, _ = cross_entropy(trace.logits, trace.label)
    assert total_loss(trace, 0.0) == pytest.approx(ce + baseline_loss(trace))
    assert total_loss(trace, 0.01) == pytest.approx(ce + baseline_loss(trace) + 0.01 * reinforce_loss(trace))
    perfect = make_trace(reward=1.0, baselines=(1.0, 1.0))
    assert total_loss(perfect, 0.01) == pytest.approx(cross_entropy(perfect.logits, 0)[0])


def test_episode_trace_checks_reward_and_lengths():
    with pytest.raises(ValueError):
        EpisodeTrace(np.zeros((2, 2)), np.zeros(2), np.zeros(3), np.zeros(3), 1.0, 0, 0)
    with pytest.raises(ValueError):
        EpisodeTrace(np.zeros((2, 2)), np.zeros(2), np.zeros(2), np.zeros(3), 1.0, 0, 2)
    with pytest.raises(ValueError, match="step predictions"):
        EpisodeTrace(np.zeros((2, 2)), np.zeros(2), np.zeros(2), np.zeros(3), 1.0, 0, 0,
                     step_predictions=np.zeros(3, dtype=int))


def test_train_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(alpha=0.0)
    with pytest.raises(ValueError):
        TrainConfig(patience=300, max_epochs=300)
    defaults = TrainConfig()
    assert (defaults.alpha, defaults.batch_size, defaults.max_epochs, defaults.patience) == (0.01, 128, 300, 50)
    assert defaults.lr == pytest.approx(3e-4)


def test_reinforce_step_raises_log_prob_of_taken_locations():
    rng = np.random.default_rng(3)
    head = LocationHead(4, 0.1, rng, dtype=np.float64)
    h = rng.normal(size=(2, 4))  # two steps
    _, _, raw, _, _ = head.forward(h, rng)

    def fn(backward):
        _, _, _, log_prob, cache = head.forward(h, None, raw)
        if backward:
            head.backward(np.full(2, -1.0), cache)  # R = 1, b = 0
        return -float(np.sum(log_prob))

    assert grad_check(fn, head.parameters()) < 1e-4

    _, _, _, before, cache = head.forward(h, None, raw)
    for tensor in head.parameters().values():
        tensor.zero_grad()
    head.backward(np.full(2, -1.0), cache)
    for tensor in head.parameters().values():
        tensor.values -= 1e-3 * tensor.grad
    _, _, _, after, _ = head.forward(h, None, raw)
    assert after.sum() > before.sum()


# ---------------------------------------------------------------------------
# Rollouts and the batched objective
# ---------------------------------------------------------------------------

def test_single_image_rollout_trace():
    model = toy_model("MRAM", num_glimpses=7)
    image = np.random.default_rng(0).normal(size=(8, 8))
    trace = rollout(model, image, 1, np.random.default_rng(1))
    assert trace.num_glimpses == 7
    assert len(trace.baselines) == len(trace.log_probs) == 7
    again = rollout(model, image, 1, np.random.default_rng(1))
    np.testing.assert_array_equal(trace.locations, again.locations)


def test_oracle_classifier_always_rewarded():
    model = toy_model("RAM")
    model.action.bias.values[:] = [0.0, 100.0, 0.0]
    images = np.random.default_rng(0).normal(size=(5, 8, 8))
    for image in images:
        assert rollout(model, image, 1, np.random.default_rng(2)).reward == 1.0


def test_hybrid_objective_matches_per_trace_losses(images):
    model = toy_model("MRAM", baseline_mode="hybrid")
    labels = np.array([0, 2])
    batch = model.rollout(images, np.random.default_rng(4))
    losses, rewards, d_logits, d_log_probs, d_baselines = hybrid_objective(batch, labels, 0.01)

    traces = traces_from_rollout(batch, labels)
    assert losses.total == pytest.approx(np.mean([total_loss(t, 0.01) for t in traces]))
    assert losses.total == pytest.approx(losses.classification + losses.baseline + 0.01 * losses.reinforce)
    assert losses.reinforce == pytest.approx(np.mean([reinforce_loss(t) for t in traces]))
    np.testing.assert_array_equal(rewards, [t.reward for t in traces])

    steps, size = batch.log_probs.shape
    np.testing.assert_allclose(d_baselines, 2 * (batch.baselines - rewards) / (steps * size))
    np.testing.assert_allclose(d_log_probs, -0.01 * (rewards - batch.baselines) / size)


def test_policy_gradient_zero_when_baseline_equals_reward(images):
    model = toy_model("DRAM")
    labels = np.array([0, 1])
    batch = model.rollout(images, np.random.default_rng(4))
    batch.baselines = np.tile((batch.predictions == labels).astype(float), (batch.log_probs.shape[0], 1))
    losses, _, _, d_log_probs, _ = hybrid_objective(batch, labels, 0.01)
    assert losses.reinforce == 0.0
    assert losses.baseline == 0.0
    assert np.all(d_log_probs == 0.0)


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------

def test_early_stopping_after_patience_plus_one_stale_epochs():
    stopper = EarlyStopping(patience=3)
    stopped_at = None
    for epoch in range(1, 20):
        stopper.update(0.5, epoch)
        if stopper.should_stop:
            stopped_at = epoch
            break
    assert stopper.best_epoch == 1
    assert stopped_at == 1 + 3 + 1


def test_plateau_scheduler_halves_learning_rate():
    model = toy_model("RAM")
    optimizer = Adam(model.parameters(), lr=1e-3)
    scheduler = PlateauScheduler(optimizer, factor=0.5, patience=2, min_lr=3e-4)
    assert scheduler.step(False) == pytest.approx(1e-3)
    assert scheduler.step(False) == pytest.approx(5e-4)
    scheduler.step(True)
    scheduler.step(False)
    assert scheduler.step(False) == pytest.approx(3e-4)


# ---------------------------------------------------------------------------
# Loops
# ---------------------------------------------------------------------------

def test_train_epoch_batch_count_and_determinism():
    dataset = toy_dataset(n=10)
    results = []
    for _ in range(2):
        model = toy_model("MRAM", dtype=np.float32)
        optimizer = Adam(model.parameters(), lr=1e-3)
        shuffle_rng, policy_rng = generator_streams(1)
        results.append(train_epoch(model, optimizer, dataset, small_config(), shuffle_rng, policy_rng))
    assert results[0].batches == math.ceil(10 / 4)
    assert results[0].loss == results[1].loss
    assert 0.0 <= results[0].accuracy <= 1.0


def test_train_epoch_lenet_uses_classification_only():
    dataset = toy_dataset(n=6)
    model = LeNet5(num_classes=3, image_size=8)
    optimizer = Adam(model.parameters(), lr=1e-3)
    shuffle_rng, policy_rng = generator_streams(1)
    metrics = train_epoch(model, optimizer, dataset, small_config(), shuffle_rng, policy_rng)
    assert metrics.baseline == 0.0 and metrics.reinforce == 0.0
    assert metrics.loss == pytest.approx(metrics.classification)


def test_fit_writes_logs_and_checkpoints(tmp_path):
    train, val = toy_dataset(n=12), toy_dataset(n=6, seed=1, split="val")
    model = toy_model("DRAM", dtype=np.float32)
    result = fit(model, train, val, small_config(), tmp_path)

    assert 1 <= len(result.history) <= 3
    lines = (tmp_path / METRICS_FILE).read_text().splitlines()
    assert lines[0] == "epoch,train_loss,train_acc,val_acc,lr"
    assert len(lines) == len(result.history) + 1
    assert len((tmp_path / TIMINGS_FILE).read_text().splitlines()) == len(result.history) + 1
    assert (tmp_path / "best.npz").exists() and (tmp_path / "last.npz").exists()

    best, _, extra = load_checkpoint(tmp_path / "best.npz")
    assert extra["epoch"] == result.best_epoch
    assert evaluate(best, val, batch_size=4, seed=1).accuracy == pytest.approx(result.best_val_acc)


def test_fit_metrics_log_is_reproducible(tmp_path):
    logs = []
    for name in ("a", "b"):
        run_dir = tmp_path / name
        fit(toy_model("MRAM", dtype=np.float32), toy_dataset(n=12), toy_dataset(n=6, seed=1, split="val"),
            small_config(max_epochs=2, patience=1), run_dir)
        logs.append((run_dir / METRICS_FILE).read_bytes())
    assert logs[0] == logs[1]


def test_evaluate_reports_accuracy_time_and_params():
    model = toy_model("RAM", dtype=np.float32)
    model.action.bias.values[:] = [0.0, 0.0, 100.0]
    dataset = toy_dataset(n=9)
    dataset.labels[:] = 2
    result = evaluate(model, dataset, batch_size=4)
    assert result.accuracy == 1.0
    assert result.param_count == model.param_count()
    assert result.ms_per_image >= 0.0
    assert result.num_images == 9


def test_random_model_accuracy_near_chance():
    model = toy_model("RAM", dtype=np.float32)
    dataset = toy_dataset(n=600, seed=5)
    accuracy = evaluate(model, dataset, batch_size=128).accuracy
    p = 1 / 3
    assert abs(accuracy - p) <= 4 * math.sqrt(p * (1 - p) / 600)


def test_traces_round_trip_through_log(tmp_path):
    model = toy_model("MRAM", dtype=np.float32)
    dataset = toy_dataset(n=10)
    traces = collect_traces(model, dataset, n_images=7, batch_size=4)
    path = tmp_path / "traces.jsonl"
    assert write_traces(path, traces, 8, model.spec.tag()) == 7

    records = read_traces(path)
    assert len(records) == 7
    assert [r["image_id"] for r in records] == list(range(7))
    for record, trace in zip(records, traces):
        assert len(record["steps"]) == model.spec.num_glimpses
        assert record["reward"] == trace.reward
        assert record["label"] == int(dataset.labels[record["image_id"]])
        first = record["steps"][0]
        assert first["pixel_x"] == pytest.approx((first["loc_x"] + 1) / 2 * 7)
        step_predictions = [step["prediction"] for step in record["steps"]]
        assert step_predictions == trace.step_predictions.tolist()
        assert step_predictions[-1] == record["prediction"] == trace.prediction


def test_read_traces_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_traces(tmp_path / "absent.jsonl")


def test_classification_loss_falls_on_separable_toy_task():
    rng = np.random.default_rng(0)
    labels = np.arange(24) % 3
    images = (labels[:, None, None] - 1.0) + 0.05 * rng.normal(size=(24, 8, 8))
    dataset = Dataset(images.astype(np.float32), labels, "train", "toy", 3)
    model = toy_model("RAM", dtype=np.float32)
    optimizer = Adam(model.parameters(), lr=1e-2)
    shuffle_rng, policy_rng = generator_streams(1)
    cfg = small_config(batch_size=8, max_epochs=30, patience=5)
    losses = [train_epoch(model, optimizer, dataset, cfg, shuffle_rng, policy_rng).classification
              for _ in range(20)]
    assert np.mean(losses[-3:]) < 0.7 * np.mean(losses[:3])
