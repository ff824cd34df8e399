"""Episode rollout, hybrid objective, training loop and evaluation."""
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from config import (
    BEST_CHECKPOINT,
    LAST_CHECKPOINT,
    METRICS_FILE,
    TIMINGS_FILE,
    RunConfig,
)
from data_loader import Dataset, batches
from glimpse import to_pixel
from models import LeNet5, Model, RecurrentAttentionModel, Rollout, save_checkpoint
from nn_core import Adam, check_finite, clip_grad_norm, cross_entropy

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Optimisation protocol."""

    alpha: float = 0.01
    batch_size: int = 128
    max_epochs: int = 300
    patience: int = 50
    lr: float = 3e-4
    seed: int = 1
    lr_decay_factor: float = 0.5
    lr_decay_patience: int = 20
    min_lr: float = 1e-5
    clip_norm: float = 5.0
    show_progress: bool = False

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0 < self.patience < self.max_epochs:
            raise ValueError("patience must be positive and smaller than max_epochs")

    @classmethod
    def from_run_config(cls, config: RunConfig, show_progress: bool = False) -> "TrainConfig":
        return cls(
            alpha=config.alpha,
            batch_size=config.batch_size,
            max_epochs=config.max_epochs,
            patience=config.patience,
            lr=config.lr,
            seed=config.seed,
            lr_decay_factor=config.lr_decay_factor,
            lr_decay_patience=config.lr_decay_patience,
            min_lr=config.min_lr,
            clip_norm=config.clip_norm,
            show_progress=show_progress,
        )


@dataclass
class EpisodeTrace:
    """Per-image record of one rollout."""

    locations: np.ndarray   # (T, 2) glimpse locations
    log_probs: np.ndarray   # (T,)
    baselines: np.ndarray   # (T,)
    logits: np.ndarray      # (C,) at t = T
    reward: float
    label: int
    prediction: int
    image_id: int = 0
    step_predictions: Optional[np.ndarray] = None  # (T,) action-head argmax after each glimpse

    def __post_init__(self):
        steps = len(self.locations)
        if not (len(self.log_probs) == len(self.baselines) == steps):
            raise ValueError(
                f"trace lengths differ: {steps} locations, {len(self.log_probs)} log_probs, {len(self.baselines)} baselines"
            )
        if self.step_predictions is not None and len(self.step_predictions) != steps:
            raise ValueError(f"trace has {steps} locations but {len(self.step_predictions)} step predictions")
        if self.reward != float(self.prediction == self.label):
            raise ValueError("reward must be 1 exactly when prediction equals label")

    @property
    def num_glimpses(self) -> int:
        return len(self.locations)


def generator_streams(seed: int) -> Tuple[np.random.Generator, np.random.Generator]:
    """Independent (shuffle, policy) generators split from the run seed."""
    shuffle_seq, policy_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(shuffle_seq), np.random.default_rng(policy_seq)


def eval_generator(seed: int) -> np.random.Generator:
    """Fresh generator for evaluation, so repeated evaluations agree."""
    return np.random.default_rng([seed, 7])


# ---------------------------------------------------------------------------
# Rollouts and traces
# ---------------------------------------------------------------------------

def traces_from_rollout(rollout: Rollout, labels: np.ndarray,
                        image_ids: Optional[Iterable[int]] = None) -> List[EpisodeTrace]:
    """Split a batch rollout into per-image traces."""
    predictions = rollout.predictions
    image_ids = list(image_ids) if image_ids is not None else list(range(len(labels)))
    traces = []
    for b, label in enumerate(labels):
        traces.append(EpisodeTrace(
            locations=rollout.locations[:, b, :].astype(np.float64),
            log_probs=rollout.log_probs[:, b].astype(np.float64),
            baselines=rollout.baselines[:, b].astype(np.float64),
            logits=rollout.logits[b].astype(np.float64),
            reward=float(predictions[b] == label),
            label=int(label),
            prediction=int(predictions[b]),
            image_id=int(image_ids[b]),
            step_predictions=rollout.step_predictions[:, b].astype(np.int64),
        ))
    return traces


def rollout(model: RecurrentAttentionModel, image: np.ndarray, label: int,
            generator: Optional[np.random.Generator], num_glimpses: Optional[int] = None,
            image_id: int = 0) -> EpisodeTrace:
    """Run one image through T glimpse steps and score the result."""
    batch = model.rollout(image[None], generator, num_glimpses)
    return traces_from_rollout(batch, np.array([label]), [image_id])[0]


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def reinforce_loss(trace: EpisodeTrace) -> float:
    """-sum_t (R - b_t) * log_prob_t with the advantage held constant."""
    return float(-np.sum((trace.reward - trace.baselines) * trace.log_probs))


def baseline_loss(trace: EpisodeTrace) -> float:
    """Mean squared error of the baselines against the terminal reward."""
    return float(np.mean((trace.baselines - trace.reward) ** 2))


def total_loss(trace: EpisodeTrace, alpha: float) -> float:
    """classification + baseline + alpha * REINFORCE."""
    classification, _ = cross_entropy(trace.logits, trace.label)
    return classification + baseline_loss(trace) + alpha * reinforce_loss(trace)


@dataclass
class LossBreakdown:
    classification: float
    baseline: float
    reinforce: float
    alpha: float

    @property
    def total(self) -> float:
        return self.classification + self.baseline + self.alpha * self.reinforce


def hybrid_objective(batch: Rollout, labels: np.ndarray, alpha: float
                     ) -> Tuple[LossBreakdown, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Batch-mean hybrid loss and its gradients.

    Returns:
        Tuple of (losses, rewards (B,), d_logits, d_log_probs (T, B),
        d_baselines (T, B))
    """
    steps, size = batch.log_probs.shape
    rewards = (batch.predictions == labels).astype(batch.baselines.dtype)
    classification, d_logits = cross_entropy(batch.logits, labels)

    residual = batch.baselines - rewards[None, :]
    baseline_term = float(np.mean(np.mean(residual ** 2, axis=0)))
    d_baselines = 2.0 * residual / (steps * size)

    advantage = rewards[None, :] - batch.baselines
    reinforce_term = float(np.mean(-np.sum(advantage * batch.log_probs, axis=0)))
    d_log_probs = -alpha * advantage / size

    losses = LossBreakdown(classification, baseline_term, reinforce_term, alpha)
    return losses, rewards, d_logits, d_log_probs, d_baselines


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------

class EarlyStopping:
    """Stop once validation accuracy has not improved for more than ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = 0
        self.counter = 0

    def update(self, value: float, epoch: int) -> bool:
        """Record one epoch; returns True when ``value`` is a new best."""
        if value > self.best:
            self.best, self.best_epoch, self.counter = value, epoch, 0
            return True
        self.counter += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.counter > self.patience


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` stale epochs."""

    def __init__(self, optimizer: Adam, factor: float = 0.5, patience: int = 20, min_lr: float = 1e-5):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.counter = 0

    def step(self, improved: bool) -> float:
        if improved:
            self.counter = 0
        else:
            self.counter += 1
            if self.counter >= self.patience:
                new_lr = max(self.optimizer.lr * self.factor, self.min_lr)
                if new_lr < self.optimizer.lr:
                    logger.info(f"Validation plateau: lr {self.optimizer.lr:.3g} -> {new_lr:.3g}")
                self.optimizer.lr = new_lr
                self.counter = 0
        return self.optimizer.lr


# ---------------------------------------------------------------------------
# Logs
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    lr: float
    seconds: float = 0.0

    def metrics_line(self) -> str:
        return f"{self.epoch},{self.train_loss:.6f},{self.train_acc:.6f},{self.val_acc:.6f},{self.lr:.6g}"


class MetricsLogger:
    """Appends one metrics line (and one timing line) per epoch."""

    METRICS_HEADER = "epoch,train_loss,train_acc,val_acc,lr"
    TIMINGS_HEADER = "epoch,seconds"

    def __init__(self, run_dir: Path):
        self.metrics_path = Path(run_dir) / METRICS_FILE
        self.timings_path = Path(run_dir) / TIMINGS_FILE
        self.metrics_path.parent.mkdir(parents=True, exist_ok=True)
        self.metrics_path.write_text(self.METRICS_HEADER + "\n")
        self.timings_path.write_text(self.TIMINGS_HEADER + "\n")

    def log(self, record: EpochRecord):
        with open(self.metrics_path, "a") as f:
            f.write(record.metrics_line() + "\n")
        with open(self.timings_path, "a") as f:
            f.write(f"{record.epoch},{record.seconds:.3f}\n")


def trace_record(trace: EpisodeTrace, image_size: int, model_tag: str) -> Dict:
    """JSON-ready form of a trace (one line of the trace log)."""
    pixels = to_pixel(trace.locations, image_size)
    steps = [
        {"t": t, "loc_x": float(loc[0]), "loc_y": float(loc[1]),
         "pixel_x": float(px[0]), "pixel_y": float(px[1]), "baseline": float(b)}
        for t, (loc, px, b) in enumerate(zip(trace.locations, pixels, trace.baselines))
    ]
    if trace.step_predictions is not None:
        for step, prediction in zip(steps, trace.step_predictions):
            step["prediction"] = int(prediction)
    return {
        "image_id": trace.image_id,
        "label": trace.label,
        "prediction": trace.prediction,
        "reward": trace.reward,
        "model_tag": model_tag,
        "image_size": image_size,
        "steps": steps,
    }


def write_traces(path: Path, traces: Iterable[EpisodeTrace], image_size: int, model_tag: str) -> int:
    """Write traces as JSON lines; returns the number of records."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w") as f:
        for trace in traces:
            f.write(json.dumps(trace_record(trace, image_size, model_tag)) + "\n")
            count += 1
    logger.info(f"Wrote {count} trace records to {path}")
    return count


def read_traces(path: Path) -> List[Dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Trace log not found: {path}")
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# Loops
# ---------------------------------------------------------------------------

@dataclass
class EpochMetrics:
    loss: float
    accuracy: float
    classification: float = 0.0
    baseline: float = 0.0
    reinforce: float = 0.0
    batches: int = 0


def _train_batch(model: Model, images: np.ndarray, labels: np.ndarray, alpha: float,
                 policy_rng: np.random.Generator) -> Tuple[LossBreakdown, int]:
    if isinstance(model, LeNet5):
        logits, cache = model.forward(images)
        loss, d_logits = cross_entropy(logits, labels)
        model.backward(d_logits, cache)
        return LossBreakdown(loss, 0.0, 0.0, alpha), int((logits.argmax(axis=-1) == labels).sum())
    batch = model.rollout(images, policy_rng)
    losses, rewards, d_logits, d_log_probs, d_baselines = hybrid_objective(batch, labels, alpha)
    model.backward(batch, d_logits, d_log_probs, d_baselines)
    return losses, int(rewards.sum())


def train_epoch(model: Model, optimizer: Adam, dataset: Dataset, cfg: TrainConfig,
                shuffle_rng: np.random.Generator, policy_rng: np.random.Generator,
                epoch: int = 1) -> EpochMetrics:
    """One pass over ``dataset``: shuffle, one clipped Adam step per batch."""
    totals = np.zeros(4)
    correct = 0
    n_batches = 0
    progress = tqdm(
        batches(dataset, cfg.batch_size, shuffle_rng),
        total=-(-len(dataset) // cfg.batch_size),
        desc=f"epoch {epoch}",
        leave=False,
        disable=not cfg.show_progress,
    )
    for images, labels, _ in progress:
        optimizer.zero_grad()
        losses, batch_correct = _train_batch(model, images, labels, cfg.alpha, policy_rng)
        check_finite(f"loss at epoch {epoch} batch {n_batches}", np.array(losses.total))
        clip_grad_norm(optimizer.params, cfg.clip_norm)
        optimizer.step()

        size = len(labels)
        totals += size * np.array([losses.total, losses.classification, losses.baseline, losses.reinforce])
        correct += batch_correct
        n_batches += 1
        progress.set_postfix(loss=f"{losses.total:.4f}")

    totals /= len(dataset)
    return EpochMetrics(
        loss=float(totals[0]),
        accuracy=correct / len(dataset),
        classification=float(totals[1]),
        baseline=float(totals[2]),
        reinforce=float(totals[3]),
        batches=n_batches,
    )


@dataclass
class EvalResult:
    accuracy: float
    ms_per_image: float
    param_count: int
    num_images: int


def predict(model: Model, images: np.ndarray, generator: Optional[np.random.Generator]) -> np.ndarray:
    if isinstance(model, LeNet5):
        logits, _ = model.forward(images)
        return logits.argmax(axis=-1)
    return model.rollout(images, generator).predictions


def evaluate(model: Model, dataset: Dataset, generator: Optional[np.random.Generator] = None,
             batch_size: int = 128, seed: int = 1) -> EvalResult:
    """Single-rollout accuracy, mean inference time per image and parameter count.

    Locations are drawn from ``generator`` (``eval_generator(seed)`` when
    omitted); the prediction is the argmax of the terminal logits.
    """
    generator = generator if generator is not None else eval_generator(seed)
    correct = 0
    elapsed = 0.0
    for images, labels, _ in batches(dataset, batch_size, None):
        start = time.perf_counter()
        predictions = predict(model, images, generator)
        elapsed += time.perf_counter() - start
        correct += int((predictions == labels).sum())
    n = max(len(dataset), 1)
    return EvalResult(correct / n, 1000.0 * elapsed / n, model.param_count(), len(dataset))


def collect_traces(model: RecurrentAttentionModel, dataset: Dataset, n_images: int,
                   generator: Optional[np.random.Generator] = None, batch_size: int = 128,
                   seed: int = 1) -> List[EpisodeTrace]:
    """Roll out the first ``n_images`` of ``dataset`` and return their traces."""
    generator = generator if generator is not None else eval_generator(seed)
    subset = dataset.subset(n_images)
    traces = []
    for images, labels, idx in batches(subset, batch_size, None):
        traces.extend(traces_from_rollout(model.rollout(images, generator), labels, idx))
    return traces


@dataclass
class FitResult:
    history: List[EpochRecord] = field(default_factory=list)
    best_val_acc: float = 0.0
    best_epoch: int = 0
    best_params: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    stopped_early: bool = False

    @property
    def mean_epoch_seconds(self) -> float:
        return float(np.mean([r.seconds for r in self.history])) if self.history else 0.0


def fit(model: Model, train: Dataset, val: Dataset, cfg: TrainConfig, run_dir: Optional[Path] = None,
        on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> FitResult:
    """Train with early stopping and plateau LR decay; keep the best-val weights.

    When ``run_dir`` is given, metrics/timings are logged there and the best
    and last checkpoints are written after every epoch.
    """
    optimizer = Adam(model.parameters(), lr=cfg.lr)
    scheduler = PlateauScheduler(optimizer, cfg.lr_decay_factor, cfg.lr_decay_patience, cfg.min_lr)
    stopper = EarlyStopping(cfg.patience)
    shuffle_rng, policy_rng = generator_streams(cfg.seed)
    metrics_logger = MetricsLogger(run_dir) if run_dir is not None else None
    result = FitResult()

    logger.info(f"Training {model.spec.tag()} ({model.param_count():,} parameters) on {len(train)} images")
    for epoch in range(1, cfg.max_epochs + 1):
        start = time.perf_counter()
        metrics = train_epoch(model, optimizer, train, cfg, shuffle_rng, policy_rng, epoch)
        val_acc = evaluate(model, val, batch_size=cfg.batch_size, seed=cfg.seed).accuracy
        seconds = time.perf_counter() - start

        record = EpochRecord(epoch, metrics.loss, metrics.accuracy, val_acc, optimizer.lr, seconds)
        result.history.append(record)
        if metrics_logger:
            metrics_logger.log(record)
        if on_epoch:
            on_epoch(record)
        logger.info(
            f"epoch {epoch}: loss={metrics.loss:.4f} (cls {metrics.classification:.4f}, "
            f"base {metrics.baseline:.4f}, rl {metrics.reinforce:.4f}) "
            f"train_acc={metrics.accuracy:.4f} val_acc={val_acc:.4f} lr={optimizer.lr:.3g} [{seconds:.1f}s]"
        )

        improved = stopper.update(val_acc, epoch)
        if improved:
            result.best_val_acc, result.best_epoch = val_acc, epoch
            result.best_params = {name: t.values.copy() for name, t in model.parameters().items()}
            if run_dir is not None:
                save_checkpoint(Path(run_dir) / BEST_CHECKPOINT, model, optimizer.state,
                                {"epoch": epoch, "val_acc": val_acc})
        if run_dir is not None:
            save_checkpoint(Path(run_dir) / LAST_CHECKPOINT, model, optimizer.state,
                            {"epoch": epoch, "val_acc": val_acc})
        scheduler.step(improved)
        if stopper.should_stop:
            logger.info(f"No validation improvement for {stopper.counter} epochs; stopping at epoch {epoch}")
            result.stopped_early = True
            break

    for name, tensor in model.parameters().items():
        if name in result.best_params:
            tensor.values[...] = result.best_params[name]
    return result
