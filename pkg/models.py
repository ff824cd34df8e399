"""Recurrent attention models (RAM, DRAM, MRAM) and the LeNet-5 reference.

All three attention variants share one implementation; they differ only in
wiring:

    variant  cores  location head reads  action head reads  context CNN
    RAM      1      H                    H                  no
    MRAM     2      lower H1             upper H2           no
    DRAM     2      upper H2             lower H1           optional

The upper core always takes the lower core's hidden state as its input.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from config import ConfigError, RunConfig
from glimpse import GlimpseConfig, GlimpseNetwork, Location, build_retina_batch
from nn_core import (
    AdamState,
    Conv2d,
    Linear,
    LSTMCell,
    LstmState,
    NumericError,
    Tensor,
    check_finite,
    max_pool2d,
    max_pool2d_backward,
    num_parameters,
    relu,
    relu_backward,
    tanh_backward,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
LOG_2PI = float(np.log(2 * np.pi))


@dataclass
class ModelSpec:
    """Architecture selector plus every size that shapes the parameters."""

    variant: str = "RAM"
    hidden: int = 256
    num_glimpses: int = 7
    glimpse_cfg: GlimpseConfig = field(default_factory=GlimpseConfig)
    baseline_mode: str = "single"
    context_cnn: bool = False
    num_classes: int = 10
    policy_sigma: float = 0.1
    image_size: int = 28
    glimpse_hidden: int = 128
    loc_hidden: int = 128
    baseline_hidden: int = 64

    def __post_init__(self):
        self.variant = self.variant.upper()
        if self.variant not in ("RAM", "DRAM", "MRAM", "LENET"):
            raise ConfigError(f"Unknown variant {self.variant!r}")
        if self.baseline_mode not in ("single", "hybrid"):
            raise ConfigError(f"Unknown baseline_mode {self.baseline_mode!r}")
        if self.baseline_mode == "hybrid" and self.variant not in ("DRAM", "MRAM"):
            raise ConfigError("hybrid baseline requires a two-layer variant (DRAM or MRAM)")
        if self.context_cnn and self.variant != "DRAM":
            raise ConfigError("context_cnn is only available for DRAM")
        if self.num_glimpses < 1:
            raise ConfigError("num_glimpses must be >= 1")
        if self.policy_sigma <= 0:
            raise ConfigError("policy_sigma must be positive")

    @property
    def num_layers(self) -> int:
        return 1 if self.variant == "RAM" else 2

    @property
    def policy_layer(self) -> int:
        """Index of the core whose state drives the location head."""
        return 1 if self.variant == "DRAM" else 0

    @property
    def action_layer(self) -> int:
        """Index of the core whose state feeds the classifier."""
        return {"RAM": 0, "MRAM": 1, "DRAM": 0}.get(self.variant, 0)

    def tag(self, include_scale: bool = False) -> str:
        """Human-readable cell name used in result tables."""
        if self.variant == "LENET":
            return "CNN(LeNet-5)"
        if self.variant == "RAM":
            name = "RAM"
        elif self.variant == "MRAM":
            name = "MRAM single baseline" if self.baseline_mode == "single" else "MRAM"
        else:
            name = "DRAM" if self.context_cnn else "DRAM without CNN"
            if self.baseline_mode == "hybrid":
                name = "DRAM with CNN and hybrid baseline" if self.context_cnn else "DRAM with hybrid baseline"
        name = f"{name}, {self.num_glimpses} glimpses"
        if include_scale:
            name = f"{name}, {self.glimpse_cfg.num_scales} scale"
        return name

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict) -> "ModelSpec":
        values = dict(values)
        values["glimpse_cfg"] = GlimpseConfig(**values.get("glimpse_cfg", {}))
        return cls(**values)

    @classmethod
    def from_run_config(cls, config: RunConfig) -> "ModelSpec":
        return cls(
            variant=config.variant,
            hidden=config.hidden,
            num_glimpses=config.num_glimpses,
            glimpse_cfg=GlimpseConfig(config.patch_size, config.num_scales, config.scale_factor),
            baseline_mode=config.baseline_mode,
            context_cnn=config.context_cnn,
            num_classes=config.num_classes,
            policy_sigma=config.policy_sigma,
            image_size=config.image_size,
            glimpse_hidden=config.glimpse_hidden,
            loc_hidden=config.loc_hidden,
            baseline_hidden=config.baseline_hidden,
        )


@dataclass
class StepOutput:
    """Everything one glimpse step produces (batched over the leading axis)."""

    next_loc_mean: np.ndarray
    sampled_loc: np.ndarray
    raw_sample: np.ndarray
    log_prob: np.ndarray
    baseline: np.ndarray
    states: List[LstmState]
    cache: dict = field(default_factory=dict, repr=False)


@dataclass
class Rollout:
    """A batch of T-step episodes with the caches needed for backward."""

    locations: np.ndarray        # (T, B, 2) where each glimpse was taken
    means: np.ndarray            # (T, B, 2)
    samples: np.ndarray          # (T, B, 2) pre-clamp draws
    log_probs: np.ndarray        # (T, B)
    baselines: np.ndarray        # (T, B)
    logits: np.ndarray           # (B, C) at t = T
    step_predictions: np.ndarray  # (T, B) argmax of the action head at every step
    steps: List[StepOutput] = field(default_factory=list, repr=False)
    action_cache: Optional[np.ndarray] = field(default=None, repr=False)
    context_cache: Optional[tuple] = field(default=None, repr=False)

    @property
    def predictions(self) -> np.ndarray:
        return self.logits.argmax(axis=-1)


class LocationHead:
    """Gaussian location policy with a tanh-bounded mean."""

    def __init__(self, hidden: int, sigma: float, rng: np.random.Generator, dtype=np.float32):
        self.sigma = sigma
        self.fc = Linear("location.fc", hidden, 2, rng, dtype)

    def parameters(self) -> Dict[str, Tensor]:
        return self.fc.parameters()

    def forward(self, h: np.ndarray, rng: Optional[np.random.Generator],
                raw: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, tuple]:
        """Returns (mean, clamped sample, raw sample, log_prob, cache).

        With ``rng`` None the policy is deterministic and samples its mean;
        a given ``raw`` draw is scored instead of sampling.
        """
        z, fc_cache = self.fc.forward(h)
        mean = np.tanh(z)
        if raw is not None:
            raw = np.asarray(raw, dtype=mean.dtype)
        elif rng is None:
            raw = mean.copy()
        else:
            raw = mean + self.sigma * rng.standard_normal(mean.shape).astype(mean.dtype)
        # density of the pre-clamp draw
        log_prob = (-0.5 * ((raw - mean) / self.sigma) ** 2 - np.log(self.sigma) - 0.5 * LOG_2PI).sum(axis=-1)
        sample = np.clip(raw, -1.0, 1.0)
        return mean, sample, raw, log_prob, (fc_cache, mean, raw)

    def backward(self, d_log_prob: np.ndarray, cache: tuple) -> np.ndarray:
        """Gradient of the log-density into the reading state; the draw is a constant."""
        fc_cache, mean, raw = cache
        d_mean = d_log_prob[:, None] * (raw - mean) / self.sigma ** 2
        return self.fc.backward(tanh_backward(d_mean, mean), fc_cache)


class SingleBaseline:
    """b_t = linear(h); ``h`` is a constant for the baseline loss."""

    def __init__(self, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.fc = Linear("baseline.fc", hidden, 1, rng, dtype)

    def parameters(self) -> Dict[str, Tensor]:
        return self.fc.parameters()

    def forward(self, states: List[np.ndarray], policy_layer: int) -> Tuple[np.ndarray, tuple]:
        out, cache = self.fc.forward(states[policy_layer])
        return out[:, 0], cache

    def backward(self, d_baseline: np.ndarray, cache: tuple):
        self.fc.backward(d_baseline[:, None], cache)


class HybridBaseline:
    """b_t = mlp([h1 || h2]); both states are constants for the baseline loss."""

    def __init__(self, hidden: int, baseline_hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear("baseline.fc1", 2 * hidden, baseline_hidden, rng, dtype)
        self.fc2 = Linear("baseline.fc2", baseline_hidden, 1, rng, dtype)

    def parameters(self) -> Dict[str, Tensor]:
        return {**self.fc1.parameters(), **self.fc2.parameters()}

    def forward(self, states: List[np.ndarray], policy_layer: int) -> Tuple[np.ndarray, tuple]:
        if len(states) != 2:
            raise ConfigError("hybrid baseline needs the states of both recurrent layers")
        fused = np.concatenate(states, axis=-1)
        a, c1 = self.fc1.forward(fused)
        out, c2 = self.fc2.forward(relu(a))
        return out[:, 0], (a, c1, c2)

    def backward(self, d_baseline: np.ndarray, cache: tuple):
        a, c1, c2 = cache
        da = self.fc2.backward(d_baseline[:, None], c2)
        self.fc1.backward(relu_backward(da, a), c1)


class ContextNetwork:
    """Small CNN over the whole image, at full resolution, that initialises DRAM's upper state."""

    def __init__(self, image_size: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.conv1 = Conv2d("context.conv1", 1, 16, 3, rng, padding=1, dtype=dtype)
        self.conv2 = Conv2d("context.conv2", 16, 32, 3, rng, padding=1, dtype=dtype)
        self.conv3 = Conv2d("context.conv3", 32, 64, 3, rng, padding=1, dtype=dtype)
        side = (image_size // 2) // 2
        self.fc = Linear("context.fc", 64 * side * side, hidden, rng, dtype)

    def parameters(self) -> Dict[str, Tensor]:
        params = {}
        for layer in (self.conv1, self.conv2, self.conv3, self.fc):
            params.update(layer.parameters())
        return params

    def forward(self, images: np.ndarray) -> Tuple[np.ndarray, tuple]:
        x = images[:, None, :, :].astype(self.fc.weight.values.dtype, copy=False)
        a1, c1 = self.conv1.forward(x)
        p1, pc1 = max_pool2d(relu(a1))
        a2, c2 = self.conv2.forward(p1)
        p2, pc2 = max_pool2d(relu(a2))
        a3, c3 = self.conv3.forward(p2)
        flat = relu(a3).reshape(len(images), -1)
        z, cf = self.fc.forward(flat)
        h0 = np.tanh(z)
        return h0, (a1, c1, pc1, a2, c2, pc2, a3, c3, cf, h0)

    def backward(self, d_h0: np.ndarray, cache: tuple):
        a1, c1, pc1, a2, c2, pc2, a3, c3, cf, h0 = cache
        d_flat = self.fc.backward(tanh_backward(d_h0, h0), cf)
        d_a3 = relu_backward(d_flat.reshape(a3.shape), a3)
        d_p2 = self.conv3.backward(d_a3, c3)
        d_a2 = relu_backward(max_pool2d_backward(d_p2, pc2), a2)
        d_p1 = self.conv2.backward(d_a2, c2)
        d_a1 = relu_backward(max_pool2d_backward(d_p1, pc1), a1)
        self.conv1.backward(d_a1, c1)


class RecurrentAttentionModel:
    """Glimpse sensor, one or two LSTM cores, location/action/baseline heads."""

    def __init__(self, spec: ModelSpec, seed: int = 1, dtype=np.float32):
        if spec.variant == "LENET":
            raise ConfigError("use LeNet5 for the LENET variant")
        self.spec = spec
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        hidden = spec.hidden

        self.glimpse = GlimpseNetwork(spec.glimpse_cfg, spec.glimpse_hidden, spec.loc_hidden, hidden, rng, dtype)
        self.cores = [LSTMCell("core1", hidden, hidden, rng, dtype)]
        if spec.num_layers == 2:
            self.cores.append(LSTMCell("core2", hidden, hidden, rng, dtype))
        self.location = LocationHead(hidden, spec.policy_sigma, rng, dtype)
        self.action = Linear("action.fc", hidden, spec.num_classes, rng, dtype)
        if spec.baseline_mode == "hybrid":
            self.baseline = HybridBaseline(hidden, spec.baseline_hidden, rng, dtype)
        else:
            self.baseline = SingleBaseline(hidden, rng, dtype)
        self.context = ContextNetwork(spec.image_size, hidden, rng, dtype) if spec.context_cnn else None

    # -- parameters --------------------------------------------------------

    def parameters(self) -> Dict[str, Tensor]:
        params = dict(self.glimpse.parameters())
        for core in self.cores:
            params.update(core.parameters())
        params.update(self.location.parameters())
        params.update(self.action.parameters())
        params.update(self.baseline.parameters())
        if self.context is not None:
            params.update(self.context.parameters())
        return params

    def param_count(self) -> int:
        return num_parameters(self.parameters())

    # -- forward -----------------------------------------------------------

    def initial_states(self, images: np.ndarray) -> Tuple[List[LstmState], Optional[tuple]]:
        batch = len(images)
        states = [core.initial_state(batch) for core in self.cores]
        context_cache = None
        if self.context is not None:
            h0, context_cache = self.context.forward(images)
            states[1] = LstmState(h0, np.zeros_like(h0))
        return states, context_cache

    def initial_location(self, batch: int, rng: Optional[np.random.Generator]) -> np.ndarray:
        """First glimpse: uniform over the image, or the centre without a generator."""
        if rng is None:
            return np.zeros((batch, 2), dtype=self.dtype)
        return rng.uniform(-1.0, 1.0, size=(batch, 2)).astype(self.dtype)

    def sense(self, images: np.ndarray, loc: np.ndarray) -> Tuple[np.ndarray, tuple]:
        """Retina plus glimpse network: G_t."""
        retina = build_retina_batch(images, loc, self.spec.glimpse_cfg)
        return self.glimpse.forward(retina, loc)

    def lower_step(self, glimpse: np.ndarray, state: LstmState) -> Tuple[LstmState, tuple]:
        return self.cores[0].forward(glimpse, state)

    def upper_step(self, lower_h: np.ndarray, state: LstmState) -> Tuple[LstmState, tuple]:
        return self.cores[1].forward(lower_h, state)

    def step(self, images: np.ndarray, loc: np.ndarray, states: List[LstmState],
             rng: Optional[np.random.Generator], raw: Optional[np.ndarray] = None) -> StepOutput:
        """One glimpse-integrate-act step for any variant."""
        glimpse, glimpse_cache = self.sense(images, loc)
        new_states = []
        core_caches = []
        state, cache = self.lower_step(glimpse, states[0])
        new_states.append(state)
        core_caches.append(cache)
        if self.spec.num_layers == 2:
            state, cache = self.upper_step(new_states[0].h, states[1])
            new_states.append(state)
            core_caches.append(cache)

        hs = [s.h for s in new_states]
        mean, sample, raw, log_prob, loc_cache = self.location.forward(hs[self.spec.policy_layer], rng, raw)
        baseline, baseline_cache = self.baseline.forward(hs, self.spec.policy_layer)
        return StepOutput(
            next_loc_mean=mean,
            sampled_loc=sample,
            raw_sample=raw,
            log_prob=log_prob,
            baseline=baseline,
            states=new_states,
            cache={"glimpse": glimpse_cache, "cores": core_caches,
                   "location": loc_cache, "baseline": baseline_cache},
        )

    def ram_step(self, images, loc, states, rng) -> StepOutput:
        if self.spec.variant != "RAM":
            raise ConfigError(f"ram_step called on {self.spec.variant}")
        return self.step(images, loc, states, rng)

    def dram_step(self, images, loc, states, rng) -> StepOutput:
        if self.spec.variant != "DRAM":
            raise ConfigError(f"dram_step called on {self.spec.variant}")
        return self.step(images, loc, states, rng)

    def mram_lower_step(self, images: np.ndarray, loc: np.ndarray, state: LstmState,
                        rng: Optional[np.random.Generator]) -> Tuple[LstmState, StepOutput]:
        """Lower MRAM layer: integrates the glimpse and samples the next location.

        Only H1 reaches the location head. The returned StepOutput has no
        baseline (that needs H2) and holds only the lower state.
        """
        if self.spec.variant != "MRAM":
            raise ConfigError(f"mram_lower_step called on {self.spec.variant}")
        glimpse, glimpse_cache = self.sense(images, loc)
        state, core_cache = self.lower_step(glimpse, state)
        mean, sample, raw, log_prob, loc_cache = self.location.forward(state.h, rng)
        partial = StepOutput(mean, sample, raw, log_prob, np.full(len(images), np.nan), [state],
                             {"glimpse": glimpse_cache, "cores": [core_cache], "location": loc_cache})
        return state, partial

    def mram_upper_step(self, lower_h: np.ndarray, state: LstmState) -> LstmState:
        """Upper MRAM layer: H2_t = LSTM(H1_t, H2_{t-1})."""
        if self.spec.variant != "MRAM":
            raise ConfigError(f"mram_upper_step called on {self.spec.variant}")
        state, _ = self.upper_step(lower_h, state)
        return state

    def classify(self, states: List[LstmState]) -> Tuple[np.ndarray, np.ndarray]:
        return self.action.forward(states[self.spec.action_layer].h)

    def rollout(self, images: np.ndarray, rng: Optional[np.random.Generator],
                num_glimpses: Optional[int] = None, replay: Optional[Rollout] = None) -> Rollout:
        """Run T glimpse steps on a batch of images.

        Args:
            images: (B, H, W)
            rng: generator for the initial location and policy draws; None
                gives the deterministic (mean) policy starting at the centre
            num_glimpses: overrides ``spec.num_glimpses``
            replay: earlier rollout whose locations and draws are reused, so
                the episode is a smooth function of the parameters

        Raises:
            NumericError: when an activation turns non-finite, naming the step
        """
        steps_total = len(replay.locations) if replay is not None else (num_glimpses or self.spec.num_glimpses)
        batch = len(images)
        images = images.astype(self.dtype, copy=False)
        states, context_cache = self.initial_states(images)
        loc = replay.locations[0] if replay is not None else self.initial_location(batch, rng)

        steps, locations, predictions = [], [], []
        for t in range(steps_total):
            locations.append(loc)
            out = self.step(images, loc, states, rng, None if replay is None else replay.samples[t])
            for k, s in enumerate(out.states):
                try:
                    check_finite(f"core{k + 1} hidden state", s.h)
                except NumericError as e:
                    raise NumericError(f"step {t}: {e}") from e
            step_logits, _ = self.classify(out.states)
            predictions.append(step_logits.argmax(axis=-1))
            steps.append(out)
            states = out.states
            loc = out.sampled_loc

        logits, action_cache = self.classify(states)
        check_finite(f"logits at step {steps_total - 1}", logits)
        return Rollout(
            locations=np.stack(locations),
            means=np.stack([s.next_loc_mean for s in steps]),
            samples=np.stack([s.raw_sample for s in steps]),
            log_probs=np.stack([s.log_prob for s in steps]),
            baselines=np.stack([s.baseline for s in steps]),
            logits=logits,
            step_predictions=np.stack(predictions),
            steps=steps,
            action_cache=action_cache,
            context_cache=context_cache,
        )

    # -- backward ----------------------------------------------------------

    def backward(self, rollout: Rollout, d_logits: np.ndarray, d_log_probs: np.ndarray,
                 d_baselines: np.ndarray):
        """Backpropagate through time, accumulating into every ``Tensor.grad``.

        Args:
            rollout: the forward record
            d_logits: dL/dlogits, (B, C)
            d_log_probs: dL/dlog_prob_t, (T, B); the draws are constants
            d_baselines: dL/db_t, (T, B); stops at the baseline head
        """
        spec = self.spec
        layers = spec.num_layers
        dh = [np.zeros_like(s.h) for s in rollout.steps[-1].states]
        dc = [np.zeros_like(s.c) for s in rollout.steps[-1].states]

        dh[spec.action_layer] = dh[spec.action_layer] + self.action.backward(d_logits, rollout.action_cache)

        for t in reversed(range(len(rollout.steps))):
            cache = rollout.steps[t].cache
            dh[spec.policy_layer] = dh[spec.policy_layer] + self.location.backward(d_log_probs[t], cache["location"])
            self.baseline.backward(d_baselines[t], cache["baseline"])

            if layers == 2:
                dx, dh[1], dc[1] = self.cores[1].backward(dh[1], dc[1], cache["cores"][1])
                dh[0] = dh[0] + dx
            d_glimpse, dh[0], dc[0] = self.cores[0].backward(dh[0], dc[0], cache["cores"][0])
            self.glimpse.backward(d_glimpse, cache["glimpse"])

        if self.context is not None:
            # the upper cell state starts at a constant zero
            self.context.backward(dh[1], rollout.context_cache)


class LeNet5:
    """Classic conv-pool-conv-pool-dense-dense-dense classifier.

    Inputs smaller than 32x32 are zero-padded up to 32x32.
    """

    INPUT_SIZE = 32

    def __init__(self, num_classes: int = 10, image_size: int = 28, seed: int = 1, dtype=np.float32):
        self.spec = ModelSpec(variant="LENET", num_classes=num_classes, image_size=image_size)
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.pad = max(0, (self.INPUT_SIZE - image_size) // 2)
        side = image_size + 2 * self.pad
        side = ((side - 4) // 2 - 4) // 2
        self.conv1 = Conv2d("lenet.conv1", 1, 6, 5, rng, dtype=dtype)
        self.conv2 = Conv2d("lenet.conv2", 6, 16, 5, rng, dtype=dtype)
        self.fc1 = Linear("lenet.fc1", 16 * side * side, 120, rng, dtype)
        self.fc2 = Linear("lenet.fc2", 120, 84, rng, dtype)
        self.fc3 = Linear("lenet.fc3", 84, num_classes, rng, dtype)

    def parameters(self) -> Dict[str, Tensor]:
        params = {}
        for layer in (self.conv1, self.conv2, self.fc1, self.fc2, self.fc3):
            params.update(layer.parameters())
        return params

    def param_count(self) -> int:
        return num_parameters(self.parameters())

    def forward(self, images: np.ndarray) -> Tuple[np.ndarray, tuple]:
        x = images.astype(self.dtype, copy=False)[:, None, :, :]
        if self.pad:
            x = np.pad(x, ((0, 0), (0, 0), (self.pad, self.pad), (self.pad, self.pad)))
        a1, c1 = self.conv1.forward(x)
        p1, pc1 = max_pool2d(relu(a1))
        a2, c2 = self.conv2.forward(p1)
        p2, pc2 = max_pool2d(relu(a2))
        flat = p2.reshape(len(images), -1)
        z1, f1 = self.fc1.forward(flat)
        z2, f2 = self.fc2.forward(relu(z1))
        logits, f3 = self.fc3.forward(relu(z2))
        check_finite("lenet logits", logits)
        return logits, (a1, c1, pc1, a2, c2, pc2, p2.shape, z1, f1, z2, f2, f3)

    def backward(self, d_logits: np.ndarray, cache: tuple):
        a1, c1, pc1, a2, c2, pc2, p2_shape, z1, f1, z2, f2, f3 = cache
        d = self.fc3.backward(d_logits, f3)
        d = self.fc2.backward(relu_backward(d, z2), f2)
        d = self.fc1.backward(relu_backward(d, z1), f1)
        d = relu_backward(max_pool2d_backward(d.reshape(p2_shape), pc2), a2)
        d = self.conv2.backward(d, c2)
        d = relu_backward(max_pool2d_backward(d, pc1), a1)
        self.conv1.backward(d, c1)


Model = Union[RecurrentAttentionModel, LeNet5]


def build_model(spec: ModelSpec, seed: int = 1, dtype=np.float32) -> Model:
    if spec.variant == "LENET":
        return LeNet5(spec.num_classes, spec.image_size, seed, dtype)
    return RecurrentAttentionModel(spec, seed, dtype)


def param_count(spec: ModelSpec) -> int:
    """Exact number of scalars across all parameter groups of ``spec``."""
    return build_model(spec).param_count()


def location_policy(h: np.ndarray, head: LocationHead,
                    rng: Optional[np.random.Generator]) -> Tuple[Location, Location, float]:
    """Single-state location policy: (mean, clamped sample, log_prob)."""
    mean, sample, _, log_prob, _ = head.forward(np.asarray(h)[None, :], rng)
    return Location(*mean[0]), Location(*sample[0]), float(log_prob[0])


def parameter_groups(params: Dict[str, Tensor]) -> Dict[str, int]:
    """Parameter count per group prefix ("glimpse", "core1", ...)."""
    groups: Dict[str, int] = {}
    for name, tensor in params.items():
        group = name.split(".", 1)[0]
        groups[group] = groups.get(group, 0) + tensor.size
    return groups


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: Path, model: Model, adam: Optional[AdamState] = None,
                    extra: Optional[Dict] = None) -> Path:
    """Write parameters, optimizer state and the model spec to one ``.npz``.

    Layout: ``param/<name>``, ``adam_m/<name>``, ``adam_v/<name>`` arrays plus a
    ``meta`` JSON string {format_version, model_spec, adam, extra}.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{name}": t.values for name, t in model.parameters().items()}
    adam_meta = None
    if adam is not None:
        adam_meta = {"step": adam.step, "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps}
        arrays.update({f"adam_m/{name}": m for name, m in adam.m.items()})
        arrays.update({f"adam_v/{name}": v for name, v in adam.v.items()})
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_spec": model.spec.to_dict(),
        "dtype": np.dtype(model.dtype).name,
        "adam": adam_meta,
        "extra": extra or {},
    }
    arrays["meta"] = np.array(json.dumps(meta))
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    logger.info(f"Saved checkpoint {path} ({len(arrays) - 1} arrays)")
    return path


def load_checkpoint(path: Path) -> Tuple[Model, Optional[AdamState], Dict]:
    """Rebuild the model (and optimizer state) stored by ``save_checkpoint``.

    Returns:
        Tuple of (model, adam state or None, extra metadata)
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive["meta"]))
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"Unsupported checkpoint format {meta.get('format_version')} in {path}")
        spec = ModelSpec.from_dict(meta["model_spec"])
        model = build_model(spec, dtype=np.dtype(meta.get("dtype", "float32")))
        params = model.parameters()
        for name, tensor in params.items():
            key = f"param/{name}"
            if key not in archive:
                raise ValueError(f"Checkpoint {path} lacks parameter {name}")
            stored = archive[key]
            if stored.shape != tensor.shape:
                raise ValueError(f"Checkpoint {path}: {name} has shape {stored.shape}, expected {tensor.shape}")
            tensor.values[...] = stored

        adam = None
        if meta.get("adam"):
            a = meta["adam"]
            adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"])
            for name in params:
                if f"adam_m/{name}" in archive:
                    adam.m[name] = archive[f"adam_m/{name}"].copy()
                    adam.v[name] = archive[f"adam_v/{name}"].copy()
    logger.info(f"Loaded checkpoint {path} ({spec.tag()})")
    return model, adam, meta.get("extra", {})
