"""Minimal differentiable network substrate.

Every layer is a forward function that returns its output plus a cache, and a
matching backward function that turns an upstream gradient and the cache into
input gradients and parameter gradients. Parameters live in ``Tensor`` objects
that carry their own gradient slot; activations are plain numpy arrays.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, "Tensor"]


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class NumericError(ArithmeticError):
    """A NaN or Inf appeared in activations or gradients."""


@dataclass(eq=False)
class Tensor:
    """A parameter array with an attached gradient slot."""

    values: np.ndarray
    grad: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.grad is not None and self.grad.shape != self.values.shape:
            raise DimensionError(
                f"grad shape {list(self.grad.shape)} does not match values {list(self.values.shape)}"
            )

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)

    def zero_grad(self):
        self.grad = np.zeros_like(self.values)

    def accumulate(self, grad: np.ndarray):
        """Add ``grad`` into the gradient slot."""
        if grad.shape != self.values.shape:
            raise DimensionError(
                f"gradient shape {list(grad.shape)} does not match parameter {list(self.values.shape)}"
            )
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.values.dtype)
        else:
            self.grad += grad


@dataclass
class LstmState:
    """Hidden and cell state of one LSTM layer, shape (..., hidden)."""

    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, batch: int, hidden: int, dtype=np.float32) -> "LstmState":
        return cls(np.zeros((batch, hidden), dtype=dtype), np.zeros((batch, hidden), dtype=dtype))


@dataclass
class AdamState:
    """Moment accumulators and hyperparameters of the Adam optimizer."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def _values(x: ArrayLike) -> np.ndarray:
    return x.values if isinstance(x, Tensor) else np.asarray(x)


def uniform_init(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype=np.float32) -> np.ndarray:
    """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def check_finite(name: str, array: np.ndarray):
    """Raise NumericError naming ``name`` if ``array`` holds NaN/Inf."""
    if not np.all(np.isfinite(array)):
        n_nan = int(np.isnan(array).sum())
        n_inf = int(np.isinf(array).sum())
        raise NumericError(f"{name}: {n_nan} NaN and {n_inf} Inf entries (shape {list(array.shape)})")


# ---------------------------------------------------------------------------
# Dense layer
# ---------------------------------------------------------------------------

def linear(x: ArrayLike, weights: ArrayLike, bias: ArrayLike) -> np.ndarray:
    """Affine map ``weights @ x + bias`` over the last axis of ``x``.

    Args:
        x: input of shape (..., in)
        weights: matrix of shape (out, in)
        bias: vector of shape (out,)

    Returns:
        Array of shape (..., out)

    Raises:
        DimensionError: when the operands do not conform
    """
    x, w, b = _values(x), _values(weights), _values(bias)
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise DimensionError(
            f"linear: input width {x.shape[-1]} does not match weights {list(w.shape)}"
        )
    if b.shape != (w.shape[0],):
        raise DimensionError(f"linear: bias {list(b.shape)} does not match weights {list(w.shape)}")
    return x @ w.T + b


def linear_backward(dout: np.ndarray, x: np.ndarray, weights: ArrayLike) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of ``linear`` with respect to input, weights and bias."""
    w = _values(weights)
    dx = dout @ w
    flat_dout = dout.reshape(-1, dout.shape[-1])
    flat_x = x.reshape(-1, x.shape[-1])
    dw = flat_dout.T @ flat_x
    db = flat_dout.sum(axis=0)
    return dx, dw, db


class Linear:
    """Dense layer owning its weight and bias tensors."""

    def __init__(self, name: str, in_features: int, out_features: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(uniform_init(rng, (out_features, in_features), in_features, dtype))
        self.bias = Tensor(np.zeros(out_features, dtype=dtype))

    def parameters(self) -> Dict[str, Tensor]:
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return linear(x, self.weight, self.bias), x

    def backward(self, dout: np.ndarray, cache: np.ndarray) -> np.ndarray:
        dx, dw, db = linear_backward(dout, cache, self.weight)
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        return dx


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient 0 at the kink
    return dout * (x > 0)


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(dout: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Backward of tanh given its output ``y``."""
    return dout * (1 - y * y)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1 + np.tanh(0.5 * x))


def sigmoid_backward(dout: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Backward of sigmoid given its output ``y``."""
    return dout * y * (1 - y)


# ---------------------------------------------------------------------------
# Classification losses
# ---------------------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stabilised log-softmax over the last axis.

    Raises:
        DimensionError: when there are fewer than two classes
    """
    logits = np.asarray(logits)
    if logits.shape[-1] < 2:
        raise DimensionError(f"log_softmax needs at least 2 classes, got {logits.shape[-1]}")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logits: np.ndarray, labels) -> Tuple[float, np.ndarray]:
    """Mean negative log-likelihood of ``labels`` and its gradient.

    Args:
        logits: (C,) for a single example or (B, C) for a batch
        labels: class index, or (B,) integer array

    Returns:
        Tuple of (loss, dlogits); for a batch the loss is the batch mean and
        dlogits is already divided by B.

    Raises:
        IndexError: when a label is outside [0, C)
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    logits2d = logits[None, :] if single else logits
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    num_classes = logits2d.shape[-1]
    if labels.shape[0] != logits2d.shape[0]:
        raise DimensionError(f"cross_entropy: {labels.shape[0]} labels for {logits2d.shape[0]} rows")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise IndexError(f"label out of range [0, {num_classes}): {labels[(labels < 0) | (labels >= num_classes)][:5]}")

    logp = log_softmax(logits2d)
    batch = logits2d.shape[0]
    rows = np.arange(batch)
    loss = float(-logp[rows, labels].mean())
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1
    dlogits /= batch
    return loss, (dlogits[0] if single else dlogits)


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

def lstm_step(x: np.ndarray, state: LstmState, w_x: ArrayLike, w_h: ArrayLike,
              bias: ArrayLike) -> Tuple[LstmState, tuple]:
    """One LSTM cell step; gate blocks are ordered i, f, o, g.

    Args:
        x: input (..., in)
        state: previous state with h, c of shape (..., hidden)
        w_x: input weights (4*hidden, in)
        w_h: recurrent weights (4*hidden, hidden)
        bias: (4*hidden,)

    Returns:
        Tuple of (new state, cache for ``lstm_step_backward``)
    """
    w_x, w_h, bias = _values(w_x), _values(w_h), _values(bias)
    hidden = state.h.shape[-1]
    if w_x.shape != (4 * hidden, x.shape[-1]):
        raise DimensionError(
            f"lstm_step: input width {x.shape[-1]} / hidden {hidden} do not match w_x {list(w_x.shape)}"
        )
    if w_h.shape != (4 * hidden, hidden) or state.c.shape != state.h.shape:
        raise DimensionError(f"lstm_step: state {list(state.h.shape)} does not match w_h {list(w_h.shape)}")

    a = x @ w_x.T + state.h @ w_h.T + bias
    i = sigmoid(a[..., :hidden])
    f = sigmoid(a[..., hidden:2 * hidden])
    o = sigmoid(a[..., 2 * hidden:3 * hidden])
    g = np.tanh(a[..., 3 * hidden:])
    c = f * state.c + i * g
    tc = np.tanh(c)
    h = o * tc
    cache = (x, state.h, state.c, i, f, o, g, tc)
    return LstmState(h, c), cache


def lstm_step_backward(dh: np.ndarray, dc: np.ndarray, cache: tuple, w_x: ArrayLike,
                       w_h: ArrayLike) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Backward of ``lstm_step``.

    Returns:
        Tuple of (dx, dh_prev, dc_prev, dw_x, dw_h, dbias)
    """
    x, h_prev, c_prev, i, f, o, g, tc = cache
    do = dh * tc
    dc_total = dc + dh * o * (1 - tc * tc)
    di = dc_total * g
    df = dc_total * c_prev
    dg = dc_total * i
    dc_prev = dc_total * f

    da = np.concatenate([
        di * i * (1 - i),
        df * f * (1 - f),
        do * o * (1 - o),
        dg * (1 - g * g),
    ], axis=-1)

    w_x, w_h = _values(w_x), _values(w_h)
    dx = da @ w_x
    dh_prev = da @ w_h
    flat_da = da.reshape(-1, da.shape[-1])
    dw_x = flat_da.T @ x.reshape(-1, x.shape[-1])
    dw_h = flat_da.T @ h_prev.reshape(-1, h_prev.shape[-1])
    dbias = flat_da.sum(axis=0)
    return dx, dh_prev, dc_prev, dw_x, dw_h, dbias


class LSTMCell:
    """LSTM layer parameters plus step/backward bookkeeping."""

    def __init__(self, name: str, input_size: int, hidden_size: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.name = name
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.w_x = Tensor(uniform_init(rng, (4 * hidden_size, input_size), input_size, dtype))
        self.w_h = Tensor(uniform_init(rng, (4 * hidden_size, hidden_size), hidden_size, dtype))
        bias = np.zeros(4 * hidden_size, dtype=dtype)
        bias[hidden_size:2 * hidden_size] = 1.0  # forget gate
        self.bias = Tensor(bias)

    def parameters(self) -> Dict[str, Tensor]:
        return {f"{self.name}.w_x": self.w_x, f"{self.name}.w_h": self.w_h, f"{self.name}.bias": self.bias}

    def initial_state(self, batch: int) -> LstmState:
        return LstmState.zeros(batch, self.hidden_size, self.w_x.values.dtype)

    def forward(self, x: np.ndarray, state: LstmState) -> Tuple[LstmState, tuple]:
        return lstm_step(x, state, self.w_x, self.w_h, self.bias)

    def backward(self, dh: np.ndarray, dc: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        dx, dh_prev, dc_prev, dw_x, dw_h, dbias = lstm_step_backward(dh, dc, cache, self.w_x, self.w_h)
        self.w_x.accumulate(dw_x)
        self.w_h.accumulate(dw_h)
        self.bias.accumulate(dbias)
        return dx, dh_prev, dc_prev


# ---------------------------------------------------------------------------
# Convolution and pooling (LeNet-5 and the DRAM context network)
# ---------------------------------------------------------------------------

def conv2d(x: np.ndarray, weights: ArrayLike, bias: ArrayLike, padding: int = 0) -> np.ndarray:
    """Stride-1 cross-correlation.

    Args:
        x: (B, C, H, W)
        weights: (F, C, k, k)
        bias: (F,)
        padding: zero padding on every side

    Returns:
        (B, F, H + 2p - k + 1, W + 2p - k + 1)
    """
    w, b = _values(weights), _values(bias)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {list(x.shape)} does not match weights {list(w.shape)}")
    k = w.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    if xp.shape[2] < k or xp.shape[3] < k:
        raise DimensionError(f"conv2d: kernel {k} larger than padded input {list(xp.shape[2:])}")
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2) + b[None, :, None, None]


def conv2d_backward(dout: np.ndarray, x: np.ndarray, weights: ArrayLike,
                    padding: int = 0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of ``conv2d`` with respect to input, weights and bias."""
    w = _values(weights)
    k = w.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))
    dw = np.tensordot(dout, windows, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))

    # full correlation of dout with the flipped kernel
    dpad = np.pad(dout, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    dwindows = sliding_window_view(dpad, (k, k), axis=(2, 3))
    dxp = np.tensordot(dwindows, w[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp, dw, db


class Conv2d:
    """Square-kernel convolution layer."""

    def __init__(self, name: str, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, padding: int = 0, dtype=np.float32):
        self.name = name
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Tensor(uniform_init(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, dtype))
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype))

    def parameters(self) -> Dict[str, Tensor]:
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return conv2d(x, self.weight, self.bias, self.padding), x

    def backward(self, dout: np.ndarray, cache: np.ndarray) -> np.ndarray:
        dx, dw, db = conv2d_backward(dout, cache, self.weight, self.padding)
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        return dx


def max_pool2d(x: np.ndarray) -> Tuple[np.ndarray, tuple]:
    """2x2 stride-2 max pooling; odd trailing rows/columns are dropped."""
    batch, channels, height, width = x.shape
    ho, wo = height // 2, width // 2
    blocks = x[:, :, :2 * ho, :2 * wo].reshape(batch, channels, ho, 2, wo, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(batch, channels, ho, wo, 4)
    argmax = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    return out, (x.shape, argmax)


def max_pool2d_backward(dout: np.ndarray, cache: tuple) -> np.ndarray:
    shape, argmax = cache
    batch, channels, height, width = shape
    ho, wo = argmax.shape[2], argmax.shape[3]
    dblocks = np.zeros(argmax.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(dblocks, argmax[..., None], dout[..., None], axis=-1)
    dblocks = dblocks.reshape(batch, channels, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[:, :, :2 * ho, :2 * wo] = dblocks.reshape(batch, channels, 2 * ho, 2 * wo)
    return dx


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------

def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``.

    Returns:
        The global norm before clipping
    """
    total = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                              for p in params.values() if p.grad is not None)))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total


def adam_update(params: Mapping[str, Tensor], state: AdamState,
                grads: Optional[Mapping[str, np.ndarray]] = None) -> AdamState:
    """Apply one bias-corrected Adam step in place.

    Args:
        params: named parameter tensors (updated in place)
        state: optimizer state (updated in place and returned)
        grads: gradients by name; defaults to each tensor's ``grad``

    Raises:
        NumericError: if any gradient is non-finite; nothing is updated
    """
    if grads is None:
        grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.values)) for name, p in params.items()}
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise DimensionError(f"adam_update: gradient {name} {list(g.shape)} vs parameter {list(params[name].shape)}")
        check_finite(f"gradient {name} at step {state.step + 1}", g)

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.values -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.values.dtype)
    return state


class Adam:
    """Adam over a fixed parameter dictionary."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float):
        self.state.lr = value

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        adam_update(self.params, self.state)


def num_parameters(params: Mapping[str, Tensor]) -> int:
    return int(sum(p.size for p in params.values()))


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def grad_check(fn: Callable[[bool], float], params: Mapping[str, Tensor], step: float = 1e-5,
               max_entries: Optional[int] = None, rng: Optional[np.random.Generator] = None,
               floor: float = 1e-6) -> float:
    """Compare analytic gradients against central finite differences.

    ``fn(backward)`` must return the scalar loss and, when ``backward`` is
    true, accumulate the analytic gradients into every tensor in ``params``.

    Args:
        fn: deterministic scalar function of the parameter values
        params: tensors to check (perturbed in place, restored afterwards)
        step: finite-difference step
        max_entries: check at most this many random entries per tensor
        rng: generator used to choose the entries
        floor: lower bound of the relative-error denominator

    Returns:
        Maximum relative error |a - n| / max(|a| + |n|, floor) over all
        checked entries
    """
    for p in params.values():
        p.zero_grad()
    fn(True)
    analytic = {name: p.grad.copy() for name, p in params.items()}
    rng = rng if rng is not None else np.random.default_rng(0)

    worst = 0.0
    worst_name = None
    for name, p in params.items():
        flat = p.values.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = rng.choice(flat.size, size=max_entries, replace=False)
        for idx in indices:
            old = flat[idx]
            flat[idx] = old + step
            f_plus = fn(False)
            flat[idx] = old - step
            f_minus = fn(False)
            flat[idx] = old
            numeric = (f_plus - f_minus) / (2 * step)
            a = analytic[name].reshape(-1)[idx]
            err = abs(a - numeric) / max(abs(a) + abs(numeric), floor)
            if err > worst:
                worst, worst_name = err, name
    logger.debug(f"grad_check max relative error {worst:.3e} ({worst_name})")
    return float(worst)
