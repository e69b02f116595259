"""Spiking network building blocks.

Time is laid out along the batch axis: a batch of ``b`` samples over
``T`` steps travels as one array of ``T*b`` rows, with step ``t``
occupying rows ``[t*b, (t+1)*b)``. Convolutions and normalisation then
process every step in a single BLAS call; only the leaky integrate and
fire neuron, whose membrane couples consecutive steps, walks the blocks
one at a time.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import DiffTensor
from .errors import ContractError, ShapeError, ValidationError


@dataclass(frozen=True)
class LIFParams:
    """Neuron constants: threshold, membrane decay, reset level, and the
    width of the rectangular surrogate window used in backward."""

    v_theta: float = 0.2
    decay: float = 0.25
    v_reset: float = 0.0
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValidationError(f"decay must lie in (0, 1), got {self.decay}")
        if self.v_theta <= 0.0:
            raise ValidationError(f"v_theta must be positive, got {self.v_theta}")
        if self.alpha <= 0.0:
            raise ValidationError(f"alpha must be positive, got {self.alpha}")
        if self.v_reset >= self.v_theta:
            raise ValidationError(
                f"v_reset ({self.v_reset}) must lie below v_theta ({self.v_theta})"
            )


@dataclass
class LIFState:
    """Carried membrane potential (after reset) and the pre-reset
    membrane of the most recent step."""

    v: DiffTensor
    m: DiffTensor | None = None


def lif_init(shape) -> LIFState:
    return LIFState(v=engine.zeros(shape))


def lif_step(current: DiffTensor, state: LIFState, params: LIFParams) -> tuple[DiffTensor, LIFState]:
    """Advance one step: decay the membrane, integrate the input, fire
    wherever the membrane reaches threshold, and hard-reset those units.

    The reset multiplies the membrane by (1 - spike), so a unit that
    fired holds exactly ``v_reset`` afterwards regardless of overshoot.
    """
    if current.shape != state.v.shape:
        raise ShapeError(f"input shape {current.shape} does not match state shape {state.v.shape}")
    m = engine.add(engine.smul(state.v, params.decay), current)
    s = engine.spike_threshold(m, params.v_theta, params.alpha)
    v = engine.mul(m, engine.sadd(engine.neg(s), 1.0))
    if params.v_reset != 0.0:
        v = engine.add(v, engine.smul(s, params.v_reset))
    return s, LIFState(v=v, m=m)


def lif_run(stacked: DiffTensor, steps: int, params: LIFParams) -> DiffTensor:
    """Apply the neuron over a time-stacked input, returning stacked spikes."""
    n = stacked.shape[0]
    if steps < 1 or n % steps != 0:
        raise ShapeError(f"axis 0 of {stacked.shape} is not divisible by steps={steps}")
    b = n // steps
    state = lif_init((b,) + stacked.shape[1:])
    outs = []
    for t in range(steps):
        cur = engine.slice0(stacked, t * b, (t + 1) * b)
        s, state = lif_step(cur, state, params)
        outs.append(s)
    out = engine.concat0(outs)
    if _rate_capture is not None:
        _rate_capture.add(float(out.data.mean()), out.size)
    return out


@dataclass
class RateCapture:
    """Size-weighted spike-rate samples collected during forward passes."""

    entries: list[tuple[float, int]] = field(default_factory=list)

    def add(self, mean_rate: float, count: int) -> None:
        self.entries.append((mean_rate, count))

    def overall(self) -> float:
        total = sum(c for _, c in self.entries)
        if total == 0:
            return 0.0
        return sum(r * c for r, c in self.entries) / total


_rate_capture: RateCapture | None = None


@contextmanager
def capture_rates():
    """Collect the mean firing rate of every neuron layer evaluated
    inside the block (used by the energy accounting)."""
    global _rate_capture
    prev = _rate_capture
    cap = RateCapture()
    _rate_capture = cap
    try:
        yield cap
    finally:
        _rate_capture = prev


class TdBN:
    """Batch normalisation with statistics pooled over batch and time.

    Because time steps are stacked along axis 0, pooling over batch and
    time is simply pooling over every axis except the channel axis. The
    scale is initialised to the firing threshold so that post-norm
    activations sit at the scale the neuron expects. Running statistics
    use the same biased variance as training mode, so a converged
    running estimate reproduces train-mode outputs exactly.
    """

    def __init__(self, channels: int, v_theta: float = 0.2, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = engine.param(np.full(channels, v_theta, dtype=np.float32))
        self.beta = engine.param(np.zeros(channels, dtype=np.float32))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.initialized = False
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.channels = channels

    def _chan_shape(self, ndim: int) -> tuple[int, ...]:
        return (1, self.channels) + (1,) * (ndim - 2)

    def __call__(self, x: DiffTensor, train: bool, update_stats: bool | None = None) -> DiffTensor:
        if x.ndim not in (2, 4) or x.shape[1] != self.channels:
            raise ShapeError(
                f"normalising {x.shape} with channel count {self.channels}"
            )
        if update_stats is None:
            update_stats = train
        axes = tuple(i for i in range(x.ndim) if i != 1)
        cshape = self._chan_shape(x.ndim)
        xd = x.data
        if train:
            mean = xd.mean(axis=axes, dtype=np.float32)
            var = xd.var(axis=axes, dtype=np.float32)
            if update_stats:
                mom = np.float32(self.momentum)
                if not self.initialized:
                    self.running_mean = mean.copy()
                    self.running_var = var.copy()
                    self.initialized = True
                else:
                    self.running_mean = (1 - mom) * self.running_mean + mom * mean
                    self.running_var = (1 - mom) * self.running_var + mom * var
        else:
            if not self.initialized:
                raise ContractError(
                    "normalisation layer used in eval mode before any training step "
                    "populated its running statistics"
                )
            mean = self.running_mean
            var = self.running_var

        inv = np.float32(1.0) / np.sqrt(var + np.float32(self.eps))
        xhat = (xd - mean.reshape(cshape)) * inv.reshape(cshape)
        out = self.gamma.data.reshape(cshape) * xhat + self.beta.data.reshape(cshape)

        gamma, beta = self.gamma, self.beta
        count = xd.size // self.channels

        def bwd(g):
            dbeta = g.sum(axis=axes, dtype=np.float32)
            dgamma = (g * xhat).sum(axis=axes, dtype=np.float32)
            dx = None
            if x.requires_grad:
                dxhat = g * gamma.data.reshape(cshape)
                if train:
                    # Differentiate through the batch statistics as well.
                    s1 = dxhat.sum(axis=axes, dtype=np.float32).reshape(cshape)
                    s2 = (dxhat * xhat).sum(axis=axes, dtype=np.float32).reshape(cshape)
                    dx = (dxhat - s1 / count - xhat * s2 / count) * inv.reshape(cshape)
                else:
                    dx = dxhat * inv.reshape(cshape)
                dx = dx.astype(np.float32)
            return (dx, dgamma, dbeta)

        return engine.record_op(out.astype(np.float32), (x, gamma, beta), bwd)

    def params(self) -> dict[str, DiffTensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def load_state(self, mean: np.ndarray, var: np.ndarray) -> None:
        if mean.shape != (self.channels,) or var.shape != (self.channels,):
            raise ShapeError(
                f"running statistics shapes {mean.shape}/{var.shape} do not match "
                f"channel count {self.channels}"
            )
        self.running_mean = mean.astype(np.float32).copy()
        self.running_var = var.astype(np.float32).copy()
        self.initialized = True


class Conv2d:
    def __init__(self, c_in: int, c_out: int, stride: int, pad: int,
                 rng: np.random.Generator, k: int = 3):
        fan_in = c_in * k * k
        std = np.sqrt(2.0 / fan_in)
        self.kern = engine.param(rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(np.float32))
        self.bias = engine.param(np.zeros(c_out, dtype=np.float32))
        self.stride = stride
        self.pad = pad

    def __call__(self, x: DiffTensor) -> DiffTensor:
        return engine.bias_add(engine.conv2d(x, self.kern, self.stride, self.pad), self.bias)

    def params(self) -> dict[str, DiffTensor]:
        return {"kern": self.kern, "bias": self.bias}


class ConvTranspose2d:
    def __init__(self, c_in: int, c_out: int, stride: int, pad: int,
                 rng: np.random.Generator, k: int = 3):
        # Kernel layout mirrors the forward conv it transposes:
        # axis 0 is this layer's input channels.
        fan_in = c_in * k * k
        std = np.sqrt(2.0 / fan_in)
        self.kern = engine.param(rng.normal(0.0, std, size=(c_in, c_out, k, k)).astype(np.float32))
        self.bias = engine.param(np.zeros(c_out, dtype=np.float32))
        self.stride = stride
        self.pad = pad

    def __call__(self, x: DiffTensor, out_size: tuple[int, int] | None = None) -> DiffTensor:
        y = engine.conv2d_transpose(x, self.kern, self.stride, self.pad, out_size=out_size)
        return engine.bias_add(y, self.bias)

    def params(self) -> dict[str, DiffTensor]:
        return {"kern": self.kern, "bias": self.bias}


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        std = np.sqrt(2.0 / d_in)
        self.weight = engine.param(rng.normal(0.0, std, size=(d_in, d_out)).astype(np.float32))
        self.bias = engine.param(np.zeros(d_out, dtype=np.float32))

    def __call__(self, x: DiffTensor) -> DiffTensor:
        return engine.bias_add(engine.matmul(x, self.weight), self.bias)

    def params(self) -> dict[str, DiffTensor]:
        return {"weight": self.weight, "bias": self.bias}


def encode_input(images: DiffTensor, steps: int) -> DiffTensor:
    """Direct input coding: present the image as an identical injected
    current at every time step. Pixel values must already be in [0, 1]."""
    lo = float(images.data.min(initial=0.0))
    hi = float(images.data.max(initial=0.0))
    if lo < 0.0 or hi > 1.0:
        raise ValidationError(f"input pixels must lie in [0, 1], got range [{lo}, {hi}]")
    return engine.tile_time(images, steps)


def decode_output(stacked: DiffTensor, steps: int) -> DiffTensor:
    """Non-spiking readout: average the final layer's currents over time
    and squash to [0, 1] with a sigmoid."""
    return engine.sigmoid(engine.time_mean(stacked, steps))
