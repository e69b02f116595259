"""Firing-rate latent space: rate extraction, reparameterised spike
sampling, the learned prior, and spike-train perturbations.

The latent code of this model is a binary spike train of shape
(batch, d, T). Its distribution is summarised by per-neuron firing
rates; sampling draws each step as an independent Bernoulli(rate) event
by comparing the rate against cached uniform variates. The comparison
has no derivative, so backward substitutes a rectangular window around
the rate (same recipe as the neuron threshold), which in expectation
recovers d(count)/d(rate) = T.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import DiffTensor
from .errors import ContractError, ShapeError, ValidationError
from .layers import Linear


@dataclass(frozen=True)
class SamplerDraw:
    """Uniform variates backing one sampling pass, plus the seed that
    produced them. Keeping the pair together lets a backward pass verify
    it is replaying the same noise the forward saw."""

    u: np.ndarray
    seed: int | None = None


def make_draw(batch: int, d: int, steps: int, seed: int) -> SamplerDraw:
    rng = np.random.Generator(np.random.Philox(key=seed))
    u = rng.random((batch, d, steps), dtype=np.float32)
    return SamplerDraw(u=u, seed=seed)


def _check_binary(bits: np.ndarray, what: str) -> None:
    if bits.size and not np.all((bits == 0) | (bits == 1)):
        raise ValidationError(f"{what} must be binary (0/1 entries)")


def firing_rate(spikes: DiffTensor) -> DiffTensor:
    """Per-neuron fraction of active steps: (b, d, T) -> (b, d).

    Rates of a T-step train are by construction multiples of 1/T.
    """
    if spikes.ndim != 3:
        raise ShapeError(f"spike train must be (batch, d, T), got {spikes.shape}")
    _check_binary(spikes.data, "spike train")
    return engine.mean_axis(spikes, axis=2)


def sample_spikes(rates: DiffTensor, steps: int, draw: SamplerDraw, alpha: float = 0.5) -> DiffTensor:
    """Draw a spike train whose per-step events fire with the given rates.

    Forward: z[i, t] = 1 where u[i, t] < r[i]. The count over T steps is
    therefore exactly Binomial(T, r). Backward routes the upstream
    gradient through the rectangular surrogate window of width ``alpha``
    so the rates (and whatever produced them) receive a gradient despite
    the hard comparison.
    """
    if rates.ndim != 2:
        raise ShapeError(f"rates must be (batch, d), got {rates.shape}")
    lo, hi = float(rates.data.min(initial=0.0)), float(rates.data.max(initial=0.0))
    if lo < 0.0 or hi > 1.0:
        raise ValidationError(f"rates must lie in [0, 1], got range [{lo}, {hi}]")
    expect = rates.shape + (steps,)
    if draw.u.shape != expect:
        raise ShapeError(f"draw shape {draw.u.shape} does not match rates over {steps} steps {expect}")
    rd = rates.data
    out = (draw.u < rd[:, :, None]).astype(np.float32)

    def bwd(g):
        window = sampler_window(rd, draw, alpha=alpha)
        return ((g * window).sum(axis=2, dtype=np.float32),)

    return engine.record_op(out, (rates,), bwd)


def sampler_window(rates: np.ndarray, draw: SamplerDraw, alpha: float) -> np.ndarray:
    """Per-step surrogate derivative: 1/alpha inside the window, else 0."""
    if alpha <= 0:
        raise ValidationError(f"alpha must be positive, got {alpha}")
    inside = np.abs(rates[:, :, None] - draw.u) < np.float32(alpha / 2)
    return inside.astype(np.float32) * np.float32(1.0 / alpha)


def sampler_backward(
    rates: np.ndarray,
    draw: SamplerDraw,
    alpha: float,
    forward_seed: int | None = None,
) -> np.ndarray:
    """Gradient of the total spike count with respect to each rate.

    Sums the per-step window heights, so each entry is a multiple of
    1/alpha. If ``forward_seed`` is supplied it must match the seed the
    draw was built from; replaying backward with foreign noise silently
    breaks the reparameterisation, so that mismatch is an error.
    """
    if forward_seed is not None and draw.seed != forward_seed:
        raise ContractError(
            f"sampler backward replayed with draw seed {draw.seed}, "
            f"but the forward pass used seed {forward_seed}"
        )
    rates = np.asarray(rates, dtype=np.float32)
    if rates.shape != draw.u.shape[:2]:
        raise ShapeError(f"rates shape {rates.shape} does not match draw {draw.u.shape}")
    return sampler_window(rates, draw, alpha).sum(axis=2, dtype=np.float32)


class Bottleneck:
    """Learned prior over rates: a standard-normal code pushed through
    one fully connected layer and a sigmoid. Trained (by the rate
    distribution loss) to imitate the posterior rates."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.fc = Linear(d, d, rng)
        self.d = d

    def __call__(self, z_n: DiffTensor) -> DiffTensor:
        if z_n.ndim != 2 or z_n.shape[1] != self.d:
            raise ShapeError(f"prior input must be (batch, {self.d}), got {z_n.shape}")
        return engine.sigmoid(self.fc(z_n))

    def params(self) -> dict[str, DiffTensor]:
        return {f"fc.{k}": v for k, v in self.fc.params().items()}


def prior_rates(bottleneck: Bottleneck, n: int, rng: np.random.Generator) -> tuple[DiffTensor, DiffTensor]:
    """Sample n prior rate vectors; returns (rates, the normal codes)."""
    z_n = engine.tensor(rng.standard_normal((n, bottleneck.d), dtype=np.float32))
    return bottleneck(z_n), z_n


def shuffle_time(z: np.ndarray, seed: int) -> np.ndarray:
    """Permute each neuron's spike sequence independently along time.

    Per-neuron spike counts (hence rates) are untouched; only the
    temporal arrangement is destroyed.
    """
    _check_binary(z, "spike train")
    if z.ndim != 3:
        raise ShapeError(f"spike train must be (batch, d, T), got {z.shape}")
    rng = np.random.Generator(np.random.Philox(key=seed))
    keys = rng.random(z.shape)
    order = np.argsort(keys, axis=2)
    return np.take_along_axis(z, order, axis=2)


def shuffle_length(z: np.ndarray, seed: int) -> np.ndarray:
    """Apply one random permutation of the neuron axis at every step."""
    _check_binary(z, "spike train")
    if z.ndim != 3:
        raise ShapeError(f"spike train must be (batch, d, T), got {z.shape}")
    rng = np.random.Generator(np.random.Philox(key=seed))
    perm = rng.permutation(z.shape[1])
    return z[:, perm, :]


def perturb_spikes(z: np.ndarray, a: float, seed: int) -> np.ndarray:
    """Flip each bit independently with probability a.

    Models noise injected into the binary latent: existing spikes can
    vanish and silent steps can fire, and the output stays binary.
    """
    if not 0.0 <= a <= 1.0:
        raise ValidationError(f"flip probability must lie in [0, 1], got {a}")
    _check_binary(z, "spike train")
    rng = np.random.Generator(np.random.Philox(key=seed))
    flip = rng.random(z.shape) < a
    out = np.where(flip, 1.0 - z, z)
    return out.astype(z.dtype, copy=False)


def count_pmf(n: int, r: float, steps: int) -> tuple[float, float]:
    """Probability of seeing n spikes in a T-step train at rate r.

    Returns (binomial, poisson). The binomial law Binomial(T, r) is the
    exact distribution of the sampler's independent per-step events; the
    Poisson form (rT)^n e^{-rT} / n! is its large-T approximation and is
    returned alongside for comparison only.
    """
    if not 0.0 <= r <= 1.0:
        raise ValidationError(f"rate must lie in [0, 1], got {r}")
    if n < 0 or n > steps:
        raise ValidationError(f"count {n} outside [0, {steps}]")
    binom = float(math.comb(steps, n)) * r**n * (1.0 - r) ** (steps - n)
    lam = r * steps
    poisson = math.exp(-lam) * lam**n / math.factorial(n)
    return float(binom), float(poisson)
