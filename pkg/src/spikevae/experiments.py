"""Experiment harnesses shared by the command line and the test suite:
latent shuffling, latent noise curves, energy accounting, and firing
rate histograms.

All of them drive a trained (or at least constructed) model through
no-gradient forward passes with seed-derived randomness, so a given
(model, seed) pair always reproduces the same numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine, latent, layers, losses
from .errors import ValidationError
from .model import ModelConfig, SpikingVAE, prior_rate_batch, reconstruct
from .rand import derive_seed
from .train import encoder_rates

E_STEP_LABELS = ("time", "length")


def decode_spikes(model: SpikingVAE, z: np.ndarray) -> np.ndarray:
    """Decoder-only pass on a raw (b, d, T) spike array."""
    with engine.no_grad():
        zt = engine.tensor(z)
        return model.decoder(engine.stack_time(zt), model.default_bn_mode()).data


def reconstruction_pass(model: SpikingVAE, images: np.ndarray, seed: int):
    """No-gradient reconstruction; returns raw (x_hat, r_p, z_p) arrays."""
    with engine.no_grad():
        x_hat, r_p, z_p = reconstruct(model, images, seed=seed)
    return x_hat.data, r_p.data, z_p.data


def _mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.square(a.astype(np.float64) - b.astype(np.float64)).mean())


@dataclass(frozen=True)
class ShuffleResult:
    dim: str
    vanilla_loss: float
    loss_vs_original: float
    loss_vs_vanilla: float


def shuffle_experiment(model: SpikingVAE, images: np.ndarray, dim: str, seed: int) -> ShuffleResult:
    """Reconstruct, scramble the latent spikes along one axis, decode
    again, and compare against both the inputs and the unscrambled
    reconstructions."""
    if dim not in E_STEP_LABELS:
        raise ValidationError(f"shuffle dim must be one of {E_STEP_LABELS}, got {dim!r}")
    x_hat, _, z_p = reconstruction_pass(model, images, seed)
    shuffler = latent.shuffle_time if dim == "time" else latent.shuffle_length
    z_s = shuffler(z_p, derive_seed(seed, f"shuffle-{dim}"))
    x_s = decode_spikes(model, z_s)
    return ShuffleResult(
        dim=dim,
        vanilla_loss=_mse(x_hat, images),
        loss_vs_original=_mse(x_s, images),
        loss_vs_vanilla=_mse(x_s, x_hat),
    )


def shuffle_montage_array(model: SpikingVAE, images: np.ndarray, dim: str, seed: int,
                          k: int = 8) -> np.ndarray:
    """Rows: originals, vanilla reconstructions, shuffled reconstructions."""
    k = min(k, images.shape[0])
    x_hat, _, z_p = reconstruction_pass(model, images[:k], seed)
    shuffler = latent.shuffle_time if dim == "time" else latent.shuffle_length
    z_s = shuffler(z_p, derive_seed(seed, f"shuffle-{dim}"))
    x_s = decode_spikes(model, z_s)
    return np.concatenate([images[:k], x_hat, x_s], axis=0)


@dataclass(frozen=True)
class NoisePoint:
    prob: float
    loss_vs_original: float
    loss_vs_vanilla: float


def noise_experiment(model: SpikingVAE, images: np.ndarray, probs: list[float],
                     seed: int) -> list[NoisePoint]:
    """Flip latent spike bits with each probability and track how the
    decoded images drift from the inputs and the clean reconstructions.

    The same clean reconstruction (same latent draw) anchors every
    point, so prob=0 lands exactly on the vanilla loss.
    """
    if not probs:
        raise ValidationError("noise_experiment needs at least one probability")
    x_hat, _, z_p = reconstruction_pass(model, images, seed)
    points = []
    for i, a in enumerate(probs):
        z_a = latent.perturb_spikes(z_p, a, derive_seed(seed, f"noise-{i}"))
        x_a = decode_spikes(model, z_a)
        points.append(NoisePoint(
            prob=float(a),
            loss_vs_original=_mse(x_a, images),
            loss_vs_vanilla=_mse(x_a, x_hat),
        ))
    return points


# ---------------------------------------------------------------------------
# energy accounting


@dataclass(frozen=True)
class LayerCost:
    """Dense one-pass operation counts for one weight-bearing layer.

    ``adds``/``muls`` count a single analog evaluation of the layer.
    For spiking-input layers each synaptic event is an accumulate, so
    muls is 0 and the energy model scales adds by rate and time. The
    first convolution sees the real-valued image, and the prior
    bottleneck sees real-valued noise; both are non-spiking and run once
    per time step (the first conv) or once per sample (the bottleneck).
    """

    name: str
    adds: int
    muls: int
    spiking: bool
    per_step: bool


def flop_audit(cfg: ModelConfig) -> list[LayerCost]:
    """Static per-layer operation counts for one input image."""
    widths = cfg.widths()
    im = cfg.image_channels
    side = cfg.image_size
    costs: list[LayerCost] = []
    c_prev = im
    s = side
    for i, wd in enumerate(widths):
        s //= 2
        macs = s * s * wd * c_prev * 9
        if i == 0:
            costs.append(LayerCost(f"enc.conv{i}", macs, macs, spiking=False, per_step=True))
        else:
            costs.append(LayerCost(f"enc.conv{i}", macs, 0, spiking=True, per_step=True))
        c_prev = wd
    s0 = side // 16
    flat = widths[-1] * s0 * s0
    costs.append(LayerCost("enc.fc", flat * cfg.latent_dim, 0, spiking=True, per_step=True))
    costs.append(LayerCost("dec.fc", cfg.latent_dim * flat, 0, spiking=True, per_step=True))
    chain = (widths[-1],) + tuple(reversed(widths))
    s = s0
    for i in range(4):
        macs = s * s * chain[i] * chain[i + 1] * 9
        costs.append(LayerCost(f"dec.tconv{i}", macs, 0, spiking=True, per_step=True))
        s *= 2
    costs.append(LayerCost("dec.conv5", s * s * widths[0] * widths[0] * 9, 0,
                           spiking=True, per_step=True))
    costs.append(LayerCost("dec.head", s * s * widths[0] * im * 9, 0,
                           spiking=True, per_step=True))
    costs.append(LayerCost("prior.fc", cfg.latent_dim * cfg.latent_dim,
                           cfg.latent_dim * cfg.latent_dim, spiking=False, per_step=False))
    return costs


def measure_avg_rate(model: SpikingVAE, images: np.ndarray | None, seed: int,
                     n_generate: int = 64) -> float:
    """Network-wide mean firing rate, size-weighted over every spiking
    activation. Uses a reconstruction pass when images are given, else a
    generation pass."""
    with layers.capture_rates() as cap:
        if images is not None:
            _, _, z_p = reconstruction_pass(model, images, seed)
            cap.add(float(z_p.mean()), z_p.size)
        else:
            rates = prior_rate_batch(model, n_generate, seed)
            draw = latent.make_draw(n_generate, model.cfg.latent_dim, model.cfg.T,
                                    derive_seed(seed, "rate-draw"))
            z = (draw.u < rates[:, :, None]).astype(np.float32)
            cap.add(float(z.mean()), z.size)
            decode_spikes(model, z)
    return cap.overall()


def energy_table(cfg: ModelConfig, avg_rate: float) -> list[tuple[LayerCost, losses.EnergyReport]]:
    """Pair each layer's cost with its energy under the given mean rate.

    Spiking layers: energy = rate * T * flops * 0.9 pJ. Non-spiking
    layers pay 4.6 pJ per FLOP, times T when they execute every step.
    """
    table = []
    for cost in flop_audit(cfg):
        if cost.spiking:
            rep = losses.energy_report(cost.adds, cost.muls, avg_rate, cfg.T, spiking=True)
        else:
            mult = cfg.T if cost.per_step else 1
            rep = losses.energy_report(cost.adds * mult, cost.muls * mult, 0.0,
                                       cfg.T, spiking=False)
        table.append((cost, rep))
    return table


# ---------------------------------------------------------------------------
# rate histograms


def posterior_rate_histogram(model: SpikingVAE, images: np.ndarray, bins: int):
    rates = encoder_rates(model, images)
    return losses.rate_histogram(rates, bins)


def prior_rate_histogram(model: SpikingVAE, n: int, seed: int, bins: int):
    rates = prior_rate_batch(model, n, seed)
    return losses.rate_histogram(rates, bins)
