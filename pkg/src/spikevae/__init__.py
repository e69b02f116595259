"""Spiking variational autoencoder with a Poisson firing-rate latent
space, trained end to end with surrogate gradients.

The public surface re-exports the pieces most callers need; the
submodules remain importable for everything else.
"""

from .engine import DiffTensor, Tape, backward, no_grad, reset_tape
from .errors import (CheckpointError, ConfigError, ContractError, DataError,
                     NumericError, ShapeError, SpikeVAEError, ValidationError)
from .latent import (SamplerDraw, count_pmf, firing_rate, make_draw,
                     perturb_spikes, sample_spikes, sampler_backward,
                     shuffle_length, shuffle_time)
from .layers import LIFParams, LIFState, lif_run, lif_step
from .losses import (EnergyReport, LossReport, energy_report, mmd_squared,
                     mse_loss, rate_histogram, rbf_kernel, total_loss)
from .model import (Checkpoint, ModelConfig, SpikingVAE, build_model,
                    generate_images, load_checkpoint, model_from_checkpoint,
                    reconstruct, save_checkpoint)
from .train import AdamW, adamw_step, fit, probe_train_eval, train_epoch

__version__ = "0.1.0"

__all__ = [
    "AdamW", "Checkpoint", "CheckpointError", "ConfigError", "ContractError",
    "DataError", "DiffTensor", "EnergyReport", "LIFParams", "LIFState",
    "LossReport", "ModelConfig", "NumericError", "SamplerDraw", "ShapeError",
    "SpikeVAEError", "SpikingVAE", "Tape", "ValidationError", "adamw_step",
    "backward", "build_model", "count_pmf", "energy_report", "firing_rate",
    "fit", "generate_images", "lif_run", "lif_step", "load_checkpoint",
    "make_draw", "mmd_squared", "model_from_checkpoint", "mse_loss",
    "no_grad", "perturb_spikes", "probe_train_eval", "rate_histogram",
    "rbf_kernel", "reconstruct", "reset_tape", "sample_spikes",
    "sampler_backward", "save_checkpoint", "shuffle_length", "shuffle_time",
    "total_loss", "train_epoch",
]
