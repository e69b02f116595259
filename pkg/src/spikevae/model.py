"""Model assembly, inference entry points, and checkpointing.

The autoencoder is a mirrored pair of spiking convolutional stacks. The
encoder downsamples with four stride-2 convolutions into a fully
connected spiking layer of width ``latent_dim``; its spike train's
firing rates are the posterior over the latent code. The decoder walks
back up with transposed convolutions and reads out an image through a
non-spiking sigmoid head. A one-layer bottleneck maps standard-normal
noise to prior rates for generation.

Every convolution and fully connected layer is followed by
batch-and-time pooled normalisation; every normalisation except the
readout head's feeds a spiking neuron.

Batch normalisation can run in three modes:

``train``
    batch statistics, running estimates updated.
``frozen``
    batch statistics, running estimates untouched (used to push data
    through a model that has never been trained).
``eval``
    running statistics (errors if none exist yet).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import engine
from .engine import DiffTensor
from .errors import CheckpointError, ConfigError, ShapeError
from .latent import Bottleneck, SamplerDraw, firing_rate, make_draw, sample_spikes
from .layers import (Conv2d, ConvTranspose2d, LIFParams, Linear, TdBN,
                     decode_output, encode_input, lif_run)
from .rand import derive_seed, make_rng

CHECKPOINT_MAGIC = b"ESVAECKPT"
CHECKPOINT_VERSION = 1

_FULL_WIDTHS = (32, 64, 128, 256)


@dataclass(frozen=True)
class ModelConfig:
    T: int = 16
    v_theta: float = 0.2
    decay: float = 0.25
    alpha: float = 0.5
    latent_dim: int = 128
    lambda_mmd: float = 1.0
    lr: float = 0.0006
    weight_decay: float = 0.001
    bottleneck_lr: float = 0.006
    epochs: int = 300
    batch_size: int = 32
    arch_scale: str = "full"
    seed: int = 0
    image_channels: int = 1
    image_size: int = 32

    def __post_init__(self):
        if self.arch_scale not in ("full", "desk"):
            raise ConfigError(f"arch_scale must be 'full' or 'desk', got {self.arch_scale!r}")
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.image_size < 16 or self.image_size % 16 != 0:
            raise ConfigError(
                f"image_size must be a positive multiple of 16 (four stride-2 "
                f"halvings), got {self.image_size}"
            )
        if self.image_channels < 1:
            raise ConfigError(f"image_channels must be >= 1, got {self.image_channels}")
        if min(self.lr, self.bottleneck_lr) <= 0:
            raise ConfigError("learning rates must be positive")

    def widths(self) -> tuple[int, ...]:
        if self.arch_scale == "desk":
            return tuple(w // 4 for w in _FULL_WIDTHS)
        return _FULL_WIDTHS

    def lif(self) -> LIFParams:
        return LIFParams(v_theta=self.v_theta, decay=self.decay, alpha=self.alpha)


class _Stack:
    """Shared bookkeeping for the two halves: ordered parameter and
    normalisation-layer registries keyed by dotted names."""

    def __init__(self):
        self._params: dict[str, DiffTensor] = {}
        self._bns: dict[str, TdBN] = {}

    def _reg(self, name: str, layer) -> None:
        for k, v in layer.params().items():
            self._params[f"{name}.{k}"] = v
        if isinstance(layer, TdBN):
            self._bns[name] = layer

    def params(self) -> dict[str, DiffTensor]:
        return dict(self._params)

    def bn_layers(self) -> dict[str, TdBN]:
        return dict(self._bns)


class SpikingEncoder(_Stack):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        widths = cfg.widths()
        self.convs: list[Conv2d] = []
        self.bns: list[TdBN] = []
        c_prev = cfg.image_channels
        for i, w in enumerate(widths):
            conv = Conv2d(c_prev, w, stride=2, pad=1, rng=rng)
            bn = TdBN(w, v_theta=cfg.v_theta)
            self.convs.append(conv)
            self.bns.append(bn)
            self._reg(f"enc.conv{i}", conv)
            self._reg(f"enc.bn{i}", bn)
            c_prev = w
        s0 = cfg.image_size // 16
        self.flat_dim = widths[-1] * s0 * s0
        self.fc = Linear(self.flat_dim, cfg.latent_dim, rng)
        self.bn_fc = TdBN(cfg.latent_dim, v_theta=cfg.v_theta)
        self._reg("enc.fc", self.fc)
        self._reg("enc.bnfc", self.bn_fc)

    def __call__(self, stacked_current: DiffTensor, bn_mode: str) -> DiffTensor:
        """Time-stacked image currents -> time-stacked latent spikes."""
        cfg = self.cfg
        lif = cfg.lif()
        x = stacked_current
        for conv, bn in zip(self.convs, self.bns):
            x = lif_run(_bn_apply(bn, conv(x), bn_mode), cfg.T, lif)
        x = engine.reshape(x, (x.shape[0], self.flat_dim))
        x = lif_run(_bn_apply(self.bn_fc, self.fc(x), bn_mode), cfg.T, lif)
        return x


class SpikingDecoder(_Stack):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        widths = cfg.widths()
        s0 = cfg.image_size // 16
        self.s0 = s0
        self.fc = Linear(cfg.latent_dim, widths[-1] * s0 * s0, rng)
        self.bn_fc = TdBN(widths[-1] * s0 * s0, v_theta=cfg.v_theta)
        self._reg("dec.fc", self.fc)
        self._reg("dec.bnfc", self.bn_fc)
        chain = (widths[-1],) + tuple(reversed(widths))
        self.tconvs: list[ConvTranspose2d] = []
        self.tbns: list[TdBN] = []
        for i in range(4):
            tconv = ConvTranspose2d(chain[i], chain[i + 1], stride=2, pad=1, rng=rng)
            bn = TdBN(chain[i + 1], v_theta=cfg.v_theta)
            self.tconvs.append(tconv)
            self.tbns.append(bn)
            self._reg(f"dec.tconv{i}", tconv)
            self._reg(f"dec.bn{i}", bn)
        self.conv5 = Conv2d(widths[0], widths[0], stride=1, pad=1, rng=rng)
        self.bn5 = TdBN(widths[0], v_theta=cfg.v_theta)
        self.head = Conv2d(widths[0], cfg.image_channels, stride=1, pad=1, rng=rng)
        self.bn_head = TdBN(cfg.image_channels, v_theta=cfg.v_theta)
        self._reg("dec.conv5", self.conv5)
        self._reg("dec.bn5", self.bn5)
        self._reg("dec.head", self.head)
        self._reg("dec.bnhead", self.bn_head)

    def __call__(self, z_stacked: DiffTensor, bn_mode: str) -> DiffTensor:
        """Time-stacked latent spikes -> reconstructed images in [0,1]."""
        cfg = self.cfg
        lif = cfg.lif()
        x = lif_run(_bn_apply(self.bn_fc, self.fc(z_stacked), bn_mode), cfg.T, lif)
        widths = cfg.widths()
        x = engine.reshape(x, (x.shape[0], widths[-1], self.s0, self.s0))
        for tconv, bn in zip(self.tconvs, self.tbns):
            x = lif_run(_bn_apply(bn, tconv(x), bn_mode), cfg.T, lif)
        x = lif_run(_bn_apply(self.bn5, self.conv5(x), bn_mode), cfg.T, lif)
        x = _bn_apply(self.bn_head, self.head(x), bn_mode)
        return decode_output(x, cfg.T)


def _bn_apply(bn: TdBN, x: DiffTensor, mode: str) -> DiffTensor:
    if mode == "train":
        return bn(x, train=True)
    if mode == "frozen":
        return bn(x, train=True, update_stats=False)
    if mode == "eval":
        return bn(x, train=False)
    raise ConfigError(f"unknown bn mode {mode!r}")


class SpikingVAE:
    """Encoder, decoder, and prior bottleneck behind one config."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = make_rng(cfg.seed, "init")
        self.encoder = SpikingEncoder(cfg, rng)
        self.decoder = SpikingDecoder(cfg, rng)
        self.bottleneck = Bottleneck(cfg.latent_dim, rng)

    def named_params(self) -> dict[str, DiffTensor]:
        out = dict(self.encoder.params())
        out.update(self.decoder.params())
        for k, v in self.bottleneck.params().items():
            out[f"prior.{k}"] = v
        return out

    def body_params(self) -> dict[str, DiffTensor]:
        return {k: v for k, v in self.named_params().items() if not k.startswith("prior.")}

    def prior_params(self) -> dict[str, DiffTensor]:
        return {k: v for k, v in self.named_params().items() if k.startswith("prior.")}

    def bn_layers(self) -> dict[str, TdBN]:
        out = dict(self.encoder.bn_layers())
        out.update(self.decoder.bn_layers())
        return out

    def bn_ready(self) -> bool:
        return all(bn.initialized for bn in self.bn_layers().values())

    def param_count(self) -> int:
        return sum(p.size for p in self.named_params().values())

    def default_bn_mode(self) -> str:
        return "eval" if self.bn_ready() else "frozen"


def build_model(cfg: ModelConfig) -> SpikingVAE:
    """Deterministic construction: same config, same initial weights."""
    return SpikingVAE(cfg)


def reconstruct(
    model: SpikingVAE,
    images: np.ndarray | DiffTensor,
    seed: int | None = None,
    bn_mode: str | None = None,
    draw: SamplerDraw | None = None,
) -> tuple[DiffTensor, DiffTensor, DiffTensor]:
    """Autoencode a batch: returns (x_hat, posterior rates, latent spikes).

    The latent spike draw comes from ``draw`` if given, otherwise from a
    seed derived from (seed or the model seed) so repeated calls with
    the same arguments reproduce bitwise.
    """
    cfg = model.cfg
    x = images if isinstance(images, DiffTensor) else engine.tensor(images)
    if x.ndim != 4 or x.shape[1:] != (cfg.image_channels, cfg.image_size, cfg.image_size):
        raise ShapeError(
            f"images {x.shape} do not match configured geometry "
            f"(_, {cfg.image_channels}, {cfg.image_size}, {cfg.image_size})"
        )
    mode = bn_mode if bn_mode is not None else model.default_bn_mode()
    b = x.shape[0]
    stacked = encode_input(x, cfg.T)
    spikes = model.encoder(stacked, mode)
    r_p = firing_rate(engine.unstack_time(spikes, cfg.T))
    if draw is None:
        root = cfg.seed if seed is None else seed
        draw = make_draw(b, cfg.latent_dim, cfg.T, derive_seed(root, "reconstruct-draw"))
    z_p = sample_spikes(r_p, cfg.T, draw, alpha=cfg.alpha)
    x_hat = model.decoder(engine.stack_time(z_p), mode)
    return x_hat, r_p, z_p


def generate_images(model: SpikingVAE, n: int, seed: int) -> np.ndarray:
    """Sample n images from the prior. Deterministic in (model, n, seed).

    An untrained model (no normalisation statistics yet) falls back to
    batch statistics without recording them.
    """
    cfg = model.cfg
    if n == 0:
        return np.zeros((0, cfg.image_channels, cfg.image_size, cfg.image_size), dtype=np.float32)
    mode = model.default_bn_mode()
    with engine.no_grad():
        rng = make_rng(seed, "prior-noise")
        z_n = engine.tensor(rng.standard_normal((n, cfg.latent_dim), dtype=np.float32))
        r_q = model.bottleneck(z_n)
        draw = make_draw(n, cfg.latent_dim, cfg.T, derive_seed(seed, "prior-draw"))
        z_q = sample_spikes(r_q, cfg.T, draw, alpha=cfg.alpha)
        x = model.decoder(engine.stack_time(z_q), mode)
    return x.data


def prior_rate_batch(model: SpikingVAE, n: int, seed: int) -> np.ndarray:
    """Rates the bottleneck assigns to n fresh standard-normal codes."""
    with engine.no_grad():
        rng = make_rng(seed, "prior-noise")
        z_n = engine.tensor(rng.standard_normal((n, model.cfg.latent_dim), dtype=np.float32))
        return model.bottleneck(z_n).data


# ---------------------------------------------------------------------------
# checkpointing


@dataclass
class Checkpoint:
    version: int
    config: ModelConfig
    params: dict[str, np.ndarray]
    bn_stats: dict[str, np.ndarray]
    moments: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    adam_t: int = 0


def _write_tensor(f, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(model: SpikingVAE, path: str, moments: dict[str, np.ndarray] | None = None,
                    epoch: int = 0, adam_t: int = 0) -> None:
    """Write the model (and optionally optimizer moments) atomically."""
    tensors: dict[str, np.ndarray] = {k: v.data for k, v in model.named_params().items()}
    bn_ready = model.bn_ready()
    if bn_ready:
        for name, bn in model.bn_layers().items():
            for sk, sv in bn.state_arrays().items():
                tensors[f"{name}.{sk}"] = sv
    if moments:
        for k, v in moments.items():
            tensors[f"opt.{k}"] = v
    header = {
        "config": asdict(model.cfg),
        "epoch": int(epoch),
        "adam_t": int(adam_t),
        "bn_ready": bool(bn_ready),
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            _write_tensor(f, name, arr)
    os.replace(tmp, path)


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"checkpoint truncated while reading {what}")
    return buf


def load_checkpoint(path: str) -> Checkpoint:
    """Parse and validate a checkpoint file; never returns a partial model."""
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint file not found: {path}")
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic in {path}: {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {version} in {path}; "
                f"this build reads version {CHECKPOINT_VERSION}"
            )
        (hlen,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
        try:
            header = json.loads(_read_exact(f, hlen, "header").decode("utf-8"))
            cfg = ModelConfig(**header["config"])
        except (ValueError, KeyError, TypeError) as e:
            raise CheckpointError(f"malformed checkpoint header in {path}: {e}") from e
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            name = _read_exact(f, nlen, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, f"rank of {name}"))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, f"dims of {name}"))
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = _read_exact(f, 4 * size, f"payload of {name}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        if f.read(1):
            raise CheckpointError(f"trailing bytes after last tensor in {path}")
    params = {k: v for k, v in tensors.items()
              if not k.startswith("opt.") and not k.endswith(("running_mean", "running_var"))}
    bn_stats = {k: v for k, v in tensors.items() if k.endswith(("running_mean", "running_var"))}
    moments = {k[len("opt."):]: v for k, v in tensors.items() if k.startswith("opt.")}
    return Checkpoint(
        version=version,
        config=cfg,
        params=params,
        bn_stats=bn_stats,
        moments=moments,
        epoch=int(header.get("epoch", 0)),
        adam_t=int(header.get("adam_t", 0)),
    )


def model_from_checkpoint(ckpt: Checkpoint) -> SpikingVAE:
    """Rebuild a model and install the stored tensors, shape-checked."""
    model = build_model(ckpt.config)
    live = model.named_params()
    if set(live) != set(ckpt.params):
        missing = sorted(set(live) - set(ckpt.params))
        extra = sorted(set(ckpt.params) - set(live))
        raise CheckpointError(
            f"checkpoint parameters do not match architecture: missing {missing}, extra {extra}"
        )
    for name, arr in ckpt.params.items():
        if live[name].shape != arr.shape:
            raise CheckpointError(
                f"parameter {name} has shape {arr.shape}, expected {live[name].shape}"
            )
        live[name].data = arr.copy()
    bns = model.bn_layers()
    for name, bn in bns.items():
        mk, vk = f"{name}.running_mean", f"{name}.running_var"
        if mk in ckpt.bn_stats and vk in ckpt.bn_stats:
            bn.load_state(ckpt.bn_stats[mk], ckpt.bn_stats[vk])
        elif mk in ckpt.bn_stats or vk in ckpt.bn_stats:
            raise CheckpointError(f"checkpoint has partial statistics for layer {name}")
    return model
