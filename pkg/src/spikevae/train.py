"""Optimisation: AdamW with decoupled weight decay, the training loop,
and the frozen-encoder classification probe.

One training step runs the fixed pipeline encoder -> posterior rates ->
prior rates -> latent spike sampling -> decoder -> objective -> update.
The body of the autoencoder and the prior bottleneck form two parameter
groups with their own learning rates; gradients are clipped at a global
norm of 5.0 before the update to keep early unrolled-in-time backward
passes from spiking.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import engine
from .data import Dataset, batches
from .engine import DiffTensor
from .errors import NumericError, ShapeError, ValidationError
from .latent import firing_rate, make_draw, sample_spikes
from .layers import Linear, encode_input
from .losses import LossReport, total_loss
from .model import ModelConfig, SpikingVAE
from .rand import derive_seed, make_rng

CLIP_NORM = 5.0


def _adamw_update(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray,
                  t: int, lr: float, weight_decay: float,
                  b1: float, b2: float, eps: float) -> None:
    """In-place decoupled update of one parameter and its moments."""
    if g.shape != p.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
    if weight_decay:
        p *= np.float32(1.0 - lr * weight_decay)
    m *= np.float32(b1)
    m += np.float32(1.0 - b1) * g
    v *= np.float32(b2)
    v += np.float32(1.0 - b2) * np.square(g)
    mhat = m / np.float32(1.0 - b1 ** t)
    vhat = v / np.float32(1.0 - b2 ** t)
    p -= np.float32(lr) * mhat / (np.sqrt(vhat) + np.float32(eps))


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None],
               moments: dict, lr: float, weight_decay: float,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> dict[str, np.ndarray]:
    """Functional entry point: one step over a named parameter family.

    ``moments`` is a mutable dict carrying "t" (step count), "m" and "v"
    (first/second moment arrays per name); missing entries are created.
    Absent or None gradients are treated as zero, so weight decay still
    applies and reduces to a pure multiplicative shrink.
    """
    b1, b2 = betas
    t = int(moments.get("t", 0)) + 1
    moments["t"] = t
    ms = moments.setdefault("m", {})
    vs = moments.setdefault("v", {})
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if name not in ms:
            ms[name] = np.zeros_like(p)
            vs[name] = np.zeros_like(p)
        _adamw_update(p, g, ms[name], vs[name], t, lr, weight_decay, b1, b2, eps)
    return params


class AdamW:
    """Two-or-more group optimizer over live DiffTensor parameters.

    All groups share one step counter; each group brings its own
    learning rate. Weight decay, betas, and eps are global.
    """

    def __init__(self, groups: list[tuple[dict[str, DiffTensor], float]],
                 weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.groups = groups
        self.weight_decay = float(weight_decay)
        self.betas = betas
        self.eps = float(eps)
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        seen: set[str] = set()
        for params, _ in groups:
            for name, p in params.items():
                if name in seen:
                    raise ValidationError(f"parameter {name} appears in two groups")
                seen.add(name)
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for params, _ in self.groups:
            for p in params.values():
                p.zero_grad()

    def parameters(self) -> list[DiffTensor]:
        return [p for params, _ in self.groups for p in params.values()]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        for params, lr in self.groups:
            for name, p in params.items():
                g = p.grad if p.grad is not None else np.zeros_like(p.data)
                _adamw_update(p.data, g, self.m[name], self.v[name], self.t,
                              lr, self.weight_decay, b1, b2, self.eps)

    def moment_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_moments(self, moments: dict[str, np.ndarray], t: int) -> None:
        for name in self.m:
            mk, vk = f"m.{name}", f"v.{name}"
            if mk in moments:
                self.m[name] = moments[mk].astype(np.float32).copy()
            if vk in moments:
                self.v[name] = moments[vk].astype(np.float32).copy()
        self.t = int(t)


def clip_global_norm(params: Iterable[DiffTensor], max_norm: float) -> float:
    """Scale all gradients down so their joint L2 norm is <= max_norm.
    Returns the pre-clip norm."""
    params = list(params)
    norm = engine.global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        scale = np.float32(max_norm / norm)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    mse: float
    mmd2: float
    total: float
    mean_rate: float
    seconds: float


def train_step(model: SpikingVAE, x: np.ndarray, opt: AdamW,
               draw_seed: int, prior_rng: np.random.Generator,
               trace: Callable[[str], None] | None = None) -> tuple[LossReport, float]:
    """One optimisation step on one batch; returns (report, mean encoder rate)."""
    cfg = model.cfg
    note = trace if trace is not None else (lambda _label: None)
    engine.reset_tape()
    opt.zero_grad()

    xt = engine.tensor(x)
    spikes = model.encoder(encode_input(xt, cfg.T), "train")
    note("encoder")
    r_p = firing_rate(engine.unstack_time(spikes, cfg.T))
    note("rate")
    z_n = engine.tensor(prior_rng.standard_normal((x.shape[0], cfg.latent_dim), dtype=np.float32))
    r_q = model.bottleneck(z_n)
    note("prior")
    draw = make_draw(x.shape[0], cfg.latent_dim, cfg.T, draw_seed)
    z_p = sample_spikes(r_p, cfg.T, draw, alpha=cfg.alpha)
    note("sample")
    x_hat = model.decoder(engine.stack_time(z_p), "train")
    note("decoder")
    report = total_loss(xt, x_hat, r_p, r_q, lam=cfg.lambda_mmd)
    note("loss")
    engine.backward(report.node)
    clip_global_norm(opt.parameters(), CLIP_NORM)
    opt.step()
    note("update")
    mean_rate = float(r_p.data.mean())
    engine.reset_tape()
    return report, mean_rate


def train_epoch(model: SpikingVAE, ds: Dataset, opt: AdamW, epoch: int,
                trace: Callable[[str], None] | None = None) -> EpochMetrics:
    """One pass over the dataset in a seed-derived shuffle order."""
    cfg = model.cfg
    t0 = time.perf_counter()
    order_seed = derive_seed(cfg.seed, f"epoch-{epoch}-order")
    sums = np.zeros(4, dtype=np.float64)
    count = 0
    for bi, batch in enumerate(batches(ds, cfg.batch_size, order_seed)):
        draw_seed = derive_seed(cfg.seed, f"epoch-{epoch}-batch-{bi}-draw")
        prior_rng = make_rng(cfg.seed, f"epoch-{epoch}-batch-{bi}-prior")
        try:
            report, mean_rate = train_step(model, batch.images, opt, draw_seed, prior_rng, trace)
        except NumericError as e:
            raise NumericError(f"epoch {epoch}, batch {bi}: {e}") from e
        n = batch.images.shape[0]
        sums += n * np.array([report.mse, report.mmd2, report.total, mean_rate])
        count += n
    if count == 0:
        raise ValidationError("train_epoch over an empty dataset")
    mse, mmd2, total, rate = (sums / count).tolist()
    return EpochMetrics(epoch=epoch, mse=mse, mmd2=mmd2, total=total,
                        mean_rate=rate, seconds=time.perf_counter() - t0)


def make_optimizer(model: SpikingVAE) -> AdamW:
    cfg = model.cfg
    return AdamW(
        [(model.body_params(), cfg.lr), (model.prior_params(), cfg.bottleneck_lr)],
        weight_decay=cfg.weight_decay,
    )


def fit(model: SpikingVAE, ds: Dataset, epochs: int | None = None,
        on_epoch: Callable[[EpochMetrics, AdamW], None] | None = None) -> list[EpochMetrics]:
    """Train for the given number of epochs (default: the config's)."""
    opt = make_optimizer(model)
    history = []
    for epoch in range(epochs if epochs is not None else model.cfg.epochs):
        metrics = train_epoch(model, ds, opt, epoch)
        history.append(metrics)
        if on_epoch is not None:
            on_epoch(metrics, opt)
    return history


# ---------------------------------------------------------------------------
# classification probe


def softmax_xent(logits: DiffTensor, labels: np.ndarray) -> DiffTensor:
    """Mean cross-entropy of integer labels under softmax(logits)."""
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValidationError(f"labels must lie in [0, {k})")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True, dtype=np.float32))
    logp = shifted - logz
    loss = -np.float32(logp[np.arange(n), labels].mean(dtype=np.float32))

    def bwd(g):
        soft = np.exp(logp)
        soft[np.arange(n), labels] -= 1.0
        return (g.reshape(()) * soft / np.float32(n),)

    return engine.record_op(np.asarray(loss), (logits,), bwd)


class ProbeMLP:
    """128 -> 512 -> 256 -> 128 -> 10 rectifier classifier head."""

    def __init__(self, d_in: int, n_classes: int, rng: np.random.Generator):
        dims = (d_in, 512, 256, 128, n_classes)
        self.layers = [Linear(dims[i], dims[i + 1], rng) for i in range(4)]

    def __call__(self, x: DiffTensor) -> DiffTensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = engine.relu(x)
        return x

    def parameters(self) -> list[DiffTensor]:
        return [p for layer in self.layers for p in layer.params().values()]


def encoder_rates(model: SpikingVAE, images: np.ndarray, batch_size: int = 256,
                  bn_mode: str | None = None) -> np.ndarray:
    """Posterior firing rates for a pile of images, without gradients.

    bn_mode "frozen" reproduces the batch-statistics rates the training
    loop optimizes; the default follows the model's usual mode.
    """
    cfg = model.cfg
    mode = bn_mode or model.default_bn_mode()
    out = []
    with engine.no_grad():
        for i in range(0, images.shape[0], batch_size):
            xt = engine.tensor(images[i:i + batch_size])
            spikes = model.encoder(encode_input(xt, cfg.T), mode)
            out.append(firing_rate(engine.unstack_time(spikes, cfg.T)).data)
    return np.concatenate(out, axis=0)


def probe_train_eval(train_rates: np.ndarray, train_labels: np.ndarray,
                     test_rates: np.ndarray, test_labels: np.ndarray,
                     epochs: int = 200, lr: float = 0.01, batch_size: int = 32,
                     seed: int = 0, n_classes: int = 10) -> float:
    """Train the probe head on frozen rates with plain SGD; return test accuracy."""
    if train_rates.shape[0] != train_labels.shape[0]:
        raise ValidationError(
            f"{train_rates.shape[0]} training rates vs {train_labels.shape[0]} labels"
        )
    if test_rates.shape[0] != test_labels.shape[0]:
        raise ValidationError(
            f"{test_rates.shape[0]} test rates vs {test_labels.shape[0]} labels"
        )
    mlp = ProbeMLP(train_rates.shape[1], n_classes, make_rng(seed, "probe-init"))
    n = train_rates.shape[0]
    lr32 = np.float32(lr)
    for epoch in range(epochs):
        order = make_rng(seed, f"probe-epoch-{epoch}").permutation(n)
        for i in range(0, n, batch_size):
            idx = order[i:i + batch_size]
            engine.reset_tape()
            for p in mlp.parameters():
                p.zero_grad()
            logits = mlp(engine.tensor(train_rates[idx]))
            loss = softmax_xent(logits, train_labels[idx])
            engine.backward(loss)
            for p in mlp.parameters():
                if p.grad is not None:
                    p.data -= lr32 * p.grad
    engine.reset_tape()
    with engine.no_grad():
        pred = mlp(engine.tensor(test_rates)).data.argmax(axis=1)
    return float((pred == test_labels).mean())
