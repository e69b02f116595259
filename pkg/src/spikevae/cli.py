"""Command line front end.

Subcommands: train, generate, shuffle-test, noise-test, energy, probe,
rate-hist. Configuration is resolved as defaults < config file < flags;
the config file is line-based ``key=value`` with ``#`` comments. Every
command writes the fully resolved configuration into its output
directory as ``config-resolved``, and that file can be fed back via
``--config`` to reproduce the run bit for bit.

Exit codes: 0 success, 2 configuration or checkpoint problem, 3 dataset
problem, 4 numeric failure during training.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import asdict

import numpy as np

from . import experiments, losses
from .data import (Dataset, load_mnist_dir, resize_bilinear, write_csv,
                   write_montage)
from .errors import (CheckpointError, ConfigError, DataError, NumericError,
                     ValidationError)
from .model import (ModelConfig, build_model, generate_images,
                    load_checkpoint, model_from_checkpoint, prior_rate_batch,
                    save_checkpoint)
from .train import encoder_rates, fit, probe_train_eval

MODEL_KEYS: dict[str, type] = {
    "T": int, "v_theta": float, "decay": float, "alpha": float,
    "latent_dim": int, "lambda_mmd": float, "lr": float,
    "weight_decay": float, "bottleneck_lr": float, "epochs": int,
    "batch_size": int, "arch_scale": str, "seed": int,
    "image_channels": int, "image_size": int,
}


def parse_config_file(path: str) -> dict[str, str]:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
            key, _, value = stripped.partition("=")
            out[key.strip()] = value.strip()
    return out


def _parse_value(raw: str, typ: type, key: str):
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes"):
                return True
            if low in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError as e:
        raise ConfigError(f"config key {key}: cannot parse {raw!r} as {typ.__name__}") from e


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def resolve_settings(file_cfg: dict[str, str], keyspec: dict[str, tuple[type, object]],
                     cli_vals: dict[str, object]) -> dict[str, object]:
    """defaults < file < flags, with unknown-file-key rejection."""
    allowed = set(keyspec) | set(MODEL_KEYS)
    for key in file_cfg:
        if key not in allowed:
            raise ConfigError(f"unknown config key {key!r}")
    out: dict[str, object] = {}
    for key, (typ, default) in keyspec.items():
        if cli_vals.get(key) is not None:
            out[key] = cli_vals[key]
        elif key in file_cfg:
            out[key] = _parse_value(file_cfg[key], typ, key)
        else:
            out[key] = default
    return out


def resolve_model_config(file_cfg: dict[str, str], args) -> ModelConfig:
    merged: dict[str, object] = {}
    for key, typ in MODEL_KEYS.items():
        if key in file_cfg:
            merged[key] = _parse_value(file_cfg[key], typ, key)
    overrides = {
        "seed": args.seed,
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "T": getattr(args, "steps", None),
        "latent_dim": getattr(args, "latent_dim", None),
        "lambda_mmd": getattr(args, "lambda_mmd", None),
    }
    if getattr(args, "desk_scale", False):
        overrides["arch_scale"] = "desk"
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return ModelConfig(**merged)


def write_resolved(out_dir: str, settings: dict[str, object]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    lines = [f"{k}={_format_value(v)}" for k, v in sorted(settings.items()) if v is not None]
    with open(os.path.join(out_dir, "config-resolved"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def _load_images(data_dir: str, split: str, size: int, limit: int | None) -> Dataset:
    ds = load_mnist_dir(data_dir, split)
    if limit is not None:
        ds = ds.take(limit)
    if ds.images.shape[2] != size:
        ds = Dataset(images=resize_bilinear(ds.images, size), labels=ds.labels, name=ds.name)
    return ds


def _model_from_checkpoint_path(path: str):
    if path is None:
        raise ConfigError("a --checkpoint path is required")
    ckpt = load_checkpoint(path)
    return model_from_checkpoint(ckpt), ckpt


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, file_cfg) -> int:
    cfg = resolve_model_config(file_cfg, args)
    extra = resolve_settings(file_cfg, {
        "data": (str, args.data_default),
        "out": (str, "runs/train"),
        "limit": (int, None),
        "montage_every": (int, 5),
    }, {"data": args.data, "out": args.out, "limit": args.limit,
        "montage_every": args.montage_every})
    out_dir = extra["out"]
    write_resolved(out_dir, {**asdict(cfg), **extra})
    ds = _load_images(extra["data"], "train", cfg.image_size, extra["limit"])
    model = build_model(cfg)

    metrics_path = os.path.join(out_dir, "metrics.csv")
    # Wall-clock time is deliberately excluded so a rerun from the resolved
    # config reproduces this file byte for byte.
    header = ["epoch", "mse", "mmd2", "total", "mean_rate"]
    with open(metrics_path, "w", encoding="utf-8") as f:
        f.write(",".join(header) + "\n")
    montage_every = max(1, extra["montage_every"])
    preview = ds.images[:8]

    def on_epoch(metrics, opt):
        print(f"epoch {metrics.epoch}: mse={metrics.mse:.4f} "
              f"mmd2={metrics.mmd2:.4f} total={metrics.total:.4f} "
              f"rate={metrics.mean_rate:.3f} ({metrics.seconds:.1f}s)")
        row = [metrics.epoch, metrics.mse, metrics.mmd2, metrics.total,
               metrics.mean_rate]
        from .data import format_cell
        with open(metrics_path, "a", encoding="utf-8") as f:
            f.write(",".join(format_cell(v) for v in row) + "\n")
        tag = f"e{metrics.epoch:03d}"
        save_checkpoint(model, os.path.join(out_dir, f"ckpt-{tag}.ckpt"),
                        moments=opt.moment_tensors(), epoch=metrics.epoch, adam_t=opt.t)
        save_checkpoint(model, os.path.join(out_dir, "ckpt-latest.ckpt"),
                        moments=opt.moment_tensors(), epoch=metrics.epoch, adam_t=opt.t)
        if metrics.epoch % montage_every == 0:
            x_hat, _, _ = experiments.reconstruction_pass(model, preview, cfg.seed)
            tiles = np.concatenate([preview, x_hat], axis=0)
            write_montage(tiles, cols=preview.shape[0],
                          path=os.path.join(out_dir, f"recon-{tag}.pgm"))

    fit(model, ds, on_epoch=on_epoch)
    print(f"training complete: {cfg.epochs} epochs, artifacts in {out_dir}")
    return 0


def cmd_generate(args, file_cfg) -> int:
    extra = resolve_settings(file_cfg, {
        "checkpoint": (str, None),
        "out": (str, "runs/generate"),
        "num": (int, 16),
        "seed": (int, 0),
    }, {"checkpoint": args.checkpoint, "out": args.out, "num": args.num,
        "seed": args.seed})
    out_dir = extra["out"]
    write_resolved(out_dir, extra)
    model, _ = _model_from_checkpoint_path(extra["checkpoint"])
    n = extra["num"]
    if n < 0:
        raise ConfigError(f"--num must be nonnegative, got {n}")
    images = generate_images(model, n, extra["seed"])
    if n > 0:
        cols = min(n, max(1, int(math.ceil(math.sqrt(n)))))
        write_montage(images, cols=cols, path=os.path.join(out_dir, "generated.pgm"))
        rates = prior_rate_batch(model, n, extra["seed"])
        rows = [(i, float(rates[i].mean())) for i in range(n)]
    else:
        rows = []
    write_csv(rows, ["image", "mean_prior_rate"], os.path.join(out_dir, "rates.csv"))
    print(f"generated {n} images into {out_dir}")
    return 0


def cmd_shuffle_test(args, file_cfg) -> int:
    extra = resolve_settings(file_cfg, {
        "checkpoint": (str, None),
        "data": (str, args.data_default),
        "out": (str, "runs/shuffle"),
        "dim": (str, "time"),
        "limit": (int, 256),
        "seed": (int, 0),
    }, {"checkpoint": args.checkpoint, "data": args.data, "out": args.out,
        "dim": args.dim, "limit": args.limit, "seed": args.seed})
    out_dir = extra["out"]
    write_resolved(out_dir, extra)
    model, _ = _model_from_checkpoint_path(extra["checkpoint"])
    ds = _load_images(extra["data"], "test", model.cfg.image_size, extra["limit"])
    res = experiments.shuffle_experiment(model, ds.images, extra["dim"], extra["seed"])
    write_csv(
        [(res.dim, res.vanilla_loss, res.loss_vs_original, res.loss_vs_vanilla)],
        ["dim", "vanilla_loss", "loss_vs_original", "loss_vs_vanilla"],
        os.path.join(out_dir, f"shuffle-{res.dim}.csv"),
    )
    tiles = experiments.shuffle_montage_array(model, ds.images, extra["dim"], extra["seed"])
    write_montage(tiles, cols=tiles.shape[0] // 3,
                  path=os.path.join(out_dir, f"shuffle-{res.dim}.pgm"))
    print(f"{res.dim}-shuffle: loss vs original {res.loss_vs_original:.6g}, "
          f"vs vanilla {res.loss_vs_vanilla:.6g} (vanilla {res.vanilla_loss:.6g})")
    return 0


def cmd_noise_test(args, file_cfg) -> int:
    extra = resolve_settings(file_cfg, {
        "checkpoint": (str, None),
        "data": (str, args.data_default),
        "out": (str, "runs/noise"),
        "probs": (str, "0.0,0.05,0.1,0.2"),
        "limit": (int, 256),
        "seed": (int, 0),
    }, {"checkpoint": args.checkpoint, "data": args.data, "out": args.out,
        "probs": args.probs, "limit": args.limit, "seed": args.seed})
    out_dir = extra["out"]
    write_resolved(out_dir, extra)
    raw = [p for p in str(extra["probs"]).split(",") if p.strip()]
    if not raw:
        raise ValidationError("noise-test needs a nonempty --probs list")
    try:
        probs = [float(p) for p in raw]
    except ValueError as e:
        raise ConfigError(f"cannot parse --probs {extra['probs']!r}") from e
    model, _ = _model_from_checkpoint_path(extra["checkpoint"])
    ds = _load_images(extra["data"], "test", model.cfg.image_size, extra["limit"])
    points = experiments.noise_experiment(model, ds.images, probs, extra["seed"])
    write_csv(
        [(p.prob, p.loss_vs_original, p.loss_vs_vanilla) for p in points],
        ["prob", "loss_vs_original", "loss_vs_vanilla"],
        os.path.join(out_dir, "noise-curve.csv"),
    )
    print(f"noise curve over {len(points)} probabilities written to {out_dir}")
    return 0


def cmd_energy(args, file_cfg) -> int:
    extra = resolve_settings(file_cfg, {
        "checkpoint": (str, None),
        "arch": (str, None),
        "rate": (float, None),
        "out": (str, "runs/energy"),
        "seed": (int, 0),
    }, {"checkpoint": args.checkpoint, "arch": args.arch, "rate": args.rate,
        "out": args.out, "seed": args.seed})
    out_dir = extra["out"]
    write_resolved(out_dir, extra)
    if extra["checkpoint"] is not None:
        model, _ = _model_from_checkpoint_path(extra["checkpoint"])
    elif extra["arch"] in ("full", "desk"):
        model = build_model(ModelConfig(arch_scale=extra["arch"]))
    else:
        raise ConfigError("energy needs --checkpoint or --arch full|desk")
    rate = extra["rate"]
    if rate is None:
        rate = experiments.measure_avg_rate(model, None, extra["seed"])
    table = experiments.energy_table(model.cfg, rate)
    rows = []
    total_e = 0.0
    total_sops = 0.0
    for cost, rep in table:
        rows.append((cost.name, int(cost.spiking), rep.flops_add, rep.flops_mul,
                     rep.avg_rate, rep.sops, rep.energy_joules))
        total_e += rep.energy_joules
        total_sops += rep.sops
    rows.append(("total", "", "", "", rate, total_sops, total_e))
    write_csv(rows, ["layer", "spiking", "flops_add", "flops_mul", "avg_rate",
                     "sops", "energy_joules"], os.path.join(out_dir, "energy.csv"))
    print(f"avg rate {rate:.4f}, total energy {total_e:.6g} J ({out_dir})")
    return 0


def cmd_probe(args, file_cfg) -> int:
    extra = resolve_settings(file_cfg, {
        "checkpoint": (str, None),
        "data": (str, args.data_default),
        "out": (str, "runs/probe"),
        "train_limit": (int, 5000),
        "test_limit": (int, 1000),
        "probe_epochs": (int, 200),
        "probe_lr": (float, 0.01),
        "probe_batch": (int, 32),
        "seed": (int, 0),
    }, {"checkpoint": args.checkpoint, "data": args.data, "out": args.out,
        "train_limit": args.train_limit, "test_limit": args.test_limit,
        "probe_epochs": args.probe_epochs, "probe_lr": args.probe_lr,
        "probe_batch": args.probe_batch, "seed": args.seed})
    out_dir = extra["out"]
    write_resolved(out_dir, extra)
    model, _ = _model_from_checkpoint_path(extra["checkpoint"])
    train_ds = _load_images(extra["data"], "train", model.cfg.image_size, extra["train_limit"])
    test_ds = _load_images(extra["data"], "test", model.cfg.image_size, extra["test_limit"])
    if train_ds.labels is None or test_ds.labels is None:
        raise DataError("probe needs labeled data")
    acc = probe_train_eval(
        encoder_rates(model, train_ds.images), train_ds.labels,
        encoder_rates(model, test_ds.images), test_ds.labels,
        epochs=extra["probe_epochs"], lr=extra["probe_lr"],
        batch_size=extra["probe_batch"], seed=extra["seed"],
    )
    write_csv(
        [(len(train_ds), len(test_ds), extra["probe_epochs"], extra["probe_lr"], acc)],
        ["train_n", "test_n", "epochs", "lr", "accuracy"],
        os.path.join(out_dir, "probe.csv"),
    )
    print(f"probe accuracy {acc:.4f} ({out_dir})")
    return 0


def cmd_rate_hist(args, file_cfg) -> int:
    extra = resolve_settings(file_cfg, {
        "checkpoint": (str, None),
        "data": (str, args.data_default),
        "out": (str, "runs/rate-hist"),
        "bins": (int, 20),
        "limit": (int, 1000),
        "samples": (int, 1000),
        "seed": (int, 0),
    }, {"checkpoint": args.checkpoint, "data": args.data, "out": args.out,
        "bins": args.bins, "limit": args.limit, "samples": args.samples,
        "seed": args.seed})
    out_dir = extra["out"]
    write_resolved(out_dir, extra)
    model, _ = _model_from_checkpoint_path(extra["checkpoint"])
    ds = _load_images(extra["data"], "test", model.cfg.image_size, extra["limit"])
    for label, (freq, edges) in (
        ("posterior", experiments.posterior_rate_histogram(model, ds.images, extra["bins"])),
        ("prior", experiments.prior_rate_histogram(model, extra["samples"], extra["seed"],
                                                   extra["bins"])),
    ):
        rows = [(edges[i], edges[i + 1], freq[i]) for i in range(len(freq))]
        write_csv(rows, ["bin_lo", "bin_hi", "frequency"],
                  os.path.join(out_dir, f"rate-hist-{label}.csv"))
    print(f"rate histograms written to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spikevae",
                                     description="Spiking VAE with a firing-rate latent space")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, data=False):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        if checkpoint:
            p.add_argument("--checkpoint", default=None)
        if data:
            p.add_argument("--data", default=None, help="directory with IDX files")

    p = sub.add_parser("train", help="train the autoencoder")
    common(p, data=True)
    p.add_argument("--desk-scale", action="store_true",
                   help="quarter channel widths (pair with --steps for short runs)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--steps", type=int, default=None, help="time steps T")
    p.add_argument("--latent-dim", type=int, default=None)
    p.add_argument("--lambda-mmd", type=float, default=None)
    p.add_argument("--limit", type=int, default=None, help="train on the first N images")
    p.add_argument("--montage-every", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample images from the prior")
    common(p, checkpoint=True)
    p.add_argument("--num", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("shuffle-test", help="latent shuffle robustness check")
    common(p, checkpoint=True, data=True)
    p.add_argument("--dim", choices=["time", "length"], default=None)
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_shuffle_test)

    p = sub.add_parser("noise-test", help="latent bit-flip noise curve")
    common(p, checkpoint=True, data=True)
    p.add_argument("--probs", default=None, help="comma-separated flip probabilities")
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_noise_test)

    p = sub.add_parser("energy", help="operation counts and energy estimate")
    common(p, checkpoint=True)
    p.add_argument("--arch", choices=["full", "desk"], default=None)
    p.add_argument("--rate", type=float, default=None,
                   help="override the measured average firing rate")
    p.set_defaults(func=cmd_energy)

    p = sub.add_parser("probe", help="linear-probe classification on encoder rates")
    common(p, checkpoint=True, data=True)
    p.add_argument("--train-limit", type=int, default=None)
    p.add_argument("--test-limit", type=int, default=None)
    p.add_argument("--probe-epochs", type=int, default=None)
    p.add_argument("--probe-lr", type=float, default=None)
    p.add_argument("--probe-batch", type=int, default=None)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("rate-hist", help="firing-rate frequency histograms")
    common(p, checkpoint=True, data=True)
    p.add_argument("--bins", type=int, default=None)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.set_defaults(func=cmd_rate_hist)

    return parser


DEFAULT_DATA_DIR = "data/mnist-subset"


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.data_default = DEFAULT_DATA_DIR
    try:
        file_cfg = parse_config_file(args.config) if args.config else {}
        return args.func(args, file_cfg)
    except (ConfigError, CheckpointError, ValidationError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
