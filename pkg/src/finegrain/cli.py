"""Command-line entry point: describe / init / train / eval / fuse / verify / bench.

Configuration precedence: flags > --config file > --preset defaults.  eval
starts from the checkpoint's stored config instead of the preset.
Failures print one line ``error=<kind> exit=<code> message=...`` on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import CheckpointError, CheckpointVersionError, load_checkpoint, save_checkpoint
from .config import PRESETS, RunConfig, preset
from .data import CifarFormatError, Dataset, load_cifar10, load_cifar100, normalize_channels, synthetic_dataset
from .finet import NormOptions, build_finet, describe
from .fusion import FusionError, fuse_model, is_fused, probe_inputs, verify_fusion
from .layers import NetworkGraph
from .norm import ConfigError, StateError
from .tensor import Tensor
from .train import calibrate_norm_stats, evaluate, train_epochs

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_MISSING_FILE = 3
EXIT_CHECKPOINT = 4
EXIT_UNFUSABLE = 5
EXIT_CONFIG = 6
EXIT_DATA = 7
EXIT_TOLERANCE = 8


class ToleranceExceeded(RuntimeError):
    pass


# -- config and data plumbing -------------------------------------------------------

def resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    """``base`` (e.g. a checkpoint's stored config) replaces the preset unless
    --preset was given explicitly."""
    if base is None or args.preset is not None:
        cfg = preset(args.preset or "desk")
    else:
        cfg = base
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        cfg = RunConfig.from_text(path.read_text(), base=cfg)
    overrides = {}
    for f in dataclasses.fields(RunConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            overrides[f.name] = v
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return cfg.updated(overrides)


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "cifar10":
        train, test = load_cifar10(cfg.data_dir or None, "train"), load_cifar10(cfg.data_dir or None, "test")
    elif cfg.dataset == "cifar100":
        train, test = load_cifar100(cfg.data_dir or None, "train"), load_cifar100(cfg.data_dir or None, "test")
    elif cfg.dataset == "synthetic":
        n_train = cfg.train_subset or 1000
        n_test = cfg.test_subset or 200
        train = synthetic_dataset(cfg.synthetic_kind, n_train + n_test, 10, cfg.seed)
        test = Dataset(train.images[n_train:], train.labels[n_train:], 10, "test")
        train = Dataset(train.images[:n_train], train.labels[:n_train], 10, "train")
    else:
        raise ConfigError(f"unknown dataset {cfg.dataset!r}")
    if cfg.train_subset:
        train = train.subset(cfg.train_subset)
    if cfg.test_subset:
        test = test.subset(cfg.test_subset)
    train, test, _ = normalize_channels(train, test)
    return train, test


def _input_form(cfg: RunConfig, default: str) -> str:
    return default if cfg.input_form == "auto" else cfg.input_form


def build_from_config(cfg: RunConfig, num_classes: int, form: str) -> NetworkGraph:
    return build_finet(cfg.variant, cfg.group_spec, cfg.use_se, cifar_adapted=(form == "cifar"),
                       num_classes=num_classes, seed=cfg.seed, style=cfg.style,
                       norm=NormOptions(cfg.affine, cfg.epsilon, cfg.bn_momentum))


# -- subcommands ------------------------------------------------------------------------

def cmd_describe(cfg: RunConfig, out=print) -> str:
    form = _input_form(cfg, "imagenet")
    net = build_from_config(cfg, cfg.num_classes or (10 if form == "cifar" else 1000), form)
    text = describe(net)
    out(text)
    return text


def cmd_init(cfg: RunConfig, calibrate: int = 16, out=print) -> NetworkGraph:
    """Fresh network; running statistics are set from ``calibrate`` seeded
    probe images so inference stays normalized (0 keeps mean 0 / var 1)."""
    form = _input_form(cfg, "imagenet")
    net = build_from_config(cfg, cfg.num_classes or (10 if form == "cifar" else 1000), form)
    if calibrate > 0:
        calibrate_norm_stats(net, probe_inputs(net.input_shape, calibrate, cfg.seed + 1))
    save_checkpoint(cfg.checkpoint, net, cfg)
    out(f"checkpoint={cfg.checkpoint}")
    return net


def cmd_train(cfg: RunConfig, out=print) -> list[dict]:
    train, test = load_data(cfg)
    form = _input_form(cfg, "cifar" if train.images.shape[-1] == 32 else "imagenet")
    net = build_from_config(cfg, cfg.num_classes or train.num_classes, form)
    csv_path = Path(cfg.metrics_csv) if cfg.metrics_csv else None
    if csv_path is not None and csv_path.exists():
        csv_path.unlink()
    history = train_epochs(net, train, test, cfg, csv_path=csv_path, emit=out)
    save_checkpoint(cfg.checkpoint, net, cfg)
    out(f"checkpoint={cfg.checkpoint}")
    return history


def cmd_eval(cfg: RunConfig | None, checkpoint: str, out=print) -> tuple[float, float]:
    """Data settings come from ``cfg``, or from the checkpoint when it is None."""
    net, saved = load_checkpoint(checkpoint)
    _, test = load_data(cfg or saved)
    loss, acc = evaluate(net, test)
    out(f"val_loss={loss:.6f} val_top1={acc:.6f}")
    return loss, acc


def cmd_fuse(checkpoint: str, fused_path: str, out=print) -> NetworkGraph:
    net, cfg = load_checkpoint(checkpoint)
    if is_fused(net):
        fused = net
    else:
        fused = fuse_model(net.eval())
    save_checkpoint(fused_path, fused, cfg)
    out(f"fused_checkpoint={fused_path}")
    return fused


def cmd_verify(checkpoint: str, fused_checkpoint: str, probes: int = 4, seed: int = 0,
               tolerance: float | None = None, out=print):
    net, _ = load_checkpoint(checkpoint)
    fused, _ = load_checkpoint(fused_checkpoint)
    report = verify_fusion(net.eval(), fused.eval(), probes, seed)
    out(report.to_text())
    if tolerance is not None and not report.max_abs_diff <= tolerance:
        raise ToleranceExceeded(f"max_abs_diff {report.max_abs_diff:.3e} exceeds {tolerance:.3e}")
    return report


def _throughput(net: NetworkGraph, x: Tensor, iters: int, warmup: int) -> float:
    for _ in range(warmup):
        net(x)
    t0 = time.perf_counter()
    for _ in range(iters):
        net(x)
    elapsed = time.perf_counter() - t0
    return iters * x.shape[0] / elapsed


def cmd_bench(checkpoint: str, batch: int = 1, iters: int = 100, warmup: int = 10,
              image_size: int | None = None, seed: int = 0, out=print) -> dict:
    """Images per second of the unfused and fused inference networks."""
    net, _ = load_checkpoint(checkpoint)
    if is_fused(net):
        raise FusionError("bench needs an unfused checkpoint to compare against")
    net.eval()
    fused = fuse_model(net)
    shape = list(net.input_shape)
    if image_size:
        shape[2] = shape[3] = image_size
    x = probe_inputs(shape, batch, seed)
    # interleave rounds so drift in machine load hits both variants alike
    rounds = 4
    per = max(1, iters // rounds)
    unfused_t, fused_t = [], []
    _throughput(net, x, 0, warmup)
    _throughput(fused, x, 0, warmup)
    for _ in range(rounds):
        unfused_t.append(_throughput(net, x, per, 0))
        fused_t.append(_throughput(fused, x, per, 0))
    result = {"unfused_ips": float(np.median(unfused_t)), "fused_ips": float(np.median(fused_t))}
    result["ratio"] = result["fused_ips"] / result["unfused_ips"]
    out(f"batch={batch} iters={per * rounds} image={shape[2]}x{shape[3]}")
    out(f"unfused_ips={result['unfused_ips']:.4f}")
    out(f"fused_ips={result['fused_ips']:.4f}")
    out(f"ratio={result['ratio']:.4f}")
    return result


# -- argument parsing ---------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", default=None, choices=sorted(PRESETS), help="defaults to desk")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    g = p.add_argument_group("config overrides")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        g.add_argument(flag, dest=f"cfg_{f.name}", default=None, metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="finegrain", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS threads; 1 keeps runs reproducible, 0 leaves the library default")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_ in [("describe", "print architecture, FLOPs and parameters"),
                        ("init", "save a freshly initialized checkpoint"),
                        ("train", "train and save a checkpoint plus metrics CSV"),
                        ("eval", "evaluate a checkpoint on the test split")]:
        p = sub.add_parser(name, help=help_)
        _add_config_flags(p)
        if name == "init":
            p.add_argument("--calibrate", type=int, default=16, metavar="N",
                           help="probe images used to set running statistics (0 = none)")
        if name == "eval":
            p.add_argument("checkpoint_path", nargs="?", help="defaults to the config's checkpoint")

    p = sub.add_parser("fuse", help="fold normalization into convolutions")
    p.add_argument("checkpoint_path")
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("verify", help="compare unfused and fused checkpoints")
    p.add_argument("checkpoint_path")
    p.add_argument("fused_path")
    p.add_argument("--probes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=None)

    p = sub.add_parser("bench", help="throughput of unfused vs fused inference")
    p.add_argument("checkpoint_path")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--image-size", type=int, default=None)
    return parser


def run(argv=None, out=print) -> int:
    args = build_parser().parse_args(argv)
    if args.threads > 0:
        with threadpool_limits(limits=args.threads):
            return _dispatch(args, out)
    return _dispatch(args, out)


def _dispatch(args, out) -> int:
    c = args.command
    if c == "eval":
        path = args.checkpoint_path or resolve_config(args).checkpoint
        _, saved = load_checkpoint(path)
        cmd_eval(resolve_config(args, base=saved), path, out)
    elif c in ("describe", "init", "train"):
        cfg = resolve_config(args)
        if c == "describe":
            cmd_describe(cfg, out)
        elif c == "init":
            cmd_init(cfg, args.calibrate, out)
        elif c == "train":
            cmd_train(cfg, out)
    elif c == "fuse":
        cmd_fuse(args.checkpoint_path, args.output, out)
    elif c == "verify":
        cmd_verify(args.checkpoint_path, args.fused_path, args.probes, args.seed, args.tolerance, out)
    elif c == "bench":
        cmd_bench(args.checkpoint_path, args.batch, args.iters, args.warmup, args.image_size, out=out)
    return EXIT_OK


_ERRORS = [
    (FileNotFoundError, "missing_file", EXIT_MISSING_FILE),
    (CheckpointVersionError, "version_mismatch", EXIT_CHECKPOINT),
    (CheckpointError, "bad_checkpoint", EXIT_CHECKPOINT),
    (FusionError, "unfusable", EXIT_UNFUSABLE),
    (StateError, "state", EXIT_UNFUSABLE),
    (ConfigError, "config", EXIT_CONFIG),
    (CifarFormatError, "data_format", EXIT_DATA),
    (ToleranceExceeded, "tolerance", EXIT_TOLERANCE),
    (FloatingPointError, "numeric", EXIT_FAILURE),
]


def main(argv=None) -> int:
    try:
        return run(argv)
    except Exception as e:  # noqa: BLE001 - mapped to exit codes below
        for cls, kind, code in _ERRORS:
            if isinstance(e, cls):
                break
        else:
            kind, code = "runtime", EXIT_FAILURE
        msg = str(e).replace("\n", " ")
        print(f"error={kind} exit={code} message={msg!r}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
