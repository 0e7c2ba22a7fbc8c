"""Command-line entry point.

Subcommands: ``train``, ``eval``, ``inspect``, ``gen-synthetic``,
``fetch-cifar10``.  Every training knob can come from ``--config FILE``
(sectioned key=value text) with individual flags overriding file values.

Exit codes: 0 success, 2 configuration error (including bad usage),
3 data error, 4 numerical divergence (non-finite loss abort).
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
import tarfile
import tempfile
import urllib.error
import urllib.request

from . import config as cfgmod
from .data import CIFAR_TAR_MD5, CIFAR_URL, gen_synthetic
from .errors import ConfigError, DataError, DivergenceError
from .harness import evaluate_checkpoint, inspect_checkpoint, run_trials, train
from .tensor import Prng

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

_FLAG_TYPES = {"bool": str, "int": int, "float": float, "str": str}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One override flag per ExperimentConfig field (default: unset)."""
    from dataclasses import fields

    for f in fields(cfgmod.ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "seed":
            continue  # shared flag, added separately
        parser.add_argument(flag, dest=f.name, default=None,
                            type=_FLAG_TYPES[f.type], metavar=f.type.upper())


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, metavar="PATH",
                        help="key=value config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--trials", type=int, default=1,
                        help="run seeds seed..seed+N-1 and summarize")
    # --out-dir is provided by the per-field flags on train; add it where
    # those flags are absent
    if not any(a.dest == "out_dir" for a in parser._actions):
        parser.add_argument("--out-dir", dest="out_dir", default=None)


def _gather_overrides(args: argparse.Namespace) -> dict:
    from dataclasses import fields

    over = {}
    for f in fields(cfgmod.ExperimentConfig):
        val = getattr(args, f.name, None)
        if val is None:
            continue
        over[f.name] = cfgmod._coerce(f.name, str(val)) if f.type == "bool" else val
    return over


def _resolve_config(args: argparse.Namespace) -> cfgmod.ExperimentConfig:
    file_values = cfgmod.parse_config_file(args.config) if args.config else None
    return cfgmod.make_config(file_values, _gather_overrides(args))


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    if args.trials < 1:
        raise ConfigError(f"--trials must be >= 1, got {args.trials}")
    if args.trials > 1:
        finals = run_trials(cfg, args.trials)
        for seed in sorted(finals):
            print(f"seed {seed}: final test acc {finals[seed]:.4f}")
        vals = list(finals.values())
        mean = sum(vals) / len(vals)
        print(f"mean over {len(vals)} trials: {mean:.4f} "
              f"(summary in {os.path.join(cfg.out_dir, 'summary.csv')})")
        return EXIT_OK
    result = train(cfg, resume_from=args.resume)
    last = result.rows[-1] if result.rows else None
    if last is not None:
        print(f"trained {last.step} steps / {last.epoch} epochs; "
              f"final train acc {last.train_acc:.4f}, "
              f"test acc {result.final_test_acc:.4f}")
    print(f"metrics: {os.path.join(result.out_dir, 'metrics.csv')}")
    print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    acc, loss = evaluate_checkpoint(args.checkpoint,
                                    _gather_overrides(args) or None)
    print(f"test accuracy {acc:.4f}  loss {loss:.6f}")
    return EXIT_OK


def _cmd_inspect(args: argparse.Namespace) -> int:
    sys.stdout.write(inspect_checkpoint(args.checkpoint))
    return EXIT_OK


def _cmd_gen_synthetic(args: argparse.Namespace) -> int:
    if args.size != 32:
        raise ConfigError(
            "gen-synthetic writes the fixed 3073-byte record format, which "
            f"implies 32x32 images; got --size {args.size}.  (In-memory "
            "synthetic runs accept any size via the [data] config section.)")
    if args.classes < 1 or args.classes > 10:
        raise ConfigError(
            f"--classes must be in [1, 10] for the record format, got {args.classes}")
    seed = args.seed if args.seed is not None else 0
    ds = gen_synthetic(args.classes, args.per_class, args.size, Prng(seed))
    with open(args.out, "wb") as f:
        f.write(ds.to_cifar_bytes())
    print(f"wrote {len(ds)} records ({args.classes} classes x "
          f"{args.per_class}) to {args.out}")
    return EXIT_OK


def _md5(path: str) -> str:
    h = hashlib.md5()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _cmd_fetch_cifar10(args: argparse.Namespace) -> int:
    out_dir = args.out_dir or "data"
    os.makedirs(out_dir, exist_ok=True)
    tar_path = os.path.join(out_dir, "cifar-10-binary.tar.gz")
    if not os.path.exists(tar_path):
        print(f"downloading {args.url} ...")
        try:
            with urllib.request.urlopen(args.url) as resp, \
                    tempfile.NamedTemporaryFile(dir=out_dir, delete=False) as tmp:
                while True:
                    chunk = resp.read(1 << 20)
                    if not chunk:
                        break
                    tmp.write(chunk)
        except (urllib.error.URLError, OSError) as e:
            raise DataError(f"download failed: {e}")
        os.replace(tmp.name, tar_path)
    digest = _md5(tar_path)
    if digest != args.md5:
        raise DataError(
            f"checksum mismatch for {tar_path}: got {digest}, expected {args.md5}")
    print(f"checksum ok ({digest}); extracting ...")
    with tarfile.open(tar_path, "r:gz") as tar:
        for member in tar.getmembers():
            if not member.name.endswith(".bin"):
                continue
            member.name = os.path.basename(member.name)
            tar.extract(member, out_dir)
    print(f"extracted binary batches into {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msrkit",
        description="Normalization-free convnet training with zero-mean "
                    "kernel initialization and gradient shaping.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training experiment")
    _add_config_flags(p_train)
    _common_flags(p_train)
    p_train.add_argument("--resume", default=None, metavar="CKPT",
                         help="continue from a checkpoint")
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    _add_config_flags(p_eval)
    _common_flags(p_eval)
    p_eval.set_defaults(func=_cmd_eval)

    p_inspect = sub.add_parser("inspect", help="diagnostics of a checkpoint")
    p_inspect.add_argument("--checkpoint", required=True)
    _common_flags(p_inspect)
    p_inspect.set_defaults(func=_cmd_inspect)

    p_gen = sub.add_parser("gen-synthetic",
                           help="write a synthetic dataset in record format")
    p_gen.add_argument("--classes", type=int, default=10)
    p_gen.add_argument("--per-class", type=int, default=100)
    p_gen.add_argument("--size", type=int, default=32)
    p_gen.add_argument("--out", required=True)
    _common_flags(p_gen)
    p_gen.set_defaults(func=_cmd_gen_synthetic)

    p_fetch = sub.add_parser("fetch-cifar10",
                             help="download and verify the binary dataset")
    p_fetch.add_argument("--url", default=CIFAR_URL)
    p_fetch.add_argument("--md5", default=CIFAR_TAR_MD5)
    _common_flags(p_fetch)
    p_fetch.set_defaults(func=_cmd_fetch_cifar10)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
