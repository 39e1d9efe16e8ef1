"""Command-line entry point: ``flowsr <subcommand> ...``.

Every failure prints one line ``error: <code>: <message>`` to stderr and
exits with a nonzero status.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from flowsr.errors import ConfigError, FlowSRError

EXIT_ERROR = 1
EXIT_USAGE = 2


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_config_flags(p: argparse.ArgumentParser, cls, group_title: str) -> None:
    group = p.add_argument_group(group_title)
    defaults = cls.__dataclass_fields__
    for f in fields(cls):
        flag = "--" + f.name.replace("_", "-")
        kind = type(defaults[f.name].default)
        if kind is bool:
            group.add_argument(flag, dest=f.name, default=None, metavar="on|off",
                               help=f"(default {defaults[f.name].default})")
        else:
            group.add_argument(flag, dest=f.name, type=kind, default=None,
                               help=f"(default {defaults[f.name].default})")


def _collect(cls, args: argparse.Namespace, file_values: Dict[str, str], prefix: str) -> dict:
    """Defaults, then the --config file, then explicit flags."""
    names = {f.name for f in fields(cls)}
    values: Dict[str, object] = {}
    for key, value in file_values.items():
        bare = key[len(prefix):] if key.startswith(prefix) else key
        if bare in names:
            values[bare] = value
    for name in names:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    return values


def _configs(args):
    from flowsr.model import NetworkConfig
    from flowsr.train import TrainConfig, read_kv

    file_values = read_kv(args.config) if args.config else {}
    known = {f.name for f in fields(NetworkConfig)} | {f.name for f in fields(TrainConfig)}
    unknown = [k for k in file_values if k.split(".", 1)[-1] not in known]
    if unknown:
        raise ConfigError(f"unknown key(s) in {args.config}: {', '.join(unknown)}")
    if args.profile == "full":
        net_base, train_base = NetworkConfig.full().to_dict(), vars(TrainConfig.full())
    else:
        net_base, train_base = NetworkConfig().to_dict(), vars(TrainConfig())
    net_vals = dict(net_base)
    net_vals.update(_collect(NetworkConfig, args, file_values, "net."))
    train_vals = dict(train_base)
    train_vals.update(_collect(TrainConfig, args, file_values, "train."))
    if args.conv is not None:
        net_vals["conv_variant"] = args.conv
    if args.qsm is not None:
        net_vals["qsm_enabled"] = args.qsm
    if args.no_augment:
        train_vals["augment"] = False
    net = NetworkConfig.from_dict({k: str(v) if isinstance(v, bool) else v for k, v in net_vals.items()})
    tcfg = TrainConfig.from_dict({k: str(v) if isinstance(v, bool) else v for k, v in train_vals.items()})
    return net, tcfg


# -- subcommands -----------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from flowsr.data import generate_dataset

    counts = {"train": args.train_count, "test": args.test_count}
    if args.val_count:
        counts["val"] = args.val_count
    root = generate_dataset(args.out, args.seed, counts, args.size, args.scales,
                            single_velocity=args.single_velocity, method=args.degradation)
    print(f"wrote {sum(counts.values())} samples x scales {args.scales} to {root}")
    return 0


def cmd_train(args) -> int:
    from flowsr.report import plot_loss_curve
    from flowsr.train import train

    net, tcfg = _configs(args)
    out = Path(args.out or tcfg.checkpoint_dir)
    echo = None if args.quiet else (lambda line: print(line, flush=True))
    result = train(tcfg, net, args.data, out_dir=out, resume=args.resume, log=echo)
    if result.losses:
        plot_loss_curve(result.losses, out / "loss.png")
    print(f"checkpoint {result.checkpoint} steps {len(result.losses)} seconds {result.seconds:.1f}")
    return 0


def cmd_eval(args) -> int:
    from flowsr.data import load_split
    from flowsr.report import format_table, plot_comparison, write_report
    from flowsr.train import evaluate, evaluate_checkpoint, load_checkpoint, predict

    if args.mode == "model":
        if not args.checkpoint:
            raise ConfigError("eval in model mode needs --checkpoint")
        report, _ = evaluate_checkpoint(args.checkpoint, args.data, args.split, use_ema=args.ema, limit=args.limit)
    else:
        samples = load_split(args.data, args.split, args.scale)
        if args.limit:
            samples = samples[: args.limit]
        report, _ = evaluate(samples, args.mode, label=f"{args.mode} x{args.scale} {args.split}")
    print(report.to_table(per_sample=not args.summary), end="")
    if args.out:
        paths = write_report(report, args.out, args.stem or f"eval_{args.mode}{'_ema' if args.ema else ''}")
        print(f"wrote {paths['txt']} {paths['csv']}")
        if args.mode == "model" and args.figure:
            ckpt = load_checkpoint(args.checkpoint)
            from flowsr.data import bicubic_upsample

            s = load_split(args.data, args.split, ckpt.net.scale)[0]
            pred = predict(s.lr, ckpt.tensors(args.ema), ckpt.net)
            fig = Path(args.out) / f"compare_{s.id}.png"
            plot_comparison(s.lr, bicubic_upsample(s.lr, s.scale), pred, s.hr, fig, title=s.id)
            print(f"wrote {fig}")
    return 0


def cmd_ablate(args) -> int:
    from flowsr.ablation import TABLES, run_ablation

    _, tcfg = _configs(args)
    base_net, _ = _configs(args)
    tables = args.tables or list(TABLES)
    result = run_ablation(tables, tcfg, base_net, args.data, args.out, variants=args.variants,
                          log=None if args.quiet else (lambda line: print(line, flush=True)))
    for name in tables:
        print(result.tables[name])
    return 0


def cmd_gradcheck(args) -> int:
    from flowsr.gradcheck_suite import run_suite

    results = run_suite(args.cases or None, seeds=range(args.seeds), log=print)
    failed = [r.name for r in results if not r.passed]
    total = sum(r.seconds for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} passed in {total:.1f}s")
    if failed:
        print(f"error: gradcheck-failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_ERROR
    return 0


def cmd_export_png(args) -> int:
    from flowsr.data import png_export
    from flowsr.fld import fld_read

    arr = fld_read(args.input)
    if args.clamp:
        arr = np.clip(arr, 0.0, 1.0)
    png_export(arr, args.output)
    print(f"wrote {args.output}")
    return 0


def _on_off(text: str) -> bool:
    low = text.lower()
    if low in ("on", "true", "1", "yes"):
        return True
    if low in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    from flowsr.model import NetworkConfig
    from flowsr.train import TrainConfig

    parser = argparse.ArgumentParser(prog="flowsr", description="Flow-image super-resolution at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic velocity-field dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train-count", type=int, default=64)
    g.add_argument("--test-count", type=int, default=16)
    g.add_argument("--val-count", type=int, default=0)
    g.add_argument("--size", type=int, default=128, help="HR side length (power of two)")
    g.add_argument("--scales", type=_int_list, default=[2], help="comma-separated, e.g. 2,4")
    g.add_argument("--single-velocity", action="store_true")
    g.add_argument("--degradation", choices=("box", "bicubic"), default="box")
    g.set_defaults(func=cmd_gen_data)

    def config_args(p):
        p.add_argument("--data", required=True, help="dataset root")
        p.add_argument("--config", help="key=value file; explicit flags override it")
        p.add_argument("--profile", choices=("desk", "full"), default="desk")
        p.add_argument("--conv", choices=("none", "ndc", "ldfc", "rdfc", "adfc", "dfc"), default=None,
                       help="shorthand for --conv-variant")
        p.add_argument("--qsm", type=_on_off, default=None, metavar="on|off", help="shorthand for --qsm-enabled")
        p.add_argument("--no-augment", action="store_true")
        p.add_argument("--quiet", action="store_true")
        _add_config_flags(p, NetworkConfig, "network")
        _add_config_flags(p, TrainConfig, "training")

    t = sub.add_parser("train", help="train a model")
    config_args(t)
    t.add_argument("--out", help="run directory (default: checkpoint_dir)")
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a reference mode")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--split", default="test")
    e.add_argument("--ema", action="store_true", help="use the EMA shadow weights")
    e.add_argument("--mode", choices=("model", "bicubic", "oracle"), default="model")
    e.add_argument("--scale", type=int, default=2, help="scale for bicubic/oracle modes")
    e.add_argument("--limit", type=int, default=0)
    e.add_argument("--summary", action="store_true", help="print only the mean row")
    e.add_argument("--out", help="directory for the .txt/.csv report (and figure)")
    e.add_argument("--stem")
    e.add_argument("--figure", action="store_true", help="also save a comparison panel")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and compare ablation variants")
    config_args(a)
    a.add_argument("--out", required=True)
    a.add_argument("--tables", type=lambda s: [v.strip() for v in s.split(",") if v.strip()],
                   help="subset of table2,table3,table4")
    a.add_argument("--variants", type=lambda s: [v.strip() for v in s.split(",") if v.strip()],
                   help="restrict to these row names")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    c.add_argument("--seeds", type=int, default=5)
    c.add_argument("cases", nargs="*", help="case names (default: all)")
    c.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("export-png", help="write an FLD1 [3, H, W] image as PNG")
    x.add_argument("input")
    x.add_argument("output")
    x.add_argument("--clamp", action="store_true", help="clip to [0, 1] first")
    x.set_defaults(func=cmd_export_png)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    try:
        return args.func(args)
    except FlowSRError as exc:
        print(f"error: {exc.code}: {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__.lower()}: {str(exc).splitlines()[0] if str(exc) else ''}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
