"""Command-line interface: ``selfy <command> [--config PATH] [--threads N] [--seed S] [--out DIR]``."""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .backbone import init_net, load_checkpoint, net_forward, save_checkpoint, standardize_input
from .bench import rows_csv, run_bench
from .data import export_dataset, generate, train_test
from .gradsuite import OPS, broken_relu_case, format_table, run_suite
from .stss import stss_transform
from .tensor import save_vten
from .trainer import evaluate, robustness_csv, robustness_sweep, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise cfgmod.UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment config file")
    p.add_argument("--threads", type=int, default=None, help="BLAS/worker threads (default: all cores)")
    p.add_argument("--seed", type=int, default=None, help="overrides data.seed and train.seed")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="selfy", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gradcheck", help="finite-difference check of every registered op")
    _common(p)
    p.add_argument("--op", action="append", default=[], help=f"restrict to op(s): {', '.join(OPS)}")
    p.add_argument("--inject-bug", action="store_true", help="add a deliberately wrong gradient (negative control)")

    p = sub.add_parser("bench", help="time the STSS kernel variants; CSV to stdout")
    _common(p)

    p = sub.add_parser("train", help="train on synthetic data; writes checkpoint and metrics.csv")
    _common(p)

    p = sub.add_parser("eval", help="top-1 of a checkpoint on the synthetic test split")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help="default: OUT/checkpoint.vten")
    p.add_argument("--robustness", action="store_true", help="also write robustness.csv")

    p = sub.add_parser("dump-stss", help="write the STSS of one clip's block input as .vten")
    _common(p)
    p.add_argument("--index", type=int, default=0, help="clip index")
    p.add_argument("--checkpoint", type=Path, help="backbone weights (default: fresh init)")

    p = sub.add_parser("generate", help="export the synthetic dataset (.vten clips + labels.csv)")
    _common(p)
    p.add_argument("--split", choices=("train", "test"), default="train")

    p = sub.add_parser("sweep", help="train every combination of comma-separated config values")
    _common(p)

    p = sub.add_parser("config", help="print every config key with its default")
    return parser


def load_config(args) -> cfgmod.ExperimentConfig:
    values = cfgmod.parse_file(args.config) if getattr(args, "config", None) else {}
    for item in getattr(args, "set", []):
        key, sep, value = item.partition("=")
        if not sep:
            raise cfgmod.UsageError(f"--set expects KEY=VALUE, got {item!r}")
        values[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        values["data.seed"] = values["train.seed"] = str(args.seed)
    return values


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise cfgmod.UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _data(cfg):
    return train_test(cfg.data, cfg.train_count, cfg.test_count)


def run_training(cfg: cfgmod.ExperimentConfig, out: Path, log=print):
    """Train per ``cfg`` and write ``checkpoint.vten``, its manifest, ``metrics.csv`` and ``config.txt``."""
    out.mkdir(parents=True, exist_ok=True)
    tr, te = _data(cfg)
    res = train(cfg.net, tr, te, cfg.train, log=log)
    save_checkpoint(out / "checkpoint.vten", res.params)
    (out / "metrics.csv").write_text(res.metrics_csv())
    (out / "config.txt").write_text(cfg.to_text())
    return res, te


def cmd_gradcheck(args, values) -> int:
    cfg = cfgmod.build(values)
    extra = [broken_relu_case()] if args.inject_bug else []
    from .gradsuite import CASES

    ops = list(args.op) + (["broken_relu"] if args.inject_bug and args.op else [])
    try:
        results = run_suite(ops or None, tol=cfg.grad_tol, n_coords=cfg.grad_coords, cases=CASES + extra)
    except KeyError as e:
        raise cfgmod.UsageError(str(e.args[0])) from None
    print(format_table(results))
    failed = [r for r in results if not r.report.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed (tol {cfg.grad_tol:g})")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_bench(args, values) -> int:
    cfg = cfgmod.build(values).bench
    threads = args.threads or cfg.worker_threads()
    rows = run_bench(cfg.shape, cfg.window, cfg.tile, threads, cfg.repeats, cfg.seed)
    sys.stdout.write(rows_csv(rows))
    return EXIT_OK if len({r.checksum for r in rows}) == 1 else EXIT_FAIL


def cmd_train(args, values) -> int:
    cfg = cfgmod.build(values)
    res, _ = run_training(cfg, args.out)
    print(f"final test top-1 {res.metrics[-1]['test_acc']:.4f}" if res.metrics else "no epochs run")
    return EXIT_OK


def _load(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return load_checkpoint(path)


def cmd_eval(args, values) -> int:
    cfg = cfgmod.build(values)
    params = _load(args.checkpoint or args.out / "checkpoint.vten")
    _, te = _data(cfg)
    acc = evaluate(cfg.net, params, *te, batch=cfg.train.eval_batch)
    print(f"top-1 {acc!r}")
    if args.robustness:
        rows = robustness_sweep(cfg.net, params, te, cfg.kinds, cfg.severities, cfg.train.eval_batch)
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "robustness.csv").write_text(robustness_csv(rows))
        sys.stdout.write(robustness_csv(rows))
    return EXIT_OK


def block_input(cfg, params, clip: np.ndarray) -> np.ndarray:
    """Feature map entering the block (after the third stage) for one clip."""
    from .autodiff import Tape

    captured = {}
    net = cfg.net
    tape = Tape()
    pv = {k: tape.leaf(v) for k, v in params.items()}
    from . import functional as fn

    x = standardize_input(net, tape.leaf(clip[None]))
    for i, (_, stride) in enumerate(net.stages[:3]):
        if net.use_tsm:
            x = fn.temporal_shift(x, net.tsm_fraction)
        x = fn.relu(fn.bias_add(fn.conv3d(x, pv[f"stage{i}.k"], (1, stride, stride), (0, 1, 1)), pv[f"stage{i}.b"]))
    captured["v"] = x.value[0]
    return captured["v"]


def cmd_dump_stss(args, values) -> int:
    cfg = cfgmod.build(values)
    params = _load(args.checkpoint) if args.checkpoint else init_net(cfg.net, cfg.train.seed)
    clips, _ = generate(cfg.data, 1, start=args.index)
    window = cfg.net.selfy.window
    s = stss_transform(block_input(cfg, params, clips[0]), window).values
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / f"stss_{args.index:05d}.vten"
    save_vten(path, s)
    header = path.with_suffix(".txt")
    header.write_text(f"shape = {' '.join(map(str, s.shape))}\naxes = T X Y L U V\n" + window.describe())
    print(f"wrote {path} shape {s.shape}")
    return EXIT_OK


def cmd_generate(args, values) -> int:
    cfg = cfgmod.build(values)
    if args.split == "train":
        clips, labels = generate(cfg.data, cfg.train_count)
    else:
        clips, labels = generate(cfg.data, cfg.test_count, start=cfg.train_count)
    d = export_dataset(args.out / args.split, clips, labels)
    print(f"wrote {len(labels)} clips to {d}")
    return EXIT_OK


def cmd_sweep(args, values) -> int:
    base = cfgmod.resolve(values)
    runs = cfgmod.expand_sweep(base)
    configs = [cfgmod.build(r) for r in runs]  # validate everything before training anything
    args.out.mkdir(parents=True, exist_ok=True)
    summary = ["run,setting,final_test_acc"]
    for i, (run, cfg) in enumerate(zip(runs, configs)):
        label = cfgmod.sweep_label(run, base)
        print(f"[{i}] {label}")
        res, _ = run_training(cfg, args.out / f"run{i:03d}")
        acc = res.metrics[-1]["test_acc"] if res.metrics else float("nan")
        summary.append(f"{i},{label},{acc!r}")
    (args.out / "sweep.csv").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))
    return EXIT_OK


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
    "train": cmd_train,
    "eval": cmd_eval,
    "dump-stss": cmd_dump_stss,
    "generate": cmd_generate,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "config":
            sys.stdout.write(cfgmod.describe_fields())
            return EXIT_OK
        values = load_config(args)
        if args.command != "sweep":
            cfgmod.build(values)
        with _thread_limit(args.threads):
            return COMMANDS[args.command](args, values)
    except cfgmod.UsageError as e:
        print(f"selfy: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"selfy: error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
