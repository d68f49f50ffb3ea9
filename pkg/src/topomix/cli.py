"""Command-line driver: train / eval / oracle / analyze / verify.

Exit codes: 0 success, 1 a verify property failed, 2 bad input
(config, suite, checkpoint), 3 training fault.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import analysis as A
from . import env as E
from .domain import ConfigError, RunConfig
from .metrics import MetricsWriter
from .numerics import TrainingFault
from .trainer import Trainer

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_FAULT = 0, 1, 2, 3


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "suite", None) is not None:
        changes["suite"] = args.suite
    return cfg.replace(**changes) if changes else cfg


def _trainer_from_checkpoint(args) -> tuple:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    tr = Trainer.load(args.checkpoint)
    tasks = E.load_suite(args.suite) if args.suite else tr.tasks
    return tr, tasks


def cmd_train(args, out=sys.stdout) -> int:
    cfg = _config(args)
    if not args.out:
        raise ConfigError("--out is required")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    tr = Trainer(cfg)
    (out_dir / "config.txt").write_text(cfg.to_text())

    def checkpoint(t):
        t.save(out_dir / f"checkpoint_{t.episodes_done:06d}.aqmx")

    with MetricsWriter(out_dir / "metrics.csv") as w:
        tr.train(on_record=w.write, on_checkpoint=checkpoint)
    tr.save(out_dir / "final.aqmx")
    print(f"trained {tr.episodes_done} episodes, {tr.grad_steps} gradient steps -> {out_dir}",
          file=out)
    return EXIT_OK


def cmd_eval(args, out=sys.stdout) -> int:
    tr, tasks = _trainer_from_checkpoint(args)
    seed = args.seed if args.seed is not None else 0
    rep = A.evaluate(tr.agent, tasks, tr.cfg, adversary=args.adversary, seed=seed)
    print("metric,value", file=out)
    for line in rep.lines():
        print(line, file=out)
    return EXIT_OK


def cmd_oracle(args, out=sys.stdout) -> int:
    cfg = _config(args)
    tasks = E.load_suite(cfg.suite)
    if not tasks:
        raise ConfigError("task suite is empty")
    try:
        rows = A.oracle_rows(tasks, cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out.write(A.oracle_table(rows))
    return EXIT_OK


def cmd_analyze(args, out=sys.stdout) -> int:
    tr, tasks = _trainer_from_checkpoint(args)
    seed = args.seed if args.seed is not None else 0
    stats = A.topology_stats(A.greedy_episodes(tr.agent, tasks, tr.cfg, seed=seed))
    tables = A.topology_tables(stats)
    if args.out:
        d = Path(args.out)
        d.mkdir(parents=True, exist_ok=True)
        for name, text in tables.items():
            (d / f"{name}.csv").write_text(text)
    for name, text in tables.items():
        print(f"# {name}", file=out)
        out.write(text)
    return EXIT_OK


def cmd_verify(args, out=sys.stdout) -> int:
    results = A.run_checks(monotone=not args.no_abs)
    for r in results:
        print(r.line(), file=out)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"failed: {', '.join(failed)}", file=out)
        return EXIT_FAIL
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "oracle": cmd_oracle,
            "analyze": cmd_analyze, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="topomix", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train and write metrics.csv plus checkpoints")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--suite")
    t.add_argument("--out", required=True)

    for name, helptext in (("eval", "greedy evaluation of a checkpoint"),
                           ("analyze", "per-round action and topology tables")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--suite")
        s.add_argument("--seed", type=int)
        if name == "eval":
            s.add_argument("--adversary", action="store_true",
                           help="also inject one adversary per slot and report the drop")
        else:
            s.add_argument("--out", help="directory for the CSV tables")

    o = sub.add_parser("oracle", help="exhaustive open-loop optimum per task")
    o.add_argument("--config")
    o.add_argument("--suite")

    v = sub.add_parser("verify", help="monotonicity, IGM, gradient and determinism checks")
    v.add_argument("--no-abs", action="store_true",
                   help="fault injection: mix with signed weights (checks should fail)")
    return p


def main(argv=None, out=sys.stdout) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return COMMANDS[args.command](args, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingFault as exc:
        print(f"training fault: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
