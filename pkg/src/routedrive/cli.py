"""Command-line entry point.

Exit status: 0 on success, 1 on usage errors, 2 on data or format errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import world
from .checkpoint import load_checkpoint, save_checkpoint
from .config import DEFAULT_TEXT, RunConfig, load_config
from .errors import ConfigError, DataFormatError, RouteDriveError, VocabError
from .model import Model
from .training import evaluate, predict, run_schedule

ABLATIONS = ("shared-ffn", "decoupled", "single-expert", "regression-head")

log = logging.getLogger("routedrive")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="routedrive", description="Routed vision-language-action planner toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate synthetic driving samples")
    g.add_argument("--seed-start", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="run one or all training stages")
    t.add_argument("--stage", choices=["1", "2", "3", "all"], required=True)
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--ckpt-in")
    t.add_argument("--ckpt-out", required=True)
    t.add_argument("--log", help="write per-epoch loss records here")

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--euler-steps", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--report", required=True)

    r = sub.add_parser("predict", help="write decoded instructions and trajectories")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--euler-steps", type=int, default=10)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)

    a = sub.add_parser("ablate", help="train and compare ablation variants")
    a.add_argument("--variant", action="append", choices=ABLATIONS,
                   help="repeatable; defaults to every variant")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--eval-data", required=True)
    a.add_argument("--report", required=True)
    a.add_argument("--ckpt-dir", help="also save one checkpoint per variant here")
    a.add_argument("--baseline", action="store_true", help="include the unablated model")

    c = sub.add_parser("show-config", help="print the default configuration")
    c.set_defaults(command="show-config")
    return p


def _load_data(path: str) -> list[world.DrivingSample]:
    data = world.read_dataset(path)
    if not data:
        raise DataFormatError(f"{path}: dataset is empty")
    return data


def _cmd_gen_data(args) -> None:
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    world.write_dataset(world.generate(args.seed_start, args.count), args.out)


def _cmd_train(args) -> None:
    cfg = load_config(args.config)
    data = _load_data(args.data)
    if args.ckpt_in:
        model, vocab, _ = load_checkpoint(args.ckpt_in)
    else:
        model, vocab = Model(cfg.model), world.default_vocab(cfg.model.vocab)
    stages = (1, 2, 3) if args.stage == "all" else (int(args.stage),)
    history = run_schedule(model, data, cfg.train, stages)
    save_checkpoint(model, vocab, args.ckpt_out)
    if args.log:
        lines = [" ".join(f"{k}={v}" for k, v in rec.items()) for rec in history]
        Path(args.log).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _cmd_eval(args) -> None:
    model, _, _ = load_checkpoint(args.ckpt)
    report = evaluate(model, _load_data(args.data), euler_steps=args.euler_steps, seed=args.seed)
    Path(args.report).write_text(report.to_text(), encoding="utf-8")


def format_prediction(sample, decoded, waypoints, speeds, vocab) -> str:
    wp = ";".join(f"{x:.4f},{y:.4f}" for x, y in waypoints)
    sp = ",".join(f"{v:.4f}" for v in speeds)
    try:
        text = " ".join(vocab.decode(decoded))
    except VocabError:
        text = " ".join(str(i) for i in decoded)
    return f"seed={sample.seed}\tclass={sample.scenario_class}\tinstruction={text}\twaypoints={wp}\tspeeds={sp}"


def _cmd_predict(args) -> None:
    model, vocab, _ = load_checkpoint(args.ckpt)
    rows = predict(model, _load_data(args.data), euler_steps=args.euler_steps, seed=args.seed)
    with open(args.out, "w", encoding="utf-8") as fh:
        for sample, decoded, wp, sp in rows:
            fh.write(format_prediction(sample, decoded, wp, sp, vocab) + "\n")


def run_ablation(
    cfg: RunConfig, train_data, eval_data, variants: Sequence[str], ckpt_dir: str | None = None
) -> str:
    """Train each variant with the full schedule; return the comparison report."""
    lines = ["variant\tade\tfde\tspeed_mae\taccuracy"]
    sections = []
    for variant in variants:
        vcfg = cfg.with_variant(variant)
        model = Model(vcfg.model)
        run_schedule(model, train_data, vcfg.train)
        rep = evaluate(model, eval_data, euler_steps=vcfg.train.euler_steps, seed=vcfg.train.eval_seed)
        if ckpt_dir:
            Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, world.default_vocab(vcfg.model.vocab), Path(ckpt_dir) / f"{variant}.ckpt")
        lines.append(f"{variant}\t{rep.ade:.4f}\t{rep.fde:.4f}\t{rep.speed_mae:.4f}\t{rep.accuracy:.4f}")
        sections.append(f"[{variant}]\n{rep.to_text()}")
        log.info("ablation %s: %s", variant, lines[-1])
    return "\n".join(lines) + "\n\n" + "\n".join(sections)


def _cmd_ablate(args) -> None:
    cfg = load_config(args.config)
    variants = list(dict.fromkeys(args.variant or ABLATIONS))
    if args.baseline:
        variants = ["routed"] + variants
    text = run_ablation(cfg, _load_data(args.data), _load_data(args.eval_data), variants, args.ckpt_dir)
    Path(args.report).write_text(text, encoding="utf-8")


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "ablate": _cmd_ablate,
    "show-config": lambda args: sys.stdout.write(DEFAULT_TEXT),
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"routedrive: error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"routedrive: config error: {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, OSError) as exc:
        print(f"routedrive: data error: {exc}", file=sys.stderr)
        return 2
    except RouteDriveError as exc:
        print(f"routedrive: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
