"""Command-line entry points: pretrain, run, compare, score.

Exit codes: 0 success, 2 invalid config/arguments, 3 training failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import selection as sel
from .backbone import load_backbone_checkpoint, save_backbone_checkpoint
from .errors import (
    InvalidArgumentError,
    InvalidConfigError,
    TrainingFailureError,
)
from .harness import (
    compare_strategies,
    load_config,
    pretrain_for_seed,
    run_pipeline,
)
from .prompting import load_prompted_checkpoint
from .synth import load_pool

EXIT_OK = 0
EXIT_INVALID_CONFIG = 2
EXIT_TRAINING_FAILURE = 3


def _overrides(pairs):
    mapping = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise InvalidConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        mapping[key.strip()] = value.strip()
    return mapping


def _add_config_args(parser):
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--set", dest="overrides", action="append",
                        metavar="KEY=VALUE",
                        help="override a config key (repeatable)")


def cmd_pretrain(args):
    config = load_config(args.config, _overrides(args.overrides))
    seed = config.seeds[0] if args.seed is None else args.seed
    cache = config.cache_dir or Path(config.out_dir) / "checkpoints"
    frozen, path = pretrain_for_seed(config, seed, cache)
    if args.out:
        save_backbone_checkpoint(args.out, frozen)
        path = args.out
    print(f"pretrained checkpoint: {path}")
    print(f"held-out organ dice: {frozen.metadata.get('val_dice'):.4f}")
    return EXIT_OK


def cmd_run(args):
    config = load_config(args.config, _overrides(args.overrides))
    report = run_pipeline(config)
    n_ok, n_fail = len(report["seeds"]), len(report["failures"])
    print(f"run dir: {config.out_dir} ({n_ok} seeds ok, {n_fail} failed)")
    for seed, failure in report["failures"].items():
        print(f"  seed {seed} failed: {failure['error']}")
    if n_ok == 0 and n_fail > 0:
        return EXIT_TRAINING_FAILURE
    return EXIT_OK


def cmd_compare(args):
    result = compare_strategies(args.run_dir, run_dir=args.run_dir)
    for row in result["rows"]:
        if row["n_seeds"]:
            print(f"{row['strategy']:>14s}  grand mean "
                  f"{row['grand_mean_mean']:.4f} +/- {row['grand_mean_std']:.4f} "
                  f"({row['n_seeds']} seeds)")
        else:
            print(f"{row['strategy']:>14s}  (missing)")
    if result["gaps"]:
        print(f"gaps: {', '.join(result['gaps'])}")
    print(f"comparison table: {result['paths'].get('csv')}")
    return EXIT_OK


def cmd_score(args):
    frozen = load_backbone_checkpoint(args.backbone)
    model = load_prompted_checkpoint(args.model, frozen)
    pool = load_pool(args.pool_dir)
    records, degenerate = sel.score_unlabeled(model, pool, variant=args.strategy)
    chosen = sel.select_batch(records, args.budget) if args.budget else []
    sel.write_scores_csv(args.out, pool, records, chosen, args.strategy,
                         args.seed, step=args.step)
    if degenerate:
        print(f"degenerate score column(s): {degenerate}")
    print(f"scores written: {args.out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="promptseg",
        description="prompt tuning + selective labeling experiments on "
                    "synthetic lesion segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="pretrain and freeze a backbone")
    _add_config_args(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="optional explicit checkpoint path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("run", help="run the full selection/tuning pipeline")
    _add_config_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="summarize strategies from a run dir")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("score", help="score a saved pool with a checkpoint")
    p.add_argument("--backbone", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--pool-dir", required=True)
    p.add_argument("--strategy", default="tesla",
                   choices=("tesla", "tesla_no_sd", "tesla_no_sg"))
    p.add_argument("--budget", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InvalidConfigError, InvalidArgumentError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID_CONFIG
    except TrainingFailureError as exc:
        print(f"training failure: {exc} {exc.diagnostics}", file=sys.stderr)
        return EXIT_TRAINING_FAILURE


if __name__ == "__main__":
    sys.exit(main())
