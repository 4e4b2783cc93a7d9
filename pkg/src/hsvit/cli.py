"""Command line entry points: train, eval, itr, timeline, shapes."""

from __future__ import annotations

import argparse
import json
import sys

from .analytics import (
    HSVIT,
    MP,
    PP,
    STRATEGIES,
    CostModel,
    closed_form_itr,
    measured_itr,
    render_timeline,
    simulate_timeline,
    timeline_to_csv,
)
from .errors import HsvitError
from .executor import CONCURRENT, SEQUENTIAL_SIM
from .model import variant_config
from .training import build_dataset, evaluate, load_run_config, train

_MODE_ALIASES = {
    "seq": SEQUENTIAL_SIM,
    "conc": CONCURRENT,
    SEQUENTIAL_SIM: SEQUENTIAL_SIM,
    CONCURRENT: CONCURRENT,
}


def _add_cost_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--k", type=int, default=1, help="GPU / worker count")
    parser.add_argument("--s", type=int, default=1, help="microbatch count (pp)")
    parser.add_argument("--tf", type=float, default=0.0, help="forward time per unit")
    parser.add_argument("--tb", type=float, default=0.0, help="backward time per unit")
    parser.add_argument("--tf-sub", type=float, default=0.0,
                        help="submodule forward time (hsvit)")
    parser.add_argument("--tb-sub", type=float, default=0.0,
                        help="submodule backward time (hsvit)")
    parser.add_argument("--tf-agg", type=float, default=0.0,
                        help="aggregation forward time (hsvit)")
    parser.add_argument("--tb-agg", type=float, default=0.0,
                        help="aggregation backward time (hsvit)")


def _cost_from_args(args) -> CostModel:
    return CostModel(
        t_f=args.tf, t_b=args.tb, k=args.k, s=args.s,
        t_f_sub=args.tf_sub, t_b_sub=args.tb_sub,
        t_f_agg=args.tf_agg, t_b_agg=args.tb_agg,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hsvit",
        description="Grouped-attention vision model: training, evaluation, "
                    "and parallelism analytics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train from a JSON run config")
    p_train.add_argument("--config", required=True, help="path to run config JSON")
    p_train.add_argument("--workers", type=int, default=None,
                         help="override worker count")
    p_train.add_argument("--mode", choices=sorted(_MODE_ALIASES),
                         default=None, help="override execution mode")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p_eval.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p_eval.add_argument("--data", required=True,
                        help="path to a JSON dataset spec (same schema as the "
                             "run config's data section)")
    p_eval.add_argument("--workers", type=int, default=1)
    p_eval.add_argument("--mode", choices=sorted(_MODE_ALIASES), default="seq")

    p_itr = sub.add_parser("itr", help="closed-form and simulated idle/busy ratio")
    p_itr.add_argument("--strategy", required=True, choices=STRATEGIES)
    _add_cost_arguments(p_itr)

    p_tl = sub.add_parser("timeline", help="simulate a schedule and export CSV")
    p_tl.add_argument("--strategy", required=True, choices=STRATEGIES)
    p_tl.add_argument("--out", required=True, help="CSV output path")
    _add_cost_arguments(p_tl)

    p_shapes = sub.add_parser("shapes", help="per-block extents for a variant")
    p_shapes.add_argument("--variant", required=True,
                          choices=["c2a2", "c3a4", "c4a8"])
    p_shapes.add_argument("--input", required=True, type=int,
                          choices=[32, 64, 128])
    return parser


def _cmd_train(args) -> int:
    run = load_run_config(args.config)
    if args.workers is not None:
        run.workers = args.workers
    if args.mode is not None:
        run.mode = _MODE_ALIASES[args.mode]
    run.__post_init__()  # re-validate after overrides
    report = train(run)
    last = report.rows[-1]
    print(f"epochs {run.epochs}  steps {last['step']}")
    print(f"final loss {last['loss']:.6f}  accuracy {last['accuracy']:.4f}")
    print(f"checkpoint {report.checkpoint_path}")
    print(f"metrics {report.metrics_path}")
    return 0


def _cmd_eval(args) -> int:
    with open(args.data, "r", encoding="utf-8") as handle:
        spec = json.load(handle)
    dataset = build_dataset(spec)
    accuracy = evaluate(
        args.checkpoint, dataset,
        workers=args.workers, mode=_MODE_ALIASES[args.mode],
    )
    print(f"accuracy {accuracy:.4f}")
    return 0


def _cmd_itr(args) -> int:
    cost = _cost_from_args(args)
    closed = closed_form_itr(args.strategy, cost)
    timeline = simulate_timeline(args.strategy, cost)
    print(f"strategy {args.strategy}  K={cost.k}  S={cost.s}")
    print(f"closed-form itr {closed!r}")
    print(f"simulated itr {measured_itr(timeline)!r}")
    return 0


def _cmd_timeline(args) -> int:
    cost = _cost_from_args(args)
    timeline = simulate_timeline(args.strategy, cost)
    timeline.validate()
    with open(args.out, "w", encoding="utf-8") as handle:
        handle.write(timeline_to_csv(timeline))
    print(render_timeline(timeline))
    print(f"makespan {timeline.makespan!r}")
    print(f"wrote {args.out}")
    return 0


def _cmd_shapes(args) -> int:
    config = variant_config(args.variant, args.input)
    print(f"variant {config.variant}  input {args.input}x{args.input}")
    extents = config.block_extents()
    for i, ((h, w), kernels, pool) in enumerate(
        zip(extents, config.kernels_per_block, config.pool_factors)
    ):
        print(f"block {i + 1}: {kernels} kernels, pool {pool} -> {h}x{w}")
    print(f"embeddings {config.num_embeddings} "
          f"({config.num_attention_groups} groups x {config.tokens_per_group})")
    print(f"embedding dim {config.embedding_dim}")
    print(f"attention depth {config.attn_depth}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "itr": _cmd_itr,
    "timeline": _cmd_timeline,
    "shapes": _cmd_shapes,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except HsvitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
