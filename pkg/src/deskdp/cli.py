"""Command line entry point.

    deskdp train <config>
    deskdp bench-scaling <config> [--no-measure] [--out CSV]
    deskdp bench-memory <config> [--out CSV]
    deskdp nms {greedy,soft,weighted} <boxes> [--out FILE] ...
    deskdp resume <checkpoint> [--config FILE] [--force]

Set ``DESKDP_LOG_LEVEL`` (DEBUG, INFO, WARNING, ...) for log verbosity.
Failures print ``error[<category>]: <message>`` and exit nonzero.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from deskdp.errors import DeskDPError

LOG_ENV = "DESKDP_LOG_LEVEL"

EXIT_CODES = {
    "config": 2,
    "checkpoint": 3,
    "worker": 4,
    "parameter": 5,
    "io": 6,
}
EXIT_OTHER = 1


def _add_train(sub):
    p = sub.add_parser("train", help="train the reference model")
    p.add_argument("config")


def _add_bench(sub):
    p = sub.add_parser("bench-scaling", help="modelled and measured scaling efficiency")
    p.add_argument("config")
    p.add_argument("--no-measure", action="store_true", help="cost model only, skip wall-clock runs")
    p.add_argument("--steps", type=int, default=3, help="timed steps per K")
    p.add_argument("--out", help="write the table as CSV here")
    p = sub.add_parser("bench-memory", help="peak training memory per memory-saving mode")
    p.add_argument("config")
    p.add_argument("--out", help="write the table as CSV here")


def _add_nms(sub):
    p = sub.add_parser("nms", help="box post-processing on a CSV or JSON-lines file")
    algs = p.add_subparsers(dest="algorithm", required=True)
    for name in ("greedy", "soft", "weighted"):
        a = algs.add_parser(name)
        a.add_argument("file")
        a.add_argument("--out", help="output file (same format as input by extension); default stdout as CSV")
        a.add_argument("--iou", type=float, default=None, help="IoU threshold")
        if name == "soft":
            a.add_argument("--method", choices=("linear", "gaussian"), default="linear")
            a.add_argument("--sigma", type=float, default=None)
            a.add_argument("--floor", type=float, default=None)


def _add_resume(sub):
    p = sub.add_parser("resume", help="continue training from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--config", help="config to continue under; must match the checkpoint unless --force")
    p.add_argument("--force", action="store_true", help="ignore a config digest mismatch")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deskdp", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    _add_train(sub)
    _add_bench(sub)
    _add_nms(sub)
    _add_resume(sub)
    return parser


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _report(result) -> None:
    last = result.rows[-1] if result.rows else None
    if last is not None:
        print(f"step {last['step']}: loss {last['loss']:.6g}, scale {last['scale']:g}")
    print(f"metrics: {result.metrics_path}")
    print(f"checkpoint: {result.checkpoint_path}")


def _cmd_train(args) -> None:
    from deskdp.config import load_config
    from deskdp.trainer import train

    _report(train(load_config(args.config)))


def _cmd_resume(args) -> None:
    from deskdp.config import load_config
    from deskdp.trainer import resume

    cfg = load_config(args.config) if args.config else None
    _report(resume(args.checkpoint, cfg, force=args.force))


def _cmd_bench_scaling(args) -> None:
    from deskdp.bench import bench_scaling, fmt_table, to_csv
    from deskdp.config import load_config

    rows = bench_scaling(load_config(args.config), measure=not args.no_measure, steps=args.steps)
    print(fmt_table(rows))
    if args.out:
        _emit(to_csv(rows), args.out)


def _cmd_bench_memory(args) -> None:
    from deskdp.bench import bench_memory, fmt_table, to_csv
    from deskdp.config import load_config

    rows = bench_memory(load_config(args.config))
    print(fmt_table(rows))
    if args.out:
        _emit(to_csv(rows), args.out)


def _cmd_nms(args) -> None:
    from deskdp import postproc

    boxes = postproc.read_boxes(args.file)
    kw = {} if args.iou is None else {"iou_thresh": args.iou}
    if args.algorithm == "greedy":
        out = postproc.BoxSet(boxes[i] for i in postproc.nms_greedy(boxes, **kw))
    elif args.algorithm == "soft":
        if args.sigma is not None:
            kw["sigma"] = args.sigma
        if args.floor is not None:
            kw["score_floor"] = args.floor
        out = postproc.nms_soft(boxes, args.method, **kw)
    else:
        out = postproc.nms_weighted(boxes, **kw)
    if args.out:
        postproc.write_boxes(out, args.out)
    else:
        postproc.dump_boxes(out, sys.stdout)


COMMANDS = {
    "train": _cmd_train,
    "resume": _cmd_resume,
    "bench-scaling": _cmd_bench_scaling,
    "bench-memory": _cmd_bench_memory,
    "nms": _cmd_nms,
}


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except DeskDPError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, EXIT_OTHER)
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return EXIT_CODES["io"]
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
