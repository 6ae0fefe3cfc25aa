"""Command line entry point: ``cmbpipe {train,predict,evaluate,phantom,plot,config,catalog}``."""

from __future__ import annotations

import argparse
import logging
import sys

from .catalog import catalog_index
from .config import RunConfig
from .errors import PipelineError
from .phantom import PhantomSpec


def _config(args) -> RunConfig:
    if getattr(args, "manifest", None):
        from .pipeline import config_from_manifest

        cfg = config_from_manifest(args.manifest)
    elif args.config:
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig()
    changes = {}
    for key in ("data_root", "output_dir", "seed", "workers"):
        value = getattr(args, key, None)
        if value is not None:
            changes[key] = value
    if args.group is not None:
        changes["model_group"] = args.group
    return cfg.replace(**changes) if changes else cfg


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="run config file (key = value)")
    common.add_argument("--group", help="model group A or B")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--data-root", dest="data_root")
    common.add_argument("-o", "--output-dir", dest="output_dir")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cmbpipe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train detector and segmenter, derive threshold")
    p.add_argument("--manifest", help="re-run with the config recorded in a train manifest")

    p = sub.add_parser("predict", parents=[common], help="predict binary masks for subjects")
    p.add_argument("ids", nargs="*", help="subject ids (default: every subject of the group)")
    p.add_argument("--out", help="output file (single subject only)")

    p = sub.add_parser("evaluate", parents=[common], help="lesion-level evaluation of predictions")
    p.add_argument("ids", nargs="*")
    p.add_argument("--no-overlays", action="store_true")

    p = sub.add_parser("phantom", parents=[common], help="write synthetic subjects")
    p.add_argument("-n", type=int, default=8)
    p.add_argument("--slices", type=int, default=16)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--lesions", type=int, nargs=2, default=(3, 5), metavar=("MIN", "MAX"))
    p.add_argument("--confounders", type=int, default=3)

    p = sub.add_parser("plot", parents=[common], help="re-render confusion plots and overlays")
    p.add_argument("ids", nargs="*")
    p.add_argument("--slices", type=int, nargs="*")

    sub.add_parser("config", parents=[common], help="print the effective config")
    sub.add_parser("catalog", parents=[common], help="list subjects with group, shape and spacing")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from . import pipeline

    try:
        cfg = _config(args)
        if args.command == "config":
            sys.stdout.write(cfg.to_text())
        elif args.command == "catalog":
            sys.stdout.write(catalog_index(cfg.data_root, cfg.extra_routes))
        elif args.command == "phantom":
            spec = PhantomSpec(shape=(args.slices, args.size, args.size), lesion_count=tuple(args.lesions),
                               confounders=args.confounders)
            for d in pipeline.cmd_phantom(cfg, args.n, spec):
                print(d)
        elif args.command == "train":
            res = pipeline.cmd_train(cfg)
            for name, path in res.artifacts.items():
                print(f"{name}\t{path}")
        elif args.command == "predict":
            ids = args.ids or pipeline.group_subject_ids(cfg)
            if args.out:
                if len(ids) != 1:
                    raise ValueError("--out needs exactly one subject id")
                print(pipeline.cmd_predict(cfg, ids[0], args.out).path)
            else:
                for pred in pipeline.cmd_predict_many(cfg, ids):
                    print(pred.path)
        elif args.command == "evaluate":
            report = pipeline.cmd_evaluate(cfg, args.ids or None, overlays=not args.no_overlays)
            sys.stdout.write(report.subject_table())
            sys.stdout.write(report.summary_table())
        elif args.command == "plot":
            for path in pipeline.cmd_plot(cfg, args.ids, args.slices):
                print(path)
    except (PipelineError, ValueError, OSError) as exc:
        print(f"cmbpipe {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
