"""Command line entry point.

Exit codes: 0 success, 2 configuration or contract error, 3 solver failure,
4 I/O error, 1 anything else raised by the toolkit.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from . import harness, plots, scenes, selftest
from .errors import MtlError

log = logging.getLogger("mtlkit")


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file; flags override it")
    p.add_argument("--mode", choices=harness.MODES)
    p.add_argument("--weighter", choices=harness.WEIGHTERS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset")
    p.add_argument("--output")
    p.add_argument("--d-max", dest="d_max", type=float)
    p.add_argument("--codes", type=int, help="normal codebook size K")
    p.add_argument("--classes", type=int, help="segmentation classes (default: from manifest)")
    p.add_argument("--base-width", dest="base_width", type=int)
    p.add_argument("--levels", type=int)


def _run_config(args) -> harness.ExperimentConfig:
    values = harness.load_config_file(args.config) if args.config else {}
    cfg = harness.make_config(values)
    overrides = {k: getattr(args, k) for k in (f.name for f in dataclasses.fields(cfg)) if getattr(args, k, None) is not None}
    return harness.make_config(overrides, cfg)


def _progress(cfg, row):
    log.info("%s %s seed %d epoch %s: %ss", cfg.mode, cfg.weighter if cfg.mode == "mtl" else "", cfg.seed,
             row["epoch"], row["seconds"])


def cmd_gen_data(args):
    if args.import_dir:
        m = scenes.import_rgbd_dir(args.import_dir, args.out, focal=args.focal, max_depth=args.max_depth,
                                   num_classes=args.classes, test_fraction=args.test_fraction)
    else:
        cfg = scenes.SceneConfig(height=args.height, width=args.width, num_classes=args.classes)
        m = scenes.build_dataset(cfg, args.train, args.test, args.seed, out_dir=args.out)
    print(f"wrote {m.n_train} train / {m.n_test} test samples to {args.out} "
          f"(manifest {scenes.manifest_hash(args.out)[:12]})")


def cmd_train(args):
    out = harness.run_experiment(_run_config(args), _progress)
    print(out / "report.json")


def cmd_baseline(args):
    out = harness.run_baseline_suite(_run_config(args), _progress)
    print(out / "report.json")


def cmd_protocol(args):
    summary = harness.run_protocol(_run_config(args), tuple(args.seeds), _progress)
    print(harness.ordering_text(summary), end="")


def cmd_compare(args):
    result = harness.compare(args.runs, args.baseline, args.out)
    print(result.to_text(), end="")


def cmd_plot(args):
    print(plots.plot(args.runs, args.quantity, args.out))


def cmd_visualize(args):
    print(plots.visualize(args.checkpoint, args.sample, args.out))


def cmd_selftest(args):
    if not selftest.run():
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtlkit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic stereo dataset or import RGB-D images")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--test", type=int, default=50)
    p.add_argument("--height", type=int, default=48)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--import-dir", help="directory of *_rgb.png / *_depth.png / *_labels.png triples")
    p.add_argument("--focal", type=float, default=64.0)
    p.add_argument("--max-depth", type=float, default=10.0)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_gen_data)

    for name, func, text in (("train", cmd_train, "train one configuration"),
                             ("baseline", cmd_baseline, "train the three single-task baselines"),
                             ("protocol", cmd_protocol, "baselines and all weighters over several seeds")):
        p = sub.add_parser(name, help=text)
        _add_run_options(p)
        if name == "protocol":
            p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
        p.set_defaults(func=func)

    p = sub.add_parser("compare", help="delta m of runs against a baseline")
    p.add_argument("runs", nargs="+")
    p.add_argument("--baseline", required=True)
    p.add_argument("--out", help="write <out>.csv and <out>.txt")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("plot", help="SVG curve of one CSV column over epochs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--quantity", default="seg_loss", choices=sorted(plots.QUANTITIES))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("visualize", help="PPM of input and predicted labels, depth and normals")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", required=True, help="a stored .gbs sample")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("selftest", help="quick internal consistency checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args) or 0
    except MtlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
