"""Command-line entry point: ``elab <subcommand> [flags]``.

Exit statuses: 0 success, 2 usage error, 3 invalid configuration,
4 unreadable input, 5 training diverged, 6 output directory exists,
7 gradient check failed, 1 anything else.
"""

import argparse
import logging
import os
import sys

from . import __version__
from .gradcheck import gradcheck
from .manifest import FIELDS, ConfigError, RunManifest, read_config_file
from .pipeline import SWEEP_AXES, StageError, run, sweep

EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_GRADCHECK = 7

GRADCHECK_TOL = 1e-4
DIAGNOSTIC_COMMANDS = ("margins", "energy", "ece", "ood", "attack", "probe")


def _config_flags():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("run configuration (override --config values)")
    g.add_argument("--config", help="key = value config file or a manifest.json")
    for key, (_, default, help_text) in FIELDS.items():
        shown = "" if default in (None, "", ()) else f" [default: {_show(default)}]"
        g.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                       metavar="V", help=help_text + shown)
    return p


def _show(v):
    return ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)


def _output_flags():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--out", help="output directory (default runs/<run id>)")
    p.add_argument("--force", action="store_true", help="write into a non-empty --out")
    return p


def build_parser():
    parser = argparse.ArgumentParser(prog="elab", description="Encouraging-loss experiment runner")
    parser.add_argument("--version", action="version", version=f"elab {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    cfg, out = _config_flags(), _output_flags()

    sub.add_parser("train", parents=[cfg, out],
                   help="train a model and run the configured diagnostics")
    for name in DIAGNOSTIC_COMMANDS:
        p = sub.add_parser(name, parents=[cfg, out],
                           help=f"run the {name} diagnostic (trains first unless --model is given)")
        p.add_argument("--model", help="model.json from an earlier run")

    p = sub.add_parser("gradcheck", parents=[cfg],
                       help="compare analytic and finite-difference gradients")
    p.add_argument("--draws", type=int, default=50)

    p = sub.add_parser("sweep", parents=[cfg, out], help="one run per value of a parameter")
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--jobs", type=int, default=1, help="parallel sweep entries")
    return parser


class CliError(Exception):
    def __init__(self, stage, message, status):
        super().__init__(message)
        self.stage, self.status = stage, status


def load_manifest(args):
    raw = {}
    if args.config:
        try:
            raw.update(read_config_file(args.config))
        except OSError as exc:
            raise CliError("config", f"cannot read {args.config}: {exc.strerror}", EXIT_IO)
        except ValueError as exc:
            raise CliError("config", f"{args.config}: {exc}", EXIT_CONFIG)
    raw.update({k: getattr(args, k) for k in FIELDS if getattr(args, k) is not None})
    try:
        return RunManifest.from_config(raw)
    except ConfigError as exc:
        raise CliError("config", str(exc), EXIT_CONFIG)


def _print_metrics(metrics):
    for key in sorted(metrics):
        v = metrics[key]
        if isinstance(v, dict):
            for k2 in sorted(v):
                print(f"{key}.{k2}\t{v[k2]:.6g}")
        else:
            print(f"{key}\t{v:.6g}")


def cmd_gradcheck(args, manifest):
    spec = manifest.loss_spec()
    rep = gradcheck(spec, draws=args.draws, seed=manifest.seed)
    print(f"loss\t{spec.describe()}")
    print(f"logit_max_rel_dev\t{rep.logit_dev:.3e}")
    print(f"mlp_max_rel_dev\t{rep.mlp_dev:.3e}")
    ok = rep.max_dev < GRADCHECK_TOL
    print(f"max_rel_dev\t{rep.max_dev:.3e}\t{'PASS' if ok else 'FAIL'} (tol {GRADCHECK_TOL:g})")
    return 0 if ok else EXIT_GRADCHECK


def cmd_run(args, manifest):
    out = args.out or os.path.join("runs", manifest.run_id)
    extra = (args.command,) if args.command in DIAGNOSTIC_COMMANDS else ()
    bundle = run(manifest, out, force=args.force, model_path=getattr(args, "model", None),
                 extra_diagnostics=extra)
    print(f"run\t{manifest.run_id}\t{out}")
    _print_metrics(bundle.metrics)
    return 0


def cmd_sweep(args, manifest):
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    try:
        values = [int(v) if args.axis == "seed" else float(v) for v in values]
    except ValueError as exc:
        raise CliError("sweep", f"bad sweep value: {exc}", EXIT_CONFIG)
    if not values:
        raise CliError("sweep", "empty value list", EXIT_CONFIG)
    out = args.out or os.path.join("runs", f"sweep-{args.axis}-{manifest.run_id}")
    try:
        sweep(manifest, args.axis, values, out, force=args.force, jobs=args.jobs)
    except ConfigError as exc:
        raise CliError("sweep", str(exc), EXIT_CONFIG)
    print(f"sweep\t{args.axis}\t{len(values)} runs\t{os.path.join(out, 'comparison.csv')}")
    return 0


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        manifest = load_manifest(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(args, manifest)
        if args.command == "sweep":
            return cmd_sweep(args, manifest)
        return cmd_run(args, manifest)
    except CliError as exc:
        print(f"elab: error in stage '{exc.stage}': {exc}", file=sys.stderr)
        return exc.status
    except StageError as exc:
        print(f"elab: error in stage '{exc.stage}': {exc}", file=sys.stderr)
        return exc.status
    except OSError as exc:
        print(f"elab: error in stage 'output': {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
