"""
Command-line entry point: `wearmil <stage> ...` or `python -m wearmil <stage> ...`.

Exit codes: 0 success, 1 data or configuration error, 2 usage error.
"""
import argparse
import contextlib
import os
import sys

from . import __version__, orchestrator
from .errors import WearmilError
from .eval_harness import MODALITY_SETS
from .utils.config_utils import load_run_config

EXIT_OK = 0
EXIT_DATA_ERROR = 1
EXIT_USAGE = 2

HORIZON_CHOICES = ("m3", "m6", "both")


def _common_flags():
    """Flags accepted both before and after the subcommand."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file (overrides defaults and environment).")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="Run seed; every random draw derives from it.")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="Worker processes for per-patient and per-fold work.")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="Suppress progress output.")
    return common


def _modality_list(value):
    sets = [v.strip().lower() for v in value.split(",") if v.strip()]
    unknown = [s for s in sets if s not in MODALITY_SETS]
    if not sets or unknown:
        raise argparse.ArgumentTypeError(f"modality sets must be drawn from {', '.join(MODALITY_SETS)}")
    return sets


def build_parser():
    common = _common_flags()
    parser = argparse.ArgumentParser(
        prog="wearmil",
        description="Weakly-supervised perceived-stress estimation from wearable ECG and smartwatch records.",
        parents=[common],
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="<command>")
    sub.required = True

    p = sub.add_parser("simulate", parents=[common], help="Generate a synthetic cohort with a planted stress signal.")
    p.add_argument("--patients", type=int, help="Number of patients.")
    p.add_argument("--weeks", type=int, help="Follow-up length in weeks.")
    p.add_argument("--noise-sd", type=float, help="Standard deviation of the PSS noise.")
    p.add_argument("--out", required=True, help="Output directory for the cohort files.")

    p = sub.add_parser("transform", parents=[common], help="Render instance images from ECG or smartwatch records.")
    p.add_argument("source", choices=("ecg", "watch"), help="Which records to transform.")
    p.add_argument("--in", dest="in_dir", required=True, help="Input directory.")
    p.add_argument("--out", required=True, help="Output directory for instance files.")
    p.add_argument("--quality-threshold", type=float, help="ECG window quality gate in [0, 1].")
    p.add_argument("--png", action="store_true", help="Also write every raster as a PNG.")

    p = sub.add_parser("embed", parents=[common], help="Embed instance images with the gated dual encoder.")
    p.add_argument("--in", dest="in_dirs", nargs="+", required=True, help="One or more instance directories.")
    p.add_argument("--out", required=True, help="Output directory for per-patient embeddings.")

    p = sub.add_parser("bag", parents=[common], help="Assemble per-patient M3/M6 bags.")
    p.add_argument("--embeddings", required=True, help="Directory of per-patient embeddings.")
    p.add_argument("--assessments", required=True, help="Assessments CSV (patient_id,horizon,date,pss).")
    p.add_argument("--horizon", choices=HORIZON_CHOICES, default="both")
    p.add_argument("--cap", type=int, help="Cap every bag at this many instances (default: leave bags uncapped).")
    p.add_argument("--out", required=True, help="Output directory for bag containers.")

    p = sub.add_parser("train", parents=[common], help="Fit one model on all bags of a horizon.")
    p.add_argument("--bags", required=True, help="Bag directory.")
    p.add_argument("--horizon", choices=("m3", "m6"), default="m3")
    p.add_argument("--out", required=True, help="Output directory for checkpoint.bin and history.csv.")

    p = sub.add_parser("evaluate", parents=[common], help="Leave-one-subject-out evaluation.")
    p.add_argument("--bags", required=True, help="Bag directory.")
    p.add_argument("--horizon", choices=HORIZON_CHOICES, default="m3")
    p.add_argument("--modalities", type=_modality_list, default=["all"],
                   help="Comma-separated modality sets: all, ps, pe, se, p, s, e.")
    p.add_argument("--max-instances", type=int, help="Instance cap per bag.")
    p.add_argument("--out", required=True, help="Output directory for tables and figures.")

    p = sub.add_parser("ablate", parents=[common], help="Evaluate ALL and every modality pair.")
    p.add_argument("--bags", required=True, help="Bag directory.")
    p.add_argument("--horizon", choices=HORIZON_CHOICES, default="m3")
    p.add_argument("--with-single", action="store_true", help="Also evaluate single-modality sets.")
    p.add_argument("--max-instances", type=int, help="Instance cap per bag.")
    p.add_argument("--out", required=True, help="Output directory for tables and figures.")

    p = sub.add_parser("report", parents=[common], help="Re-render tables and figures from an evaluation directory.")
    p.add_argument("--run", required=True, help="Evaluation directory containing folds.csv.")
    p.add_argument("--out", help="Output directory (defaults to --run).")

    p = sub.add_parser("pipeline", parents=[common], help="Run simulate through evaluate end to end.")
    p.add_argument("--patients", type=int, help="Number of patients.")
    p.add_argument("--weeks", type=int, help="Follow-up length in weeks.")
    p.add_argument("--noise-sd", type=float, help="Standard deviation of the PSS noise.")
    p.add_argument("--horizon", choices=HORIZON_CHOICES, default="m3")
    p.add_argument("--modalities", type=_modality_list, default=["all"],
                   help="Comma-separated modality sets: all, ps, pe, se, p, s, e.")
    p.add_argument("--out", default=orchestrator.DEFAULT_PIPELINE_DIR, help="Root output directory.")
    return parser


def _overrides(args):
    """Nested config overrides from command-line flags; unset flags are left out."""
    overrides = {}
    for flag, section, key in (
        ("seed", None, "seed"),
        ("jobs", None, "jobs"),
        ("patients", "simulate", "n_patients"),
        ("weeks", "simulate", "weeks"),
        ("noise_sd", "simulate", "noise_sd"),
        ("quality_threshold", "ecg", "quality_threshold"),
        ("max_instances", "bags", "max_instances"),
        ("cap", "bags", "max_instances"),
    ):
        value = getattr(args, flag, None)
        if value is None:
            continue
        if section is None:
            overrides[key] = value
        else:
            overrides.setdefault(section, {})[key] = value
    if getattr(args, "png", False):
        section = "ecg" if args.source == "ecg" else "watch"
        overrides.setdefault(section, {})["write_png"] = True
    return overrides


def _dispatch(args, cfg, argv):
    verbose = not getattr(args, "quiet", False)
    command = args.command
    # Data preparation stages
    if command == "simulate":
        orchestrator.run_simulate(args.out, cfg, argv, verbose)
    elif command == "transform" and args.source == "ecg":
        orchestrator.run_transform_ecg(args.in_dir, args.out, cfg, cfg.jobs, argv, verbose)
    elif command == "transform":
        orchestrator.run_transform_watch(args.in_dir, args.out, cfg, cfg.jobs, argv, verbose)
    elif command == "embed":
        orchestrator.run_embed(args.in_dirs, args.out, cfg, cfg.jobs, argv, verbose)
    elif command == "bag":
        # Bags stay uncapped unless --cap was given
        cap = cfg.bags.max_instances if args.cap is not None else None
        orchestrator.run_bag(args.embeddings, args.assessments, args.out, cfg, args.horizon, argv, verbose, cap)
    # Model stages
    elif command == "train":
        orchestrator.run_train(args.bags, args.out, cfg, args.horizon, argv, verbose)
    elif command == "evaluate":
        orchestrator.run_evaluate(args.bags, args.out, cfg, args.horizon, tuple(args.modalities), cfg.jobs, argv,
                                  verbose=verbose)
    elif command == "ablate":
        orchestrator.run_ablate(args.bags, args.out, cfg, args.horizon, args.with_single, cfg.jobs, argv, verbose)
    elif command == "report":
        orchestrator.run_report(args.run, args.out, verbose)
    elif command == "pipeline":
        orchestrator.run_pipeline(args.out, cfg, args.horizon, tuple(args.modalities), cfg.jobs, argv, verbose)


def main(argv=None):
    """Parses `argv`, runs the stage and returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # --help and --version exit 0; anything else argparse rejects is a usage error
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    try:
        cfg = load_run_config(getattr(args, "config", None), _overrides(args))
        # --quiet silences progress; errors still go to stderr
        if getattr(args, "quiet", False):
            with open(os.devnull, "w") as devnull, contextlib.redirect_stdout(devnull):
                _dispatch(args, cfg, argv)
        else:
            _dispatch(args, cfg, argv)
    except (WearmilError, FileNotFoundError, ValueError) as e:
        print(f"wearmil {args.command}: error: {e}", file=sys.stderr)
        return EXIT_DATA_ERROR
    return EXIT_OK


def run():
    sys.exit(main())
