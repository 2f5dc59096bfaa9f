"""Command-line entry point: ``swtr-unet <command> [options] [key=value ...]``.

Commands: phantom-gen, preprocess, train, evaluate, analyze, ablate. Every run
writes ``effective_config.txt`` into its output directory; passing that file
back through ``--config`` reproduces the run. Failures print one JSON line on
stderr and exit with a code specific to the failure class.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import experiment as X
from .config import RunConfig, parse_overrides
from .errors import ConfigError, SwtrError

log = logging.getLogger("swtrunet")

EXIT_MISSING_FILE = 3
EXIT_INTERNAL = 1


def _config(args) -> RunConfig:
    """Defaults <- config file (or packaged preset) <- overrides <- --seed."""
    path = args.config
    if path is not None and not Path(path).exists() and not Path(path).suffix:
        cfg = X.preset(path)
        cfg.update(parse_overrides(args.overrides or []))
    else:
        cfg = RunConfig.load(path, args.overrides)
    if args.seed is not None:
        cfg.set_seed(args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"{what} directory not found: {p}")
    return p


def cmd_phantom_gen(args, cfg: RunConfig) -> None:
    if args.count is not None:
        cfg.update({"cohort.count": str(args.count)})
    out = _out(args)
    cfg.write_snapshot(out)
    cohort = X.make_phantoms(cfg)
    X.write_cohort(out, cohort, cfg.build("phantom"))
    log.info("wrote %d phantoms to %s", len(cohort), out)


def cmd_preprocess(args, cfg: RunConfig) -> None:
    src = _require_dir(args.input, "input")
    out = _out(args)
    cfg.write_snapshot(out)
    cases = X.preprocess_cases(X.read_cohort(src), cfg)
    X.write_cases(out, cases)
    log.info("preprocessed %d volumes into %s", len(cases), out)


def cmd_train(args, cfg: RunConfig) -> None:
    src = _require_dir(args.input, "input")
    out = _out(args)
    cfg.write_snapshot(out)
    cases = X.load_cases(src)
    folds = None if args.folds is None else [int(f) for f in args.folds.split(",")]
    result = X.cross_validate(cases, cfg, out_dir=out / "checkpoints", folds=folds, log_fn=log.info)
    X.write_training_outputs(result, out)
    sys.stdout.write((out / "summary.txt").read_text())


def cmd_evaluate(args, cfg: RunConfig) -> None:
    pred = _require_dir(args.pred, "prediction")
    ref = _require_dir(args.ref, "reference")
    out = _out(args)
    cfg.write_snapshot(out)
    per_patient, summary = X.evaluation_tables(X.evaluate_dirs(pred, ref))
    (out / "metrics.tsv").write_text(per_patient)
    (out / "summary.txt").write_text(summary)
    sys.stdout.write(summary)


def cmd_analyze(args, cfg: RunConfig) -> None:
    pred = _require_dir(args.pred, "prediction")
    ref = _require_dir(args.ref, "reference")
    out = _out(args)
    cfg.write_snapshot(out)
    stats, _ = X.analyze_dirs(pred, ref)
    lesions, strata = X.analysis_tables(stats)
    (out / "lesions.tsv").write_text(lesions)
    (out / "strata.tsv").write_text(strata)
    sys.stdout.write(strata)


def cmd_ablate(args, cfg: RunConfig) -> None:
    src = _require_dir(args.input, "input")
    out = _out(args)
    cfg.write_snapshot(out)
    values = None if args.values is None else [int(v) for v in args.values.split(",")]
    _, table = X.run_ablation(args.axis, X.load_cases(src), cfg, values=values, log_fn=log.info)
    (out / f"ablation_{args.axis}.tsv").write_text(table)
    sys.stdout.write(table)


COMMANDS = {
    "phantom-gen": cmd_phantom_gen,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file or packaged preset name (e.g. phantom_toy)")
    common.add_argument("--seed", type=int, help="seed for phantom, augmentation, model and training")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--workers", type=int, default=1, help="cap on numeric library threads")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")

    parser = argparse.ArgumentParser(prog="swtr-unet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("phantom-gen", parents=[common], help="generate a synthetic cohort")
    p.add_argument("--count", type=int, help="number of patients (cohort.count)")
    p = sub.add_parser("preprocess", parents=[common], help="preprocess a cohort directory")
    p.add_argument("--input", required=True)
    p = sub.add_parser("train", parents=[common], help="k-fold cross-validated training")
    p.add_argument("--input", required=True, help="preprocessed cohort directory")
    p.add_argument("--folds", help="comma-separated subset of folds to run")
    for name in ("evaluate", "analyze"):
        p = sub.add_parser(name, parents=[common], help=f"{name} predictions against references")
        p.add_argument("--pred", required=True, help="directory with <id>_pred.raw or <id>_mask.raw")
        p.add_argument("--ref", required=True, help="reference cohort directory")
    p = sub.add_parser("ablate", parents=[common], help="ablation over one axis")
    p.add_argument("--axis", required=True, choices=("skips", "layers", "train_cases"))
    p.add_argument("--input", required=True, help="preprocessed cohort directory")
    p.add_argument("--values", help="comma-separated arm values (default: all)")
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = _config(args)
        with threadpool_limits(limits=args.workers):
            COMMANDS[args.command](args, cfg)
    except SwtrError as exc:
        return _fail(exc.kind, str(exc), exc.exit_code)
    except FileNotFoundError as exc:
        return _fail("missing_file", str(exc), EXIT_MISSING_FILE)
    except (ValueError, OSError) as exc:
        return _fail("invalid_input", str(exc), EXIT_INTERNAL)
    return 0


if __name__ == "__main__":
    sys.exit(main())
