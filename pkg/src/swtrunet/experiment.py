"""End-to-end runs wired from a :class:`RunConfig`: cohort I/O, preprocessing,
cross-validation, evaluation tables and ablations."""

from __future__ import annotations

from dataclasses import asdict
from importlib import resources
from pathlib import Path

from .augment import Case
from .config import RunConfig, parse_lines
from .errors import ConfigError
from .lesions import analyze_patient, format_lesions_tsv, format_strata_tsv, stratify
from .metrics import format_reports_tsv, format_summary, patient_report
from .phantom import generate_cohort, read_cohort, write_cohort
from .preprocess import preprocess_pair
from .training import TrainResult, ablation_run, format_ablation_table, make_folds, train
from .volume import VoxelMask, read_volume, write_volume


def preset(name: str) -> RunConfig:
    """A packaged configuration, e.g. ``phantom_toy``."""
    ref = resources.files("swtrunet").joinpath("presets").joinpath(f"{name}.cfg")
    if not ref.is_file():
        raise ConfigError(f"unknown preset {name!r}")
    return RunConfig().update(parse_lines(ref.read_text(), name), name)


def make_phantoms(cfg: RunConfig, count: int | None = None):
    n = cfg["cohort.count"] if count is None else count
    return generate_cohort(n, cfg.build("phantom"))


def preprocess_cases(cohort, cfg: RunConfig) -> list[Case]:
    p = cfg.section("preprocess")
    return [Case(pid, *preprocess_pair(v, m, p["target_hw"], p["tiles"], p["clip_limit"]))
            for pid, v, m in cohort]


def write_cases(directory, cases) -> Path:
    return write_cohort(directory, [(c.patient_id, c.image, c.mask) for c in cases])


def load_cases(directory) -> list[Case]:
    return [Case(pid, v, m) for pid, v, m in read_cohort(directory)]


def cross_validate(cases, cfg: RunConfig, out_dir=None, folds=None, log_fn=None) -> TrainResult:
    tcfg = cfg.build("train")
    plan = make_folds([c.patient_id for c in cases], tcfg.fold_count, tcfg.seed)
    return train(cfg.build("model"), plan, cases, tcfg, cfg.build("augment"), out_dir=out_dir,
                 folds=folds, log_fn=log_fn)


def write_training_outputs(result: TrainResult, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fold_of = {r.patient_id: f.fold for f in result.folds for r in f.reports}
    paths = {
        "log": out / "train_log.tsv",
        "metrics": out / "metrics.tsv",
        "summary": out / "summary.txt",
    }
    paths["log"].write_text("".join(line + "\n" for f in result.folds for line in f.epoch_log))
    paths["metrics"].write_text(format_reports_tsv(result.reports, fold_of))
    paths["summary"].write_text(format_summary(result.per_fold()))
    pred_dir = out / "predictions"
    pred_dir.mkdir(exist_ok=True)
    for pid, mask in sorted(result.predictions.items()):
        write_volume(pred_dir / f"{pid}_pred.raw", mask)
    return paths


def find_prediction(pred_dir, pid: str) -> VoxelMask:
    pred_dir = Path(pred_dir)
    for name in (f"{pid}_pred.raw", f"{pid}_mask.raw"):
        if (pred_dir / name).exists():
            return read_volume(pred_dir / name)
    raise FileNotFoundError(f"no prediction for {pid} in {pred_dir}")


def evaluate_dirs(pred_dir, ref_dir):
    reports = []
    for pid, _, ref in read_cohort(ref_dir):
        reports.append(patient_report(find_prediction(pred_dir, pid), ref, pid))
    return reports


def analyze_dirs(pred_dir, ref_dir):
    stats = []
    for pid, _, ref in read_cohort(ref_dir):
        stats.extend(analyze_patient(find_prediction(pred_dir, pid), ref, pid))
    return stats, stratify(stats)


def analysis_tables(stats) -> tuple[str, str]:
    return format_lesions_tsv(stats), format_strata_tsv(stratify(stats))


def evaluation_tables(reports) -> tuple[str, str]:
    return format_reports_tsv(reports), format_summary({"all": reports})


def run_ablation(axis: str, cases, cfg: RunConfig, values=None, seeds=None, log_fn=None):
    ab = cfg.section("ablation")
    tcfg = cfg.build("train")
    if ab["epochs"]:
        tcfg = type(tcfg)(**{**asdict(tcfg), "epochs": ab["epochs"]})
    rows = ablation_run(axis, cfg.build("model"), tcfg, cases, cfg.build("augment"), values=values,
                        seeds=tuple(seeds if seeds is not None else ab["seeds"]),
                        n_val=ab["holdout"] or None, plan_seed=tcfg.seed, log_fn=log_fn)
    return rows, format_ablation_table(axis, rows)


def cohort_summary(cases) -> list[tuple[str, int, int]]:
    return [(c.patient_id, int(c.mask.liver.sum()), int(c.mask.lesion.sum())) for c in cases]
