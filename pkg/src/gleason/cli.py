"""Command-line entry point: ``gleason <command> [options]``.

Commands share a run directory (``--out``); later steps read what earlier
steps wrote there unless pointed elsewhere. On success a JSON summary is
printed on stdout. On failure a JSON object ``{"error", "message",
"exit_code"}`` goes to stderr and the process exits with:

  0  success
  2  usage error (bad flags or config values)
  3  missing input file
  4  schema violation in an input file
  5  precondition failure (inputs valid but unusable for this step)
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io
from . import pipeline as pl
from .core import GradeGroup
from .synth import GenerationError, synth_generate

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_SCHEMA, EXIT_PRECONDITION = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int):
        super().__init__(message)
        self.kind, self.code = kind, code


def _config(args) -> pl.RunConfig:
    if args.config is not None:
        if not Path(args.config).exists():
            raise FileNotFoundError(args.config)
        cfg = pl.load_config(args.config)
    else:
        cfg = pl.RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.jobs is not None:
        cfg = replace(cfg, jobs=args.jobs)
    return cfg


def _path(value: Optional[str], default: Path) -> Path:
    return Path(value) if value is not None else default


def _need(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(str(path))
    return path


def _load_maps(root: Path, ids: Sequence[str]) -> dict:
    return {sid: io.read_likelihood_map(_need(root / f"{sid}.lmap")) for sid in sorted(ids)}


def _ratings_rows(data: Path):
    path = data / "ratings.csv"
    return io.read_ratings_rows(path) if path.exists() else None


# --------------------------------------------------------------------------
# commands


def cmd_generate(args, cfg: pl.RunConfig, out: Path) -> dict:
    ds = synth_generate(cfg.synthetic)
    root = pl.save_dataset(ds, cfg.synthetic, out / "data")
    pl.dump_config(cfg, out / "config.yaml")
    counts = {name: len(ds.split(name)) for name in ("train", "tune", "val")}
    return {"data": str(root), "slides": counts}


def cmd_mine(args, cfg, out) -> dict:
    ds = pl.load_dataset(_path(args.data, out / "data"))
    train = ds.split("train")
    if not train:
        raise pl.PreconditionError("dataset has no training slides")
    report = pl.mine(train, cfg)
    root = io.ensure_dir(out / "mining")
    for r, log in enumerate(report.loss_logs, start=1):
        io.write_loss_csv(root / f"loss_round_{r}.csv", log)
    summary = {"rounds": report.rounds, "draws_per_category": report.draws_per_category.tolist(),
               "mean_loss": [float(np.mean([x.loss for x in log])) for log in report.loss_logs]}
    io.write_json(root / "mining.json", summary)
    return summary


def cmd_infer(args, cfg, out) -> dict:
    ds = pl.load_dataset(_path(args.data, out / "data"))
    slides = ds.slides if args.split == "all" else ds.split(args.split)
    maps = pl.infer_maps(slides, cfg.oracle_config(), cfg.jobs)
    root = io.ensure_dir(out / "heatmaps")
    for sid, m in maps.items():
        io.write_likelihood_map(root / f"{sid}.lmap", m)
    return {"heatmaps": str(root), "slides": len(maps)}


def cmd_train(args, cfg, out) -> dict:
    ds = pl.load_dataset(_path(args.data, out / "data"))
    hm = _path(args.heatmaps, out / "heatmaps")
    train, tune = ds.split("train"), ds.split("tune")
    if not train or not tune:
        raise pl.PreconditionError("training needs non-empty train and tune splits")
    maps = _load_maps(hm, [s.slide_id for s in train + tune])
    model = pl.train_model([maps[s.slide_id] for s in train], [int(s.reference_gg) for s in train],
                           [maps[s.slide_id] for s in tune],
                           [GradeGroup(int(s.reference_gg)) for s in tune],
                           cfg.k, cfg.calibration_exponents)
    io.write_model(out / "model.json", model)
    return {"model": str(out / "model.json"), "calibration": list(model.calibration.w),
            "tuning_kappa": model.tuning_kappa}


def cmd_grade(args, cfg, out) -> dict:
    ds = pl.load_dataset(_path(args.data, out / "data"))
    model = io.read_model(_need(_path(args.model, out / "model.json")))
    slides = ds.slides if args.split == "all" else ds.split(args.split)
    maps = _load_maps(_path(args.heatmaps, out / "heatmaps"), [s.slide_id for s in slides])
    grades = [pl.grade_record(g, maps[g.slide_id], model) for g in pl.grade_maps(maps, model)]
    io.write_json(out / "grades.json", {"split": args.split, "grades": grades})
    hist = np.bincount([g["grade_group"] for g in grades], minlength=5)[1:]
    return {"grades": str(out / "grades.json"), "grade_group_counts": hist.tolist()}


def _read_grades(path: Path) -> list[dict]:
    doc = io.read_json(_need(path))
    try:
        grades = doc["grades"]
        for g in grades:
            g["slide_id"], int(g["grade_group"]), g["features"], g["binary_scores"]
    except (KeyError, TypeError) as exc:
        raise io.SchemaError(f"{path}: malformed grades document ({exc})") from exc
    return grades


def cmd_eval(args, cfg, out) -> dict:
    data = _path(args.data, out / "data")
    ds = pl.load_dataset(data)
    grades = _read_grades(_path(args.grades, out / "grades.json"))
    graded = {g["slide_id"] for g in grades}
    slides = [s for s in ds.slides if s.slide_id in graded]
    if not slides:
        raise pl.PreconditionError("no graded slide belongs to the dataset")
    rows = None if args.no_cohort else _ratings_rows(data)
    report, curves = pl.evaluate(grades, slides, rows, cfg.eval, cfg.population_weights)
    root = io.ensure_dir(out / "eval")
    io.write_json(root / "metrics.json", report)
    for t, curve in curves.items():
        io.write_roc_csv(root / f"roc_gg{t}.csv", curve)
    return {k: report[k] for k in ("accuracy", "kappa", "auc")}


def cmd_survival(args, cfg, out) -> dict:
    data = _path(args.data, out / "data")
    ds = pl.load_dataset(data)
    grades = _read_grades(_path(args.grades, out / "grades.json"))
    _need(data / "clinical.csv")
    rows = _ratings_rows(data) if args.cohort29 else None
    if args.cohort29 and rows is None:
        raise pl.PreconditionError("--cohort29 needs ratings.csv in the dataset")
    report, curves = pl.survival_report(grades, ds.slides, ds.clinical, rows, cfg.eval)
    root = io.ensure_dir(out / "survival")
    io.write_json(root / "survival.json", report)
    for g, curve in curves.items():
        io.write_km_csv(root / f"km_gg{g}.csv", curve)
    return report


def cmd_render(args, cfg, out) -> dict:
    hm = _path(args.heatmaps, out / "heatmaps")
    if not hm.is_dir():
        raise FileNotFoundError(str(hm))
    model_path = _path(args.model, out / "model.json")
    model = io.read_model(model_path) if model_path.exists() else None
    ids = args.slides or sorted(p.stem for p in hm.glob("*.lmap"))
    background = args.background or cfg.render_background
    root = io.ensure_dir(out / "renders")
    for sid in sorted(ids):
        lmap = io.read_likelihood_map(_need(hm / f"{sid}.lmap"))
        io.write_png(root / f"{sid}.png", pl.render(lmap, model, background))
    return {"renders": str(root), "slides": len(ids), "calibrated": model is not None}


COMMANDS = {
    "generate": (cmd_generate, "synthesise a dataset (masks, references, follow-up, ratings)"),
    "mine": (cmd_mine, "run hard-negative mining rounds and write per-patch loss CSVs"),
    "infer": (cmd_infer, "write orientation-ensembled heatmaps"),
    "train": (cmd_train, "search calibration weights and fit the kNN grader"),
    "grade": (cmd_grade, "grade slides and write per-slide features"),
    "eval": (cmd_eval, "accuracy, kappa, MAE, AUC, bootstrap CIs, permutation test"),
    "survival": (cmd_survival, "c-index, Kaplan-Meier curves and Cox hazard ratios"),
    "render": (cmd_render, "fine-grained pattern heatmaps as PNG"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="master seed; derives every component seed")
    common.add_argument("--jobs", type=int, help="worker processes for per-slide work")
    common.add_argument("--out", default="run", help="run directory (default: ./run)")
    parser = _Parser(prog="gleason", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = {name: sub.add_parser(name, parents=[common], help=text, description=text)
         for name, (_, text) in COMMANDS.items()}
    for name in ("mine", "infer", "train", "grade", "eval", "survival"):
        p[name].add_argument("--data", help="dataset directory (default: <out>/data)")
    for name in ("train", "grade", "render"):
        p[name].add_argument("--heatmaps", help="heatmap directory (default: <out>/heatmaps)")
    for name in ("grade", "render"):
        p[name].add_argument("--model", help="model JSON (default: <out>/model.json)")
    for name in ("eval", "survival"):
        p[name].add_argument("--grades", help="grades JSON (default: <out>/grades.json)")
    p["infer"].add_argument("--split", default="all", choices=["all", "train", "tune", "val"])
    p["grade"].add_argument("--split", default="val", choices=["all", "train", "tune", "val"])
    p["eval"].add_argument("--no-cohort", action="store_true",
                           help="skip the pathologist-cohort comparison")
    p["survival"].add_argument("--cohort29", action="store_true",
                               help="also report the cohort-of-29 median pathologist c-index")
    p["render"].add_argument("--slides", nargs="*", help="slide ids (default: all heatmaps)")
    p["render"].add_argument("--background", choices=["transparent", "white"])
    return parser


def run(argv: Optional[Sequence[str]] = None) -> dict:
    args = build_parser().parse_args(argv)
    if args.jobs is not None and args.jobs < 1:
        raise CliError("usage", "--jobs must be at least 1", EXIT_USAGE)
    try:
        cfg = _config(args)
    except io.SchemaError:
        raise
    except (ValueError, TypeError) as exc:
        raise CliError("usage", f"invalid configuration: {exc}", EXIT_USAGE) from exc
    out = io.ensure_dir(args.out)
    return COMMANDS[args.command][0](args, cfg, out)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        result = run(argv)
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.code)
    except FileNotFoundError as exc:
        return _fail("missing_file", str(exc.filename or exc), EXIT_MISSING)
    except io.SchemaError as exc:
        return _fail("schema", str(exc), EXIT_SCHEMA)
    except (pl.PreconditionError, GenerationError) as exc:
        return _fail("precondition", str(exc), EXIT_PRECONDITION)
    print(json.dumps(result, sort_keys=True, default=str))
    return EXIT_OK


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}, sort_keys=True),
          file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
