"""End-to-end orchestration shared by the CLI, the demos and the tests.

Run layout (all paths relative to the run directory)::

    data/                 generate: slides.csv, clinical.csv, ratings.csv,
                          dataset.json, masks/<slide_id>.csv
    mining/               mine: loss_round_<k>.csv, mining.json
    heatmaps/             infer: <slide_id>.lmap
    model.json            train
    grades.json           grade
    eval/                 eval: metrics.json, roc_gg<t>.csv
    survival/             survival: survival.json, km_gg<g>.csv
    renders/              render: <slide_id>.png
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import io
from .classifier import (DEFAULT_EXPONENTS, SyntheticOracle, SyntheticOracleConfig,
                         infer_slide, search_calibration)
from .core import GradeGroup, LikelihoodMap, SlideRecord
from .finegrained import finegrained_features, render_heatmap
from .grader import (BINARY_THRESHOLDS, GraderModel, KnnGrader, SlideGrade, binary_labels,
                     grade_map)
from .metrics import (DEFAULT_POPULATION_WEIGHTS, RatingTable, accuracy, adjusted_accuracy,
                      bootstrap_ci, cohens_kappa, cohort29_median, permutation_test_vs_cohort,
                      quantitation_mae, roc_auc)
from .sampling import DEFAULT_RATIOS, SamplerState, run_mining
from .survival import (SurvivalDataset, concordance_index, cox_cindex_of_fit, cox_fit,
                       hazard_ratio_gg3, kaplan_meier)
from .synth import SyntheticConfig, SyntheticDataset


FINEGRAINED_KEYS = ("pct_gp3", "pct_gp3.5", "pct_gp4", "pct_gp4.5", "pct_gp5")


class PreconditionError(RuntimeError):
    """Inputs exist and parse but cannot support the requested step."""


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class OracleSettings:
    noise_eps: float = 0.0
    concentration: Optional[float] = 1.0
    seed: int = 0


@dataclass(frozen=True)
class SamplerSettings:
    ratios: tuple = DEFAULT_RATIOS
    rounds: int = 3
    cadence: int = 1000
    seed: int = 0


@dataclass(frozen=True)
class EvalSettings:
    bootstrap_replicates: int = 1000
    bootstrap_seed: int = 0
    permutation_iterations: int = 5000
    permutation_seed: int = 0
    cohort_iterations: int = 999
    cohort_seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of a run. Each randomised step has its own seed."""

    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    oracle: OracleSettings = OracleSettings()
    sampler: SamplerSettings = SamplerSettings()
    calibration_exponents: tuple = DEFAULT_EXPONENTS
    k: int = 24
    eval: EvalSettings = EvalSettings()
    population_weights: tuple = DEFAULT_POPULATION_WEIGHTS
    render_background: str = "transparent"
    jobs: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synthetic"] = self.synthetic.to_dict()
        return _lists(d)

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "RunConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        nested = {"oracle": OracleSettings, "sampler": SamplerSettings, "eval": EvalSettings}
        kw = {}
        for k, v in d.items():
            if k == "synthetic":
                kw[k] = SyntheticConfig.from_dict(v or {})
            elif k in nested:
                kw[k] = _sub(nested[k], v or {})
            else:
                kw[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kw)

    def with_seed(self, seed: int) -> "RunConfig":
        """Derive every component seed from one master seed."""
        sub = np.random.SeedSequence(int(seed)).generate_state(6)
        s = [int(x) for x in sub]
        return replace(
            self,
            synthetic=replace(self.synthetic, seed=s[0]),
            oracle=replace(self.oracle, seed=s[1]),
            sampler=replace(self.sampler, seed=s[2]),
            eval=replace(self.eval, bootstrap_seed=s[3], permutation_seed=s[4], cohort_seed=s[5]),
        )

    def oracle_config(self) -> SyntheticOracleConfig:
        o = self.oracle
        return SyntheticOracleConfig(noise_eps=o.noise_eps, seed=o.seed,
                                     concentration=o.concentration)


def _sub(cls, d: dict):
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys {sorted(unknown)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _lists(obj):
    if isinstance(obj, dict):
        return {k: _lists(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_lists(v) for v in obj]
    return obj


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise io.SchemaError(f"{path}: invalid YAML ({exc})") from exc
    if doc is not None and not isinstance(doc, dict):
        raise io.SchemaError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(doc)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")


# --------------------------------------------------------------------------
# dataset persistence


def save_dataset(ds: SyntheticDataset, cfg: SyntheticConfig, root) -> Path:
    root = io.ensure_dir(root)
    masks = io.ensure_dir(root / "masks")
    for s in ds.slides:
        io.write_mask_csv(masks / f"{s.slide_id}.csv", s.mask)
    io.write_slide_index(root / "slides.csv", ds.slides, ds.splits)
    io.write_clinical_csv(root / "clinical.csv", ds.clinical)
    if ds.ratings is not None:
        io.write_ratings_csv(root / "ratings.csv", ds.ratings)
    io.write_json(root / "dataset.json", {"synthetic": _lists(cfg.to_dict())})
    return root


def load_dataset(root) -> SyntheticDataset:
    root = Path(root)
    index = root / "slides.csv"
    if not index.exists():
        raise FileNotFoundError(index)
    slides, splits = [], {}
    for row in io.read_slide_index(index):
        mask = io.read_mask_csv(root / "masks" / f"{row['slide_id']}.csv", row["stride_um"])
        slides.append(SlideRecord(row["slide_id"], mask, reference_gg=row["reference_gg"],
                                  reference_pcts=row["reference_pcts"],
                                  resolution_um_per_px=row["resolution_um_per_px"]))
        splits[row["slide_id"]] = row["split"]
    clinical_path = root / "clinical.csv"
    clinical = io.read_clinical_csv(clinical_path) if clinical_path.exists() else []
    ratings = None
    if (root / "ratings.csv").exists():
        val = [s for s in slides if splits[s.slide_id] == "val"]
        ratings = ratings_table(val, io.read_ratings_rows(root / "ratings.csv"))
    return SyntheticDataset(slides, clinical, splits, ratings)


def ratings_table(slides: Sequence[SlideRecord], rows, dls=None, dls_pcts=None) -> RatingTable:
    pos = {s.slide_id: i for i, s in enumerate(slides)}
    rows = [r for r in rows if r[0] in pos]
    refs = np.array([int(s.reference_gg) for s in slides])
    return RatingTable([s.slide_id for s in slides], refs,
                       np.zeros_like(refs) if dls is None else np.asarray(dls),
                       np.array([pos[r[0]] for r in rows], dtype=np.int64),
                       np.array([r[1] for r in rows], dtype=object),
                       np.array([r[2] for r in rows], dtype=object),
                       np.array([r[3] for r in rows], dtype=np.int64),
                       reference_pcts=np.array([s.reference_pcts for s in slides]),
                       dls_pcts=dls_pcts)


# --------------------------------------------------------------------------
# stages


def _infer_one(args) -> tuple[str, bytes]:
    oracle_cfg, slide = args
    return slide.slide_id, io.encode_likelihood_map(infer_slide(SyntheticOracle(oracle_cfg), slide))


def infer_maps(slides: Sequence[SlideRecord], oracle_cfg: SyntheticOracleConfig,
               jobs: int = 1) -> dict[str, LikelihoodMap]:
    """Heatmaps keyed by slide id. Workers return encoded maps and results
    are collected in slide-id order, so ``jobs`` never changes the output."""
    ordered = sorted(slides, key=lambda s: s.slide_id)
    tasks = [(oracle_cfg, s) for s in ordered]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            encoded = list(pool.map(_infer_one, tasks, chunksize=16))
    else:
        encoded = [_infer_one(t) for t in tasks]
    return {sid: io.decode_likelihood_map(b, sid) for sid, b in encoded}


def train_model(train_maps: Sequence[LikelihoodMap], train_labels,
                tune_maps: Sequence[LikelihoodMap], tune_labels,
                k: int = 24, exponents=DEFAULT_EXPONENTS) -> GraderModel:
    """Search calibration weights on the tuning set, then fit the rescaler
    and kNN on the training set under the winning weights."""
    if len(train_maps) < k:
        raise PreconditionError(f"k={k} exceeds the {len(train_maps)} training slides")
    grader = KnnGrader(train_maps, train_labels, k)
    weights, kappa = search_calibration(tune_maps, tune_labels, grader, exponents)
    return replace(grader.model(weights), tuning_kappa=kappa)


def grade_maps(maps: dict[str, LikelihoodMap], model: GraderModel) -> list[SlideGrade]:
    return [grade_map(maps[sid], model, sid) for sid in sorted(maps)]


def grade_record(g: SlideGrade, lmap: LikelihoodMap, model: GraderModel) -> dict:
    fine = finegrained_features(lmap.flat().astype(np.float64) * model.calibration.as_array())
    return {
        "slide_id": g.slide_id,
        "grade_group": int(g.grade_group),
        "features": {"pct_tumor": g.features.pct_tumor, "pct_gp3": g.features.pct_gp3,
                     "pct_gp4": g.features.pct_gp4, "pct_gp5": g.features.pct_gp5},
        "binary_scores": dict(sorted(g.binary_scores.items())),
        "finegrained": dict(zip(FINEGRAINED_KEYS, fine.as_array().tolist())),
    }


def evaluate(grades: Sequence[dict], slides: Sequence[SlideRecord],
             ratings_rows=None, settings: EvalSettings = EvalSettings(),
             population_weights=DEFAULT_POPULATION_WEIGHTS) -> tuple[dict, dict]:
    """Metrics report plus ROC curves keyed by threshold.

    ``grades`` and ``slides`` are matched by slide id; slides without a
    grade are a precondition failure.
    """
    by_id = {g["slide_id"]: g for g in grades}
    slides = sorted(slides, key=lambda s: s.slide_id)
    missing = [s.slide_id for s in slides if s.slide_id not in by_id]
    if missing:
        raise PreconditionError(f"{len(missing)} slides lack grades, e.g. {missing[0]}")
    ref = np.array([int(s.reference_gg) for s in slides])
    pred = np.array([by_id[s.slide_id]["grade_group"] for s in slides])
    ref_pcts = np.array([s.reference_pcts for s in slides], dtype=np.float64)
    pred_pcts = np.array([[by_id[s.slide_id]["features"][k] for k in ("pct_gp3", "pct_gp4", "pct_gp5")]
                          for s in slides])
    kappa, degenerate = cohens_kappa(pred, ref, return_flag=True)
    report = {
        "n_slides": len(slides),
        "accuracy": accuracy(pred, ref),
        "adjusted_accuracy": adjusted_accuracy(pred, ref, population_weights),
        "kappa": kappa,
        "kappa_degenerate": degenerate,
        "mae": {f"gp{p}": quantitation_mae(pred_pcts, ref_pcts, p) for p in (3, 4, 5)},
        "auc": {},
    }
    curves = {}
    for t in BINARY_THRESHOLDS:
        labels = binary_labels(ref, t)
        if labels.min() == labels.max():
            report["auc"][f"gg>={t}"] = None
            continue
        scores = np.array([by_id[s.slide_id]["binary_scores"][f"gg>={t}"] for s in slides])
        auc, curve = roc_auc(scores, labels)
        report["auc"][f"gg>={t}"] = auc
        curves[t] = curve
    both = np.stack([pred, ref], axis=1)
    report["accuracy_ci"] = list(bootstrap_ci(lambda x: accuracy(x[:, 0], x[:, 1]), both,
                                              settings.bootstrap_replicates, settings.bootstrap_seed))
    report["bootstrap"] = {"replicates": settings.bootstrap_replicates,
                           "seed": settings.bootstrap_seed, "interval": "percentile 2.5/97.5"}
    if ratings_rows:
        table = ratings_table(slides, ratings_rows, dls=pred)
        p, t_obs = permutation_test_vs_cohort(table, settings.permutation_iterations,
                                              settings.permutation_seed, return_statistic=True)
        diff = lambda tb: accuracy(tb.dls, tb.reference) - tb.mean_rater_accuracy()  # noqa: E731
        report["cohort"] = {
            "mean_rater_accuracy": table.mean_rater_accuracy(),
            "accuracy_difference": t_obs,
            "accuracy_difference_ci": list(bootstrap_ci(diff, table, settings.bootstrap_replicates,
                                                        settings.bootstrap_seed)),
            "permutation_p": p,
            "permutation": {"iterations": settings.permutation_iterations,
                            "seed": settings.permutation_seed},
        }
    return report, curves


def _cox_summary(x: np.ndarray, names: list, time, event) -> dict:
    if x.shape[1] == 0:
        return {"error": "every covariate is constant"}
    try:
        ds = SurvivalDataset(time, event, x)
        fit = cox_fit(ds, covariate_names=names)
    except ValueError as exc:
        return {"error": str(exc)}
    out = io.cox_to_dict(fit)
    out["c_index"] = cox_cindex_of_fit(fit, ds)
    return out


def survival_report(grades: Sequence[dict], slides: Sequence[SlideRecord], clinical,
                    ratings_rows=None, settings: EvalSettings = EvalSettings()
                    ) -> tuple[dict, dict]:
    """c-index and GG>=3 hazard ratio of the predicted grade groups, with
    Kaplan-Meier curves per predicted grade group. With ratings, the
    cohort-of-29 median pathologist c-index is reported alongside."""
    by_id = {g["slide_id"]: g for g in grades}
    clin = {c.slide_id: c for c in clinical}
    ids = sorted(sid for sid in by_id if sid in clin)
    if len(ids) < 2:
        raise PreconditionError("fewer than two graded slides have follow-up data")
    gg = np.array([by_id[i]["grade_group"] for i in ids])
    time = np.array([clin[i].time for i in ids])
    event = np.array([clin[i].event for i in ids])
    if not event.any():
        raise PreconditionError("no events in the follow-up data")
    report = {"n_slides": len(ids), "n_events": int(event.sum()),
              "c_index": concordance_index(gg, time, event)}
    try:
        hr, lo, hi = hazard_ratio_gg3(gg >= 3, time, event)
        finite = [v if math.isfinite(v) else None for v in (hr, lo, hi)]
        # a separated split (no events on one side) leaves the interval unbounded
        report["hazard_ratio_gg3"] = {"hr": finite[0], "ci": finite[1:],
                                      "bounded": None not in finite}
    except ValueError as exc:
        report["hazard_ratio_gg3"] = {"error": str(exc)}
    report["cox"] = {"grade_group": _cox_summary(gg[:, None].astype(float), ["grade_group"],
                                                 time, event)}
    if all("finegrained" in by_id[i] for i in ids):
        # %GP3 is the reference category, the other buckets enter as covariates
        names = [k for k in FINEGRAINED_KEYS if k != "pct_gp3"]
        x = np.array([[by_id[i]["finegrained"][k] for k in names] for i in ids])
        keep = np.ptp(x, axis=0) > 0
        report["cox"]["composition"] = _cox_summary(
            x[:, keep], [n for n, k in zip(names, keep) if k], time, event)
    curves = {}
    for g in range(1, 5):
        sel = gg == g
        if sel.any():
            curves[g] = kaplan_meier(time[sel], event[sel])
    if ratings_rows:
        sel = {s.slide_id: s for s in slides}
        table = ratings_table([sel[i] for i in ids], ratings_rows, dls=gg)
        c_of = lambda ratings: concordance_index(ratings, time, event)  # noqa: E731
        _, c_med = cohort29_median(table, c_of, settings.cohort_iterations, settings.cohort_seed)
        report["cohort29_median_c_index"] = c_med
        report["cohort29"] = {"iterations": settings.cohort_iterations, "seed": settings.cohort_seed}
    return report, curves


# --------------------------------------------------------------------------
# convenience for demos and tests


@dataclass
class PipelineResult:
    model: GraderModel
    maps: dict[str, LikelihoodMap]
    grades: list[dict]
    metrics: dict
    survival: dict


def run_in_memory(dataset: SyntheticDataset, cfg: RunConfig, with_stats: bool = False
                  ) -> PipelineResult:
    """infer -> train -> grade -> eval -> survival without touching disk.
    ``with_stats`` adds the bootstrap, permutation and cohort procedures."""
    maps = infer_maps(dataset.slides, cfg.oracle_config(), cfg.jobs)
    part = {name: dataset.split(name) for name in ("train", "tune", "val")}
    model = train_model([maps[s.slide_id] for s in part["train"]],
                        [int(s.reference_gg) for s in part["train"]],
                        [maps[s.slide_id] for s in part["tune"]],
                        [GradeGroup(int(s.reference_gg)) for s in part["tune"]],
                        cfg.k, cfg.calibration_exponents)
    val_maps = {s.slide_id: maps[s.slide_id] for s in part["val"]}
    grades = [grade_record(g, val_maps[g.slide_id], model) for g in grade_maps(val_maps, model)]
    settings = cfg.eval if with_stats else replace(cfg.eval, bootstrap_replicates=1)
    rows = None
    if with_stats and dataset.ratings is not None:
        t = dataset.ratings
        rows = [(t.slide_ids[s], r, g, int(v)) for s, r, g, v in zip(
            t.rating_slide.tolist(), t.rating_rater.tolist(), t.rating_subgroup.tolist(),
            t.rating_value.tolist())]
    metrics, _ = evaluate(grades, part["val"], rows, settings, cfg.population_weights)
    surv, _ = survival_report(grades, part["val"], dataset.clinical, rows, settings)
    return PipelineResult(model, maps, grades, metrics, surv)


def mine(slides: Sequence[SlideRecord], cfg: RunConfig):
    state = SamplerState.from_slides(slides, cfg.sampler.ratios, cfg.sampler.seed)
    return run_mining(state, SyntheticOracle(cfg.oracle_config()), slides,
                      cfg.sampler.rounds, cfg.sampler.cadence)


def render(lmap: LikelihoodMap, model: Optional[GraderModel], background: str):
    values = lmap.values.astype(np.float64)
    if model is not None:
        values = values * model.calibration.as_array()
    return render_heatmap(values, background)


def default_jobs() -> int:
    return max(1, min(4, os.cpu_count() or 1))
