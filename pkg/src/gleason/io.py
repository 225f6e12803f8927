"""On-disk formats.

Masks are CSV grids of integer label codes. Heatmaps are a single JSON
header line followed by row-major little-endian float32 quads. Tabular
outputs are CSV and structured outputs JSON; floats are written with
``repr`` so every reader gets back the exact value that was written.
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .classifier import CalibrationWeights
from .core import ClinicalRecord, GradeGroup, LabelMask, LikelihoodMap, SlideRecord
from .grader import FeatureRescaler, GraderModel
from .metrics import RatingTable
from .sampling import LossRecord
from .survival import CoxFit, KaplanMeierCurve

MODEL_FORMAT = "gleason-grader/1"
HEATMAP_FORMAT = "gleason-heatmap/1"


class SchemaError(ValueError):
    """A file exists but does not match its expected layout."""


def _open_text(path, mode: str):
    return open(path, mode, newline="", encoding="utf-8")


def write_json(path, obj) -> None:
    """Deterministic JSON: sorted keys, two-space indent, trailing newline."""
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc


def _float(x: float) -> str:
    return repr(float(x))


# --------------------------------------------------------------------------
# masks and heatmaps


def write_mask_csv(path, mask: LabelMask) -> None:
    with _open_text(path, "w") as fh:
        csv.writer(fh, lineterminator="\n").writerows(mask.values.tolist())


def read_mask_csv(path, stride_um: float = 32.0) -> LabelMask:
    with _open_text(path, "r") as fh:
        rows = [r for r in csv.reader(fh) if r]
    try:
        codes = np.array([[int(v) for v in r] for r in rows], dtype=np.int16)
    except ValueError as exc:
        raise SchemaError(f"{path}: non-integer label code") from exc
    if codes.ndim != 2 or codes.size == 0:
        raise SchemaError(f"{path}: ragged or empty label grid")
    try:
        return LabelMask(codes, stride_um)
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from exc


def encode_likelihood_map(lmap: LikelihoodMap) -> bytes:
    header = {"format": HEATMAP_FORMAT, "rows": lmap.rows, "cols": lmap.cols,
              "channels": 4, "dtype": "<f4", "stride_um": float(lmap.stride_um)}
    body = np.ascontiguousarray(lmap.values, dtype="<f4").tobytes()
    return json.dumps(header, sort_keys=True).encode() + b"\n" + body


def decode_likelihood_map(data: bytes, name: str = "<bytes>") -> LikelihoodMap:
    head, sep, body = data.partition(b"\n")
    if not sep:
        raise SchemaError(f"{name}: missing heatmap header")
    try:
        header = json.loads(head)
        rows, cols = int(header["rows"]), int(header["cols"])
        stride = float(header["stride_um"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{name}: bad heatmap header") from exc
    if header.get("format") != HEATMAP_FORMAT or header.get("dtype") != "<f4":
        raise SchemaError(f"{name}: unsupported heatmap format")
    if len(body) != rows * cols * 4 * 4:
        raise SchemaError(f"{name}: expected {rows * cols * 16} payload bytes, got {len(body)}")
    values = np.frombuffer(body, dtype="<f4").reshape(rows, cols, 4)
    return LikelihoodMap(values.astype(np.float32), stride, check=False)


def write_likelihood_map(path, lmap: LikelihoodMap) -> None:
    Path(path).write_bytes(encode_likelihood_map(lmap))


def read_likelihood_map(path) -> LikelihoodMap:
    return decode_likelihood_map(Path(path).read_bytes(), str(path))


# --------------------------------------------------------------------------
# tables


def _read_rows(path, required: Sequence[str]) -> list[dict]:
    with _open_text(path, "r") as fh:
        reader = csv.DictReader(fh)
        missing = set(required) - set(reader.fieldnames or [])
        if missing:
            raise SchemaError(f"{path}: missing columns {sorted(missing)}")
        return list(reader)


def _write_rows(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with _open_text(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


CLINICAL_COLUMNS = ("slide_id", "time_months", "event")


def write_clinical_csv(path, records: Sequence[ClinicalRecord]) -> None:
    _write_rows(path, CLINICAL_COLUMNS,
                ((r.slide_id, _float(r.time), int(r.event)) for r in records))


def read_clinical_csv(path) -> list[ClinicalRecord]:
    out = []
    for row in _read_rows(path, CLINICAL_COLUMNS):
        try:
            event = int(row["event"])
            if event not in (0, 1):
                raise ValueError("event must be 0 or 1")
            out.append(ClinicalRecord(row["slide_id"], float(row["time_months"]), bool(event)))
        except ValueError as exc:
            raise SchemaError(f"{path}: {exc}") from exc
    return out


SLIDE_COLUMNS = ("slide_id", "split", "reference_gg", "pct_gp3", "pct_gp4", "pct_gp5",
                 "resolution_um_per_px", "stride_um")


def write_slide_index(path, slides: Sequence[SlideRecord], splits: dict[str, str]) -> None:
    rows = []
    for s in slides:
        pcts = s.reference_pcts or ("", "", "")
        rows.append((s.slide_id, splits[s.slide_id],
                     "" if s.reference_gg is None else int(s.reference_gg),
                     *(p if p == "" else _float(p) for p in pcts),
                     _float(s.resolution_um_per_px), _float(s.mask.stride_um)))
    _write_rows(path, SLIDE_COLUMNS, rows)


def read_slide_index(path) -> list[dict]:
    rows = _read_rows(path, SLIDE_COLUMNS)
    out = []
    for r in rows:
        try:
            out.append({
                "slide_id": r["slide_id"], "split": r["split"],
                "reference_gg": GradeGroup(int(r["reference_gg"])) if r["reference_gg"] else None,
                "reference_pcts": (tuple(float(r[k]) for k in ("pct_gp3", "pct_gp4", "pct_gp5"))
                                   if r["pct_gp3"] else None),
                "resolution_um_per_px": float(r["resolution_um_per_px"]),
                "stride_um": float(r["stride_um"]),
            })
        except ValueError as exc:
            raise SchemaError(f"{path}: {exc}") from exc
    return out


RATING_COLUMNS = ("slide_id", "rater", "subgroup", "grade_group")


def write_ratings_csv(path, table: RatingTable) -> None:
    _write_rows(path, RATING_COLUMNS, (
        (table.slide_ids[s], r, g, int(v)) for s, r, g, v in zip(
            table.rating_slide.tolist(), table.rating_rater.tolist(),
            table.rating_subgroup.tolist(), table.rating_value.tolist())))


def read_ratings_rows(path) -> list[tuple[str, str, str, int]]:
    out = []
    for r in _read_rows(path, RATING_COLUMNS):
        try:
            out.append((r["slide_id"], r["rater"], r["subgroup"], int(r["grade_group"])))
        except ValueError as exc:
            raise SchemaError(f"{path}: {exc}") from exc
    return out


def write_loss_csv(path, records: Sequence[LossRecord]) -> None:
    _write_rows(path, ("slide_id", "patch_index", "loss"),
                ((r.slide_id, r.patch_index, _float(r.loss)) for r in records))


def read_loss_csv(path) -> list[LossRecord]:
    return [LossRecord(r["slide_id"], int(r["patch_index"]), float(r["loss"]))
            for r in _read_rows(path, ("slide_id", "patch_index", "loss"))]


KM_COLUMNS = ("time", "survival", "at_risk", "censored_ticks", "events")


def write_km_csv(path, curve: KaplanMeierCurve) -> None:
    _write_rows(path, KM_COLUMNS, (
        (_float(t), _float(s), int(n), int(c), int(d)) for t, s, n, c, d in zip(
            curve.time, curve.survival, curve.at_risk, curve.censored, curve.events)))


def read_km_csv(path) -> KaplanMeierCurve:
    rows = _read_rows(path, KM_COLUMNS)

    def col(key, kind):
        return np.array([kind(r[key]) for r in rows], dtype=kind)

    return KaplanMeierCurve(col("time", float), col("at_risk", int), col("events", int),
                            col("censored_ticks", int), col("survival", float))


def write_roc_csv(path, curve) -> None:
    _write_rows(path, ("threshold", "fpr", "tpr"), (
        (_float(t), _float(f), _float(p))
        for t, f, p in zip(curve.thresholds, curve.fpr, curve.tpr)))


# --------------------------------------------------------------------------
# models and fits


def model_to_dict(model: GraderModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "calibration": [float(w) for w in model.calibration.w],
        "k": int(model.k),
        "tuning_kappa": None if model.tuning_kappa is None else float(model.tuning_kappa),
        "rescaler": {"min": model.rescaler.mins.tolist(), "max": model.rescaler.maxs.tolist()},
        "training": {"features": model.training_features.tolist(),
                     "labels": model.training_labels.tolist()},
    }


def model_from_dict(d: dict, name: str = "<model>") -> GraderModel:
    if d.get("format") != MODEL_FORMAT:
        raise SchemaError(f"{name}: not a {MODEL_FORMAT} document")
    try:
        feats = np.asarray(d["training"]["features"], dtype=np.float64)
        labels = np.asarray(d["training"]["labels"], dtype=np.int64)
        resc = FeatureRescaler(np.asarray(d["rescaler"]["min"], dtype=np.float64),
                               np.asarray(d["rescaler"]["max"], dtype=np.float64))
        model = GraderModel(CalibrationWeights(tuple(float(x) for x in d["calibration"])),
                            resc, feats, labels, int(d["k"]), d.get("tuning_kappa"))
        model.knn  # validates k against the training size
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{name}: {exc}") from exc
    return model


def write_model(path, model: GraderModel) -> None:
    write_json(path, model_to_dict(model))


def read_model(path) -> GraderModel:
    return model_from_dict(read_json(path), str(path))


def cox_to_dict(fit: CoxFit, level: float = 0.95) -> dict:
    with np.errstate(over="ignore"):
        hr_ci = np.exp(fit.confidence_intervals(level))

    def finite(values):
        return [v if math.isfinite(v) else None for v in values]

    return {
        "beta": fit.beta.tolist(),
        "standard_errors": finite(fit.standard_errors.tolist()),
        "hazard_ratios": finite(fit.hazard_ratios.tolist()),
        "ci_level": level,
        # unbounded intervals (separated data) are written as null
        "hazard_ratio_ci": [pair if np.isfinite(pair).all() and pair[0] > 0 else None
                            for pair in hr_ci.tolist()],
        "log_partial_likelihood": fit.log_partial_likelihood,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "gradient": fit.gradient.tolist(),
        "covariates": list(fit.covariate_names) if fit.covariate_names else None,
    }


# --------------------------------------------------------------------------
# images


def png_bytes(img: Image.Image) -> bytes:
    """PNG encoding without timestamps or other varying chunks."""
    buf = io.BytesIO()
    img.save(buf, format="PNG", optimize=False, compress_level=9)
    return buf.getvalue()


def write_png(path, img: Image.Image) -> None:
    Path(path).write_bytes(png_bytes(img))


def read_png(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGBA"))


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def optional_path(path) -> Optional[Path]:
    return None if path is None else Path(path)
