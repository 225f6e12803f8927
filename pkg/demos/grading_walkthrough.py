"""Grade one synthetic slide end to end and look at every intermediate.

Run with ``python demos/grading_walkthrough.py [--out DIR]``. A small
dataset is generated, a grader is trained on it, and one validation slide
is followed from label mask to heatmap, features, grade group and a
fine-grained PNG.
"""
import argparse
from dataclasses import replace
from pathlib import Path

import numpy as np

from gleason import io
from gleason import pipeline as pl
from gleason.core import derive_gleason_score
from gleason.finegrained import finegrained_features, quantitative_gp_smooth, quantitative_gp_verbatim
from gleason.grader import grade_map
from gleason.synth import SyntheticConfig, synth_generate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="walkthrough_out")
    ap.add_argument("--eps", type=float, default=0.2, help="oracle noise level")
    args = ap.parse_args()

    synthetic = SyntheticConfig(split_sizes={"train": 400, "tune": 60, "val": 20})
    cfg = pl.RunConfig(synthetic=synthetic).with_seed(42)
    cfg = replace(cfg, oracle=replace(cfg.oracle, noise_eps=args.eps))
    ds = synth_generate(cfg.synthetic)
    # the first validation slide with more than one pattern
    slide = next(s for s in ds.split("val") if int(s.reference_gg) >= 2)

    # the ground truth: resolved patch categories, -1 outside tissue
    labels = slide.resolved_labels().reshape(slide.mask.shape)
    print(f"slide {slide.slide_id}: {slide.mask.rows}x{slide.mask.cols} patches, "
          f"reference GG{slide.reference_gg.label}, %GP3/4/5 = "
          + ", ".join(f"{p:.1f}" for p in slide.reference_pcts))
    print("category counts (benign, GP3, GP4, GP5):",
          np.bincount(labels[labels >= 0], minlength=4).tolist())

    # stage 1: heatmaps for every slide, then calibration and kNN on train/tune
    maps = pl.infer_maps(ds.slides, cfg.oracle_config())
    model = pl.train_model([maps[s.slide_id] for s in ds.split("train")],
                           [int(s.reference_gg) for s in ds.split("train")],
                           [maps[s.slide_id] for s in ds.split("tune")],
                           [s.reference_gg for s in ds.split("tune")], cfg.k)
    print("calibration weights:", model.calibration.w, f"(tuning kappa {model.tuning_kappa:.3f})")

    # stage 2: features and grade group for the chosen slide
    lmap = maps[slide.slide_id]
    grade = grade_map(lmap, model, slide.slide_id)
    f = grade.features
    print(f"features: %tumor {f.pct_tumor:.1f}, %GP3 {f.pct_gp3:.1f}, %GP4 {f.pct_gp4:.1f}, "
          f"%GP5 {f.pct_gp5:.1f}")
    if f.pct_tumor > 0:
        print("Gleason score from features:", derive_gleason_score(*f.pattern_pcts))
    print(f"predicted GG{grade.grade_group.label}; binary scores",
          {k: round(v, 3) for k, v in sorted(grade.binary_scores.items())})

    # fine-grained view: the two qGP formulas on one patch, then the buckets
    row = np.array([0.0, 0.7, 0.2, 0.1])
    print(f"qGP of (GP3 .7, GP4 .2, GP5 .1): literal {quantitative_gp_verbatim(row):.2f}, "
          f"smooth {quantitative_gp_smooth(row):.2f}")
    calibrated = lmap.values.astype(np.float64) * model.calibration.as_array()
    fine = finegrained_features(calibrated)
    print("fine-grained % (3, 3.5, 4, 4.5, 5):", np.round(fine.as_array(), 1).tolist())

    out = io.ensure_dir(Path(args.out))
    io.write_png(out / f"{slide.slide_id}.png", pl.render(lmap, model, "white"))
    print("heatmap written to", out / f"{slide.slide_id}.png")


if __name__ == "__main__":
    main()
