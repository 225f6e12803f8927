"""Acceptance criteria, each checked at its stated tolerance and time budget.

Run with pytest (a summary block lists every criterion) or directly::

    python tests/test_acceptance.py
"""
from __future__ import annotations

import functools
import itertools
import sys
import tempfile
import time
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import yaml
from scipy import stats

from gleason import cli
from gleason import pipeline as pl
from gleason.core import (GleasonScore, GradeGroup, LabelMask, PatternCategory, SlideRecord,
                          derive_gleason_score, grade_group_from_score)
from gleason.finegrained import quantitative_gp_verbatim
from gleason.grader import KnnModel, knn_predict
from gleason.metrics import (NINETEEN, TEN, RatingTable, bootstrap_ci, cohort_matrix,
                             cohort29_sample, permutation_test_vs_cohort, roc_auc)
from gleason.sampling import SamplerState, mining_round, sample_training_patches
from gleason.survival import (SurvivalDataset, _BreslowTerms, concordance_index, cox_fit,
                              kaplan_meier, log_partial_likelihood)
from gleason.synth import synth_generate

RESULTS: dict[str, tuple[bool, str, str]] = {}
CRITERIA = []


def criterion(key: str, title: str, budget_s: float):
    def wrap(fn):
        @functools.wraps(fn)
        def run():
            t0 = time.perf_counter()
            ok, detail = fn()
            elapsed = time.perf_counter() - t0
            in_time = elapsed < budget_s
            detail = f"{detail}; {elapsed:.1f}s of {budget_s:g}s" + ("" if in_time else " OVER BUDGET")
            RESULTS[key] = (bool(ok and in_time), title, detail)
            print(f"{'PASS' if RESULTS[key][0] else 'FAIL'}  {key}  {title}: {detail}", flush=True)
            return RESULTS[key][0]
        CRITERIA.append((key, run))
        return run
    return wrap


def _slide(codes, slide_id="s"):
    return SlideRecord(slide_id, LabelMask(np.asarray(codes, dtype=np.int16)))


class _FixedClassifier:
    def __init__(self, rows):
        self.rows = rows

    def predict_slide(self, slide, orientation=0):
        return np.array(self.rows[slide.slide_id], dtype=np.float64)


# --------------------------------------------------------------------------
# 1-4: formulas and small-sample oracles


@criterion("c01", "fine-grained formula example", 1)
def fine_grained_example():
    q = quantitative_gp_verbatim([0.7, 0.2, 0.1])
    return round(q, 2) == 3.78, f"qGP={q:.4f}"


ISUP = {(3, 3): 1, (3, 4): 2, (4, 3): 3, (4, 4): 4, (3, 5): 4, (5, 3): 4,
        (4, 5): 4, (5, 4): 4, (5, 5): 4}


def _score_oracle(pcts):
    # most abundant first; reversing before a stable sort sends ties to the more severe pattern
    order = 2 - np.argsort(-pcts[::-1], kind="stable")
    primary = int(order[0])
    secondary = int(order[1]) if pcts[order[1]] > 0 else primary
    return primary + 3, secondary + 3


@criterion("c02", "grade-group table and score derivation", 5)
def grade_group_mapping():
    table_ok = all(
        grade_group_from_score(GleasonScore(PatternCategory.from_pattern_number(p),
                                            PatternCategory.from_pattern_number(s)))
        == GradeGroup(gg) for (p, s), gg in ISUP.items())
    rng = np.random.default_rng(0)
    mismatches = 0
    for i in range(10_000):
        if i % 3 == 0:
            raw = rng.multinomial(10, np.full(4, 0.25))[:3] * 10.0  # exact ties and zeros
        else:
            raw = rng.dirichlet(np.ones(4))[:3] * 100
        if i % 7 == 0:
            raw[rng.integers(0, 3)] = 0.0
        if raw.sum() == 0:
            raw[0] = 10.0
        got = derive_gleason_score(*raw)
        mismatches += (got.primary.pattern_number, got.secondary.pattern_number) != _score_oracle(raw)
    return table_ok and mismatches == 0, f"9 pairs ok={table_ok}, {mismatches}/10000 mismatches"


def _brute_knn(points, labels, k, q):
    order = sorted(range(len(points)), key=lambda i: (float(((points[i] - q) ** 2).sum()), i))
    votes = Counter(int(labels[i]) for i in order[:k])
    top = max(votes.values())
    return max(c for c, v in votes.items() if v == top)


@criterion("c03", "kNN equals brute force", 30)
def knn_brute_force():
    rng = np.random.default_rng(1)
    bad = 0
    for inst in range(50):
        n = int(rng.integers(24, 501))
        q = int(rng.integers(1, 101))
        pts = rng.random((n, 4))
        queries = rng.random((q, 4))
        if inst % 2:
            pts, queries = np.round(pts * 3) / 3, np.round(queries * 3) / 3  # distance ties
        labels = rng.integers(1, 5, n)
        k = int(rng.integers(1, min(n, 40) + 1))
        model = KnnModel(pts, labels, k)
        pred = model.predict(queries)
        for j in range(q):
            expect = _brute_knn(pts, labels, k, queries[j])
            bad += int(pred[j]) != expect or knn_predict(model, queries[j]) != expect
    return bad == 0, f"50 instances, {bad} disagreements"


def _pair_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0) + 0.5 * (diff == 0)).mean())


@criterion("c04", "AUC equals pair counting", 10)
def auc_pair_counting():
    rng = np.random.default_rng(2)
    worst = 0.0
    for inst in range(100):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        y[:2] = (0, 1)
        s = rng.random(n)
        if inst % 2:
            s = np.round(s, 1)
        worst = max(worst, abs(roc_auc(s, y)[0] - _pair_auc(s, y)))
    return worst <= 1e-12, f"max |diff| = {worst:.1e}"


# --------------------------------------------------------------------------
# 5-7: survival


def _two_groups(seed, n, hr, censor_rate=None, base=0.1):
    rng = np.random.default_rng(seed)
    g = (np.arange(n) % 2).astype(float)
    t_event = rng.exponential(1 / (base * np.where(g == 1, hr, 1.0)))
    if censor_rate is None:
        return g, t_event, np.ones(n, bool)
    t_cens = rng.exponential(1 / censor_rate, n)
    return g, np.minimum(t_event, t_cens), t_event <= t_cens


@criterion("c05", "Cox gradient, grid oracle and HR coverage", 120)
def cox_checks():
    grid = np.round(np.arange(-5, 5 + 1e-9, 1e-3), 3)
    max_grad, max_grid_err = 0.0, 0.0
    for seed in range(20):
        g, t, e = _two_groups(seed, 120, 2.0, censor_rate=0.03)
        x = g + np.random.default_rng(1000 + seed).normal(0, 0.5, g.size)
        fit = cox_fit(SurvivalDataset(t, e, x))
        terms = _BreslowTerms(t, e, x[:, None])
        ll = np.array([terms.evaluate(np.array([b]), derivatives=False)[0] for b in grid])
        max_grid_err = max(max_grid_err, abs(fit.beta[0] - grid[int(np.argmax(ll))]))
        max_grad = max(max_grad, float(np.abs(fit.gradient).max()))
    covered, censored = 0, []
    for seed in range(100):
        # censoring rate 0.04 against hazards 0.1 and 0.3 censors about 20%
        g, t, e = _two_groups(5000 + seed, 500, 3.0, censor_rate=0.04)
        censored.append(1 - e.mean())
        fit = cox_fit(SurvivalDataset(t, e, g))
        lo, hi = np.exp(fit.confidence_intervals()[0])
        covered += lo <= 3.0 <= hi
        max_grad = max(max_grad, float(np.abs(fit.gradient).max()))
    ok = max_grad < 1e-6 and max_grid_err <= 1e-3 and covered >= 90
    return ok, (f"max grad {max_grad:.1e}, grid err {max_grid_err:.1e}, "
                f"HR 3 covered {covered}/100 (censored {np.mean(censored):.0%})")


def _pair_cindex(s, t, e):
    comparable = e[:, None] & (t[:, None] < t[None, :])
    ds = s[:, None] - s[None, :]
    num = ((ds > 0) + 0.5 * (ds == 0))[comparable].sum()
    return float(num / comparable.sum())


@criterion("c06", "c-index", 30)
def cindex_checks():
    rng = np.random.default_rng(6)
    worst = 0.0
    for inst in range(20):
        n = int(rng.integers(5, 301))
        t = rng.integers(1, 40, n).astype(float) if inst % 2 else rng.exponential(size=n)
        e = rng.random(n) < 0.6
        e[0], t[0] = True, t.min() / 2
        s = rng.integers(0, 6, n).astype(float) if inst % 3 == 0 else rng.normal(size=n)
        worst = max(worst, abs(concordance_index(s, t, e) - _pair_cindex(s, t, e)))
    t = np.arange(1.0, 51)
    perfect = concordance_index(-t, t, np.ones(50, bool))
    const = concordance_index(np.ones(50), t, np.ones(50, bool))
    s = rng.normal(size=200)
    t = rng.exponential(size=200)
    e = rng.random(200) < 0.7
    c = concordance_index(s, t, e)
    transforms_ok = True
    for _ in range(20):
        a, b = rng.uniform(0.1, 3), rng.normal()
        fns = (lambda v: np.exp(a * v) + b, lambda v: a * v ** 3 + b, lambda v: np.arctan(a * v))
        f = fns[int(rng.integers(0, 3))]
        transforms_ok &= abs(concordance_index(f(s), t, e) - c) <= 1e-12
    ok = worst <= 1e-12 and perfect == 1.0 and const == 0.5 and transforms_ok
    return ok, (f"max |diff| {worst:.1e}, perfect {perfect}, constant {const}, "
                f"20 transforms invariant={transforms_ok}")


@criterion("c07", "Kaplan-Meier", 5)
def km_checks():
    none = kaplan_meier([1.0, 2.0, 5.0], [False] * 3)
    ex1 = bool((none.survival == 1.0).all())
    three = kaplan_meier([1.0, 2.0, 3.0], [True] * 3)
    ex2 = three.event_steps() == [(1.0, 2 / 3), (2.0, 1 / 3), (3.0, 0.0)]
    cens = kaplan_meier([1.0, 2.0], [False, True])
    ex3 = cens.survival_at(2.0) == 0.0 and cens.at_risk.tolist() == [2, 1]
    rng = np.random.default_rng(7)
    monotone = 0
    for _ in range(100):
        n = int(rng.integers(1, 80))
        km = kaplan_meier(rng.integers(1, 25, n).astype(float), rng.random(n) < 0.5)
        s = np.r_[1.0, km.survival]
        monotone += bool((np.diff(s) <= 0).all() and (s >= 0).all())
    ok = ex1 and ex2 and ex3 and monotone == 100
    return ok, f"examples {ex1}/{ex2}/{ex3}, monotone {monotone}/100"


# --------------------------------------------------------------------------
# 8-11: sampling and resampling statistics


@criterion("c08", "hard-negative sampler", 60)
def sampler_checks():
    slide = _slide([[0, 0, 1, 1], [2, 2, 3, 3]], "a")
    state = SamplerState.from_slides([slide], seed=0)
    cats = np.array([int(c) for _, _, c in sample_training_patches(state, 10**6)])
    freq = np.bincount(cats, minlength=4) / cats.size
    ratio_err = float(np.abs(freq - np.array([4, 2, 2, 1]) / 9).max())

    pair = _slide([[1, 1]], "m")
    state = SamplerState.from_slides([pair], category_ratios=(0, 1, 0, 0), seed=4)
    log = []
    mining_round(state, _FixedClassifier({"m": [[0.75, 0.25, 0, 0], [0.5, 0.5, 0, 0]]}), [pair], log)
    losses_ok = np.allclose([r.loss for r in log], [np.log(4), np.log(2)])
    first = np.mean([p == 0 for _, p, _ in sample_training_patches(state, 10**5)])

    flat = _slide([[1, 1, 1, 1]], "u")
    state = SamplerState.from_slides([flat], category_ratios=(0, 1, 0, 0), seed=5)
    mining_round(state, _FixedClassifier({"u": [[0.5, 0.5, 0, 0]] * 4}), [flat])
    draws = np.array([p for _, p, _ in sample_training_patches(state, 10**5)])
    chi_p = stats.chisquare(np.bincount(draws, minlength=4)).pvalue

    ok = ratio_err <= 0.01 and losses_ok and abs(first - 2 / 3) <= 0.02 and chi_p > 0.001
    return ok, (f"category err {ratio_err:.4f}, mined share {first:.4f} vs 2/3, "
                f"uniform chi-square p {chi_p:.3f}")


def _null_table(rng, n_slides=60, p_correct=0.6):
    """Every rating, the DLS included, is correct independently with the same
    probability: DLS and pathologists are exchangeable."""
    ref = rng.integers(1, 5, n_slides)

    def rate(s):
        return int(ref[s]) if rng.random() < p_correct else int(ref[s] % 4 + 1)

    dls = np.array([rate(s) for s in range(n_slides)])
    rows = []
    for s in range(n_slides):
        rows += [(s, f"T{r:02d}", TEN, rate(s)) for r in range(10)]
        rows += [(s, f"N{r:02d}", NINETEEN, rate(s)) for r in rng.choice(19, 3, replace=False)]
    s_, r_, g_, v_ = zip(*rows)
    return RatingTable([f"s{i:03d}" for i in range(n_slides)], ref, dls, s_, r_, g_, v_)


@criterion("c09", "permutation test calibration", 120)
def permutation_calibration():
    pvals = []
    for run in range(200):
        table = _null_table(np.random.default_rng([9, run]))
        pvals.append(permutation_test_vs_cohort(table, iterations=999, seed=run))
    ks = stats.kstest(pvals, "uniform")
    n = 15
    ref = np.arange(n) % 4 + 1
    rows = [(s, f"T{r}", TEN, int(ref[s])) for s in range(n) for r in range(10)]
    rows += [(s, f"N{(s + r) % 19}", NINETEEN, int(ref[s])) for s in range(n) for r in range(3)]
    s_, r_, g_, v_ = zip(*rows)
    same = RatingTable([f"s{i}" for i in range(n)], ref, ref, s_, r_, g_, v_)
    p_same = permutation_test_vs_cohort(same, iterations=500, seed=0)
    ok = ks.pvalue > 0.01 and p_same == 1.0
    return ok, f"KS p {ks.pvalue:.3f} over 200 null runs, identical ratings p {p_same}"


@criterion("c10", "bootstrap coverage and subgroup resampling", 120)
def bootstrap_checks():
    covered = 0
    for trial in range(500):
        x = np.random.default_rng([10, trial]).normal(size=100)
        lo, hi = bootstrap_ci(np.mean, x, replicates=1000, seed=trial)
        covered += lo <= 0.0 <= hi
    # all 29 raters read every slide, so every drawn rater shows up in the replicate
    n = 8
    rows = [(s, f"T{r:02d}", TEN, 1) for s in range(n) for r in range(10)]
    rows += [(s, f"N{r:02d}", NINETEEN, 1) for s in range(n) for r in range(19)]
    s_, r_, g_, v_ = zip(*rows)
    table = RatingTable([f"s{i}" for i in range(n)], np.ones(n), np.ones(n), s_, r_, g_, v_)
    rng = np.random.default_rng(0)
    construction = True
    for _ in range(200):
        groups = table.resample(rng).rater_subgroups()
        for sub, prefix, size in ((TEN, "T", 10), (NINETEEN, "N", 19)):
            copies = [name for name, g in groups.items() if g == sub]
            construction &= len(copies) == size
            construction &= all(name.startswith(prefix) for name in copies)
    ok = 450 <= covered <= 490 and construction
    return ok, f"coverage {covered}/500, per-subgroup pools preserved={construction}"


@criterion("c11", "cohort-of-29 marginals", 30)
def cohort29_marginals():
    n_slides, reps = 1000, 100
    rows = []
    for s in range(n_slides):
        # each rating's value is its cohort-matrix column, so draws identify columns
        rows += [(s, f"T{r:02d}", TEN, r + 1) for r in range(10)]
        rows += [(s, f"N{r:02d}", NINETEEN, 11 + k)
                 for k, r in enumerate(sorted(np.random.default_rng([11, s]).choice(19, 3, replace=False)))]
    s_, r_, g_, v_ = zip(*rows)
    ones = np.ones(n_slides, dtype=int)
    table = RatingTable([f"s{i:04d}" for i in range(n_slides)], ones, ones, s_, r_, g_, v_)
    assert (cohort_matrix(table).values[:, 1:] == np.arange(1, 14)).all()
    draws = np.concatenate([cohort29_sample(table, seed) for seed in range(reps)])
    freq = np.bincount(draws, minlength=14)[1:] / draws.size
    expect = np.r_[np.full(10, 1 / 29), np.full(3, 19 / 87)]
    err = float(np.abs(freq - expect).max())
    return err <= 0.005, f"{draws.size} draws, max marginal error {err:.4f}"


# --------------------------------------------------------------------------
# 12-14: end to end

SEEDS = (0, 1, 2)
EPS = (0.0, 0.2, 0.4, 0.6)


@functools.lru_cache(maxsize=None)
def _sweep():
    """Default configuration runs keyed by (seed, eps)."""
    out = {}
    for seed in SEEDS:
        base = pl.RunConfig().with_seed(seed)
        ds = synth_generate(base.synthetic)
        for eps in EPS:
            cfg = replace(base, oracle=replace(base.oracle, noise_eps=eps))
            r = pl.run_in_memory(ds, cfg)
            out[seed, eps] = (r.metrics, r.survival)
    return out


@criterion("c12", "end-to-end closure", 180)
def closure():
    runs = _sweep()
    exact = [runs[s, 0.0][0] for s in SEEDS]
    exact_ok = all(m["accuracy"] == 1.0 and max(m["mae"].values()) <= 1.0 for m in exact)
    # averaged over the seed set; single seeds wobble with the calibration choice
    acc = [np.mean([runs[s, e][0]["accuracy"] for s in SEEDS]) for e in EPS]
    mae = [np.mean([np.mean(list(runs[s, e][0]["mae"].values())) for s in SEEDS]) for e in EPS]
    mono = all(b <= a for a, b in zip(acc, acc[1:])) and all(b >= a for a, b in zip(mae, mae[1:]))
    detail = ("acc " + "/".join(f"{a:.4f}" for a in acc) + ", MAE pp "
              + "/".join(f"{m:.2f}" for m in mae) + f" over eps {EPS}, seeds {SEEDS}")
    return exact_ok and mono, detail


@criterion("c13", "end-to-end survival smoke test", 180)
def survival_smoke():
    runs = _sweep()  # shared with c12; its cost is counted there
    ok, parts = True, []
    for s in SEEDS:
        c0 = runs[s, 0.0][1]["c_index"]
        c6 = runs[s, 0.6][1]["c_index"]
        hr = runs[s, 0.0][1]["hazard_ratio_gg3"]
        lo, hi = hr["ci"]
        excludes = hr["bounded"] and (lo > 1 or hi < 1)
        ok &= c0 > 0.60 and c0 > c6 and excludes
        parts.append(f"seed {s}: c {c0:.3f}>{c6:.3f}, HR CI [{lo:.2f}, {hi:.2f}]")
    return ok, "; ".join(parts)


SMALL_RUN = {
    "synthetic": {"split_sizes": {"train": 120, "tune": 30, "val": 40}, "rows": 20, "cols": 20},
    "sampler": {"rounds": 2, "cadence": 200},
    "eval": {"bootstrap_replicates": 100, "permutation_iterations": 500, "cohort_iterations": 99},
}


def _cli_run(root: Path, config: Path) -> Path:
    common = ["--config", str(config), "--out", str(root), "--seed", "3"]
    for cmd in (["generate"], ["mine"], ["infer"], ["train"], ["grade"], ["eval"],
                ["survival", "--cohort29"], ["render"]):
        if cli.main(cmd + common) != 0:
            raise RuntimeError(f"{cmd[0]} failed")
    return root


@criterion("c14", "determinism", 180)
def determinism():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        config = tmp / "run.yaml"
        config.write_text(yaml.safe_dump(SMALL_RUN))
        a, b = _cli_run(tmp / "a", config), _cli_run(tmp / "b", config)
        files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        same = files_a == files_b
        differing = [str(p) for p in files_a if same and (a / p).read_bytes() != (b / p).read_bytes()]
        kinds = Counter(p.suffix for p in files_a)
    ok = same and not differing and all(kinds[s] for s in (".lmap", ".json", ".png"))
    return ok, (f"{len(files_a)} files ({kinds['.lmap']} heatmaps, {kinds['.png']} PNGs), "
                f"{len(differing)} differ")


@pytest.mark.parametrize("key, run", CRITERIA, ids=[k for k, _ in CRITERIA])
def test_criterion(key, run):
    assert run(), RESULTS[key][2]


if __name__ == "__main__":
    passed = sum(run() for _, run in CRITERIA)
    print(f"{passed}/{len(CRITERIA)} criteria pass")
    sys.exit(0 if passed == len(CRITERIA) else 1)
