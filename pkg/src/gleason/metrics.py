"""Slide-level agreement metrics and resampling procedures.

Everything that compares grade-group calls against a reference standard:
accuracy (plain and population-adjusted), Cohen's kappa, quantitation MAE,
ROC/AUC, the slide-and-rater bootstrap, the modified permutation test
against a pathologist cohort and the cohort-of-29 rating sampler.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

TEN = "Ten"
NINETEEN = "Nineteen"
SUBGROUPS = (TEN, NINETEEN)

# GG1 : GG2 : GG3 : GG4-5
DEFAULT_POPULATION_WEIGHTS = (7397.0, 8353.0, 3106.0, 1968.0)


def _paired(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be equal-length sequences")
    if a.size == 0:
        raise ValueError("inputs are empty")
    return a, b


def accuracy(predictions, references) -> float:
    p, r = _paired(predictions, references)
    return float(np.mean(p == r))


def adjusted_accuracy(predictions, references,
                      weights: Sequence[float] = DEFAULT_POPULATION_WEIGHTS,
                      classes: Sequence[int] = (1, 2, 3, 4)) -> float:
    """Per-class recall averaged with population weights.

    ``weights[i]`` belongs to ``classes[i]``; every class with a nonzero
    weight has to occur among the references.
    """
    p, r = _paired(predictions, references)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(classes),) or (w < 0).any() or w.sum() <= 0:
        raise ValueError("need one nonnegative weight per class")
    total = 0.0
    for cls, wc in zip(classes, w):
        if wc == 0:
            continue
        sel = r == cls
        if not sel.any():
            raise ValueError(f"class {cls} has weight but no reference slides")
        total += wc * np.mean(p[sel] == cls)
    return float(total / w.sum())


def cohens_kappa(a, b, return_flag: bool = False):
    """Unweighted Cohen's kappa.

    When chance agreement is 1 (both raters constant on the same category)
    kappa is reported as 0 with a warning; ``return_flag=True`` additionally
    returns whether that happened.
    """
    a, b = _paired(a, b)
    cats, inv = np.unique(np.concatenate([a, b]), return_inverse=True)
    ia, ib = inv[: a.size], inv[a.size:]
    n = a.size
    p_o = np.mean(ia == ib)
    pa = np.bincount(ia, minlength=cats.size) / n
    pb = np.bincount(ib, minlength=cats.size) / n
    p_e = float(pa @ pb)
    degenerate = np.isclose(p_e, 1.0, rtol=0, atol=1e-15)
    if degenerate:
        warnings.warn("kappa undefined (chance agreement is 1); reporting 0",
                      RuntimeWarning, stacklevel=2)
        kappa = 0.0
    else:
        kappa = float((p_o - p_e) / (1.0 - p_e))
    return (kappa, bool(degenerate)) if return_flag else kappa


PATTERN_COLUMNS = {"gp3": 0, "gp4": 1, "gp5": 2}


def quantitation_mae(pred_pcts, ref_pcts, pattern: str | int) -> float:
    """Mean absolute error of one pattern's percentage.

    ``pred_pcts``/``ref_pcts`` have shape (n_slides, 3) ordered GP3, GP4, GP5;
    ``pattern`` is ``"gp3"``/``"gp4"``/``"gp5"`` or a pattern number 3-5.
    """
    col = PATTERN_COLUMNS[pattern.lower()] if isinstance(pattern, str) else int(pattern) - 3
    pred = np.asarray(pred_pcts, dtype=np.float64)
    ref = np.asarray(ref_pcts, dtype=np.float64)
    if pred.shape != ref.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError("percentages must be aligned (n, 3) arrays")
    if pred.shape[0] == 0:
        raise ValueError("no slides")
    return float(np.mean(np.abs(pred[:, col] - ref[:, col])))


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray


def roc_auc(scores, labels) -> tuple[float, RocCurve]:
    """Trapezoidal AUC over every distinct score threshold.

    Tied scores enter the curve as a single diagonal step, so the area equals
    the Mann-Whitney pair count with ties scored one half.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-d arrays")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s[last]]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1])) / 2.0)
    return auc, RocCurve(thresholds, fpr, tpr)


# --------------------------------------------------------------------------
# Rating tables


@dataclass
class RatingTable:
    """Reference, DLS and pathologist grade groups for a set of slides.

    Pathologist ratings are stored in long form: one entry per
    (slide, rater) pair with the rater's subgroup.
    """

    slide_ids: list[str]
    reference: np.ndarray
    dls: np.ndarray
    rating_slide: np.ndarray
    rating_rater: np.ndarray
    rating_subgroup: np.ndarray
    rating_value: np.ndarray
    reference_pcts: Optional[np.ndarray] = None
    dls_pcts: Optional[np.ndarray] = None

    def __post_init__(self):
        self.reference = np.asarray(self.reference, dtype=np.int64)
        self.dls = np.asarray(self.dls, dtype=np.int64)
        self.rating_slide = np.asarray(self.rating_slide, dtype=np.int64)
        self.rating_rater = np.asarray(self.rating_rater, dtype=object)
        self.rating_subgroup = np.asarray(self.rating_subgroup, dtype=object)
        self.rating_value = np.asarray(self.rating_value, dtype=np.int64)
        n = len(self.slide_ids)
        if self.reference.shape != (n,) or self.dls.shape != (n,):
            raise ValueError("reference and dls need one entry per slide")
        m = self.rating_slide.shape[0]
        for arr in (self.rating_rater, self.rating_subgroup, self.rating_value):
            if arr.shape != (m,):
                raise ValueError("rating columns must have equal length")
        if m and (self.rating_slide.min() < 0 or self.rating_slide.max() >= n):
            raise ValueError("rating refers to an unknown slide")
        if m and not set(self.rating_subgroup.tolist()) <= set(SUBGROUPS):
            raise ValueError(f"subgroups must be among {SUBGROUPS}")

    @property
    def n_slides(self) -> int:
        return len(self.slide_ids)

    def raters(self) -> list[str]:
        return sorted(set(self.rating_rater.tolist()))

    def rater_subgroups(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for r, g in zip(self.rating_rater.tolist(), self.rating_subgroup.tolist()):
            if out.setdefault(r, g) != g:
                raise ValueError(f"rater {r} appears in two subgroups")
        return out

    def rater_accuracies(self, subgroup: Optional[str] = None) -> dict[str, float]:
        correct = self.rating_value == self.reference[self.rating_slide]
        out = {}
        for r, g in self.rater_subgroups().items():
            if subgroup is not None and g != subgroup:
                continue
            sel = self.rating_rater == r
            out[r] = float(np.mean(correct[sel]))
        return out

    def mean_rater_accuracy(self, subgroup: Optional[str] = None) -> float:
        accs = self.rater_accuracies(subgroup)
        if not accs:
            raise ValueError("no raters")
        return float(np.mean(list(accs.values())))

    def subset(self, slide_index: np.ndarray, rater_draws: Optional[dict[str, int]] = None
               ) -> "RatingTable":
        """Materialise a resample: ``slide_index`` lists the (possibly
        repeated) original slides; ``rater_draws`` maps each original rater to
        how many copies it contributes (absent = 0). Copies are renamed
        ``rater#k`` so they count as distinct raters."""
        slide_index = np.asarray(slide_index, dtype=np.int64)
        by_slide = [np.flatnonzero(self.rating_slide == s) for s in range(self.n_slides)]
        rows, new_slide, new_rater = [], [], []
        for new_pos, s in enumerate(slide_index.tolist()):
            for row in by_slide[s].tolist():
                rater = self.rating_rater[row]
                copies = 1 if rater_draws is None else rater_draws.get(rater, 0)
                for k in range(copies):
                    rows.append(row)
                    new_slide.append(new_pos)
                    new_rater.append(rater if rater_draws is None else f"{rater}#{k}")
        rows = np.asarray(rows, dtype=np.int64)
        return RatingTable(
            slide_ids=[self.slide_ids[s] for s in slide_index.tolist()],
            reference=self.reference[slide_index],
            dls=self.dls[slide_index],
            rating_slide=np.asarray(new_slide, dtype=np.int64),
            rating_rater=np.asarray(new_rater, dtype=object),
            rating_subgroup=self.rating_subgroup[rows] if rows.size else np.array([], dtype=object),
            rating_value=self.rating_value[rows] if rows.size else np.array([], dtype=np.int64),
            reference_pcts=None if self.reference_pcts is None else self.reference_pcts[slide_index],
            dls_pcts=None if self.dls_pcts is None else self.dls_pcts[slide_index],
        )

    def resample(self, rng: np.random.Generator) -> "RatingTable":
        """Bootstrap replicate: slides with replacement and, separately for
        each subgroup, that subgroup's raters with replacement."""
        slides = rng.integers(0, self.n_slides, size=self.n_slides)
        groups = self.rater_subgroups()
        draws: dict[str, int] = {}
        for sub in SUBGROUPS:
            pool = sorted(r for r, g in groups.items() if g == sub)
            if not pool:
                continue
            picks = rng.integers(0, len(pool), size=len(pool))
            for i in picks.tolist():
                draws[pool[i]] = draws.get(pool[i], 0) + 1
        return self.subset(slides, draws)


def _resample(data, rng: np.random.Generator):
    if hasattr(data, "resample"):
        return data.resample(rng)
    arr = np.asarray(data)
    return arr[rng.integers(0, arr.shape[0], size=arr.shape[0])]


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def bootstrap_ci(metric: Callable, data, replicates: int = 1000, seed: int = 0,
                 alpha: float = 0.05) -> tuple[float, float]:
    """Percentile bootstrap interval of ``metric(data)``.

    ``data`` is either a `RatingTable` (slides and raters resampled) or an
    array resampled along its first axis. Replicate ``i`` draws from a
    generator seeded with ``(seed, i)``.
    """
    if replicates < 1:
        raise ValueError("replicates must be positive")
    values = np.array([metric(_resample(data, replicate_rng(seed, i)))
                       for i in range(replicates)], dtype=np.float64)
    lo, hi = np.percentile(values, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return float(lo), float(hi)


# --------------------------------------------------------------------------
# Cohort-of-29 procedures


@dataclass(frozen=True)
class CohortMatrix:
    """Dense per-slide view of a 10 + 3 rating design.

    Column 0 holds the DLS, columns 1-10 the subgroup-Ten raters (fixed
    order) and columns 11-13 the three subgroup-Nineteen ratings.
    """

    values: np.ndarray
    raters: np.ndarray
    rater_names: list[str]
    n_ten: int


def cohort_matrix(table: RatingTable, n_ten: int = 10, n_nineteen: int = 3) -> CohortMatrix:
    groups = table.rater_subgroups()
    ten = sorted(r for r, g in groups.items() if g == TEN)
    nineteen = sorted(r for r, g in groups.items() if g == NINETEEN)
    if len(ten) != n_ten:
        raise ValueError(f"expected {n_ten} subgroup-Ten raters, found {len(ten)}")
    names = ["DLS"] + ten + nineteen
    code = {r: i for i, r in enumerate(names)}
    width = 1 + n_ten + n_nineteen
    values = np.zeros((table.n_slides, width), dtype=np.int64)
    raters = np.full((table.n_slides, width), -1, dtype=np.int64)
    values[:, 0] = table.dls
    raters[:, 0] = 0
    fill = np.full(table.n_slides, 1 + n_ten, dtype=np.int64)
    for s, r, v in zip(table.rating_slide.tolist(), table.rating_rater.tolist(),
                       table.rating_value.tolist()):
        if groups[r] == TEN:
            col = 1 + ten.index(r)
            if raters[s, col] != -1:
                raise ValueError(f"rater {r} rated slide {table.slide_ids[s]} twice")
        else:
            col = int(fill[s])
            if col >= width:
                raise ValueError(f"slide {table.slide_ids[s]} has more than "
                                 f"{n_nineteen} subgroup-Nineteen ratings")
            fill[s] += 1
        values[s, col] = v
        raters[s, col] = code[r]
    if (raters < 0).any():
        bad = table.slide_ids[int(np.flatnonzero((raters < 0).any(axis=1))[0])]
        raise ValueError(f"slide {bad} does not carry {n_ten} + {n_nineteen} ratings")
    return CohortMatrix(values, raters, names, n_ten)


def _cohort_statistic(correct: np.ndarray, raters: np.ndarray, n_raters: int) -> float:
    dls_acc = correct[:, 0].mean()
    hits = np.bincount(raters[:, 1:].ravel(), weights=correct[:, 1:].ravel(), minlength=n_raters)
    counts = np.bincount(raters[:, 1:].ravel(), minlength=n_raters)
    return float(dls_acc - np.mean(hits[1:] / counts[1:]))


def permutation_test_vs_cohort(table: RatingTable, iterations: int = 5000, seed: int = 0,
                               return_statistic: bool = False):
    """Two-sided modified permutation test of DLS accuracy against the mean
    pathologist accuracy.

    Each iteration swaps, on every slide independently, the DLS rating with
    one of the 14 ratings of that slide chosen uniformly (itself included).
    The p-value is ``(1 + #{|T_perm| >= |T_obs|}) / (1 + iterations)``.
    """
    cm = cohort_matrix(table)
    correct = (cm.values == table.reference[:, None]).astype(np.float64)
    n_raters = len(cm.rater_names)
    n, width = correct.shape
    counts = np.bincount(cm.raters[:, 1:].ravel(), minlength=n_raters).astype(np.float64)
    base_hits = np.bincount(cm.raters[:, 1:].ravel(), weights=correct[:, 1:].ravel(),
                            minlength=n_raters)
    t_obs = _cohort_statistic(correct, cm.raters, n_raters)
    rows = np.arange(n)
    t_perm = np.empty(iterations)
    for it in range(iterations):
        j = replicate_rng(seed, it).integers(0, width, size=n)
        swapped = correct[rows, j]
        # the rater whose rating moved to the DLS now holds the DLS's rating
        delta = np.where(j > 0, correct[:, 0] - swapped, 0.0)
        hits = base_hits + np.bincount(cm.raters[rows, j], weights=delta, minlength=n_raters)
        t_perm[it] = swapped.mean() - np.mean(hits[1:] / counts[1:])
    exceed = int(np.sum(np.abs(t_perm) >= abs(t_obs) - 1e-12))
    p = (1 + exceed) / (1 + iterations)
    return (p, t_obs) if return_statistic else p


def cohort29_probabilities(n_ten: int = 10, n_nineteen_pool: int = 19,
                           per_slide_nineteen: int = 3) -> np.ndarray:
    """Selection probability of each column of a `CohortMatrix` (DLS excluded)."""
    total = n_ten + n_nineteen_pool
    p_ten = np.full(n_ten, 1.0 / total)
    p_nin = np.full(per_slide_nineteen, n_nineteen_pool / total / per_slide_nineteen)
    return np.r_[p_ten, p_nin]


def cohort29_sample(table: RatingTable, seed: int) -> np.ndarray:
    """Draw one pathologist grade group per slide so that every rater of the
    29-rater cohort is represented equally in expectation."""
    cm = cohort_matrix(table)
    probs = cohort29_probabilities()
    rng = np.random.default_rng(seed)
    cols = 1 + rng.choice(probs.size, size=table.n_slides, p=probs)
    return cm.values[np.arange(table.n_slides), cols]


def cohort29_median(table: RatingTable, metric: Callable[[np.ndarray], float],
                    iterations: int = 999, seed: int = 0) -> tuple[np.ndarray, float]:
    """Run ``iterations`` cohort samplings and return the sample whose
    ``metric`` is the median, together with that metric value."""
    samples = [cohort29_sample(table, seed=int(s))
               for s in np.random.SeedSequence(seed).generate_state(iterations)]
    values = np.array([metric(s) for s in samples])
    order = np.argsort(values, kind="stable")
    mid = int(order[(iterations - 1) // 2])
    return samples[mid], float(values[mid])
