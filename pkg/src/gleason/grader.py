"""Stage-2 slide grading.

Calibrated heatmaps are summarised as %Tumor / %GP3 / %GP4 / %GP5, min-max
rescaled on the training slides and classified by a uniform-weight kNN.
Three binary kNN models (GG >= 2, 3, 4) provide ROC scores.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .classifier import CalibrationWeights, PatchClassifier, infer_slide
from .core import N_CATEGORIES, GradeGroup, LikelihoodMap, SlideRecord

BINARY_THRESHOLDS = (2, 3, 4)
DEFAULT_K = 24


@dataclass(frozen=True)
class FeatureVector:
    pct_tumor: float
    pct_gp3: float
    pct_gp4: float
    pct_gp5: float

    def as_array(self) -> np.ndarray:
        return np.array([self.pct_tumor, self.pct_gp3, self.pct_gp4, self.pct_gp5])

    @property
    def pattern_pcts(self) -> tuple[float, float, float]:
        return self.pct_gp3, self.pct_gp4, self.pct_gp5

    @classmethod
    def from_array(cls, arr) -> "FeatureVector":
        return cls(*(float(x) for x in arr))


def stable_k_smallest(d: np.ndarray, k: int) -> np.ndarray:
    """Row-wise indices of the ``k`` smallest entries, identical to
    ``np.argsort(d, kind="stable")[:, :k]`` without sorting whole rows."""
    n = d.shape[1]
    if k >= n:
        return np.argsort(d, axis=1, kind="stable")[:, :k]
    kth = np.partition(d, k - 1, axis=1)[:, k - 1:k]
    less = d < kth
    tied = d == kth
    need = k - less.sum(axis=1, keepdims=True)
    chosen = less | (tied & (np.cumsum(tied, axis=1) <= need))
    idx = np.nonzero(chosen)[1].reshape(d.shape[0], k)
    order = np.argsort(np.take_along_axis(d, idx, axis=1), axis=1, kind="stable")
    return np.take_along_axis(idx, order, axis=1)


def argmax_severe(likelihoods: np.ndarray) -> np.ndarray:
    """Argmax over the last axis with ties resolved toward the higher index."""
    rev = likelihoods[..., ::-1]
    return likelihoods.shape[-1] - 1 - np.argmax(rev, axis=-1)


def features_from_counts(counts: np.ndarray) -> np.ndarray:
    """Feature rows from per-slide category counts of shape (n, 4)."""
    counts = np.asarray(counts, dtype=np.float64)
    tissue = counts.sum(axis=1)
    if (tissue == 0).any():
        raise ValueError("slide without tissue patches")
    tumor = counts[:, 1:].sum(axis=1)
    out = np.zeros((counts.shape[0], 4))
    out[:, 0] = 100.0 * tumor / tissue
    has = tumor > 0
    out[has, 1:] = 100.0 * counts[has, 1:] / tumor[has, None]
    return out


def extract_features(calibrated: LikelihoodMap | np.ndarray,
                     tissue_mask: Optional[np.ndarray] = None) -> FeatureVector:
    """Summarise a calibrated heatmap over its tissue patches.

    %Tumor is relative to tissue patches and %GP3/4/5 relative to tumor
    patches; a slide without tumor gives all zeros.
    """
    values = calibrated.flat() if isinstance(calibrated, LikelihoodMap) else np.asarray(calibrated)
    values = values.reshape(-1, N_CATEGORIES)
    if tissue_mask is None:
        tissue = ~np.isnan(values).any(axis=1)
    else:
        tissue = np.asarray(tissue_mask, dtype=bool).reshape(-1)
        if tissue.shape[0] != values.shape[0]:
            raise ValueError("tissue mask and heatmap are not congruent")
    cats = argmax_severe(values[tissue])
    counts = np.bincount(cats, minlength=N_CATEGORIES)[None, :]
    return FeatureVector.from_array(features_from_counts(counts)[0])


def _argmax_severe_columns(columns: np.ndarray, w: np.ndarray) -> np.ndarray:
    """argmax_severe of ``columns.T * w`` computed one category at a time."""
    best = np.multiply(columns[-1], columns.dtype.type(w[-1]))
    v = np.empty_like(best)
    win = np.empty(best.shape, dtype=bool)
    cats = np.full(best.shape, columns.shape[0] - 1, dtype=np.int8)
    for c in range(columns.shape[0] - 2, -1, -1):
        np.multiply(columns[c], columns.dtype.type(w[c]), out=v)
        np.greater(v, best, out=win)
        cats -= win.view(np.int8) * (cats - c)  # cats = c where win, without a masked store
        np.maximum(best, v, out=best)
    return cats


def _power_of_two(w: np.ndarray) -> bool:
    mant, exp = np.frexp(w)
    return bool((mant == 0.5).all() and (np.abs(exp) <= 20).all())


class StackedMaps:
    """Tissue likelihoods of many slides concatenated for fast re-featurising
    under different calibration weights."""

    def __init__(self, maps: Sequence[LikelihoodMap]):
        parts, owner = [], []
        for i, m in enumerate(maps):
            flat = m.flat().astype(np.float64)
            ok = ~np.isnan(flat).any(axis=1)
            if not ok.any():
                raise ValueError(f"slide {i} has no tissue patches")
            parts.append(flat[ok])
            owner.append(np.full(int(ok.sum()), i, dtype=np.int64))
        self.n_slides = len(maps)
        self.values = np.concatenate(parts) if parts else np.zeros((0, N_CATEGORIES))
        self._columns = np.ascontiguousarray(self.values.T)
        # float32 heatmap values scaled by powers of two stay exact in float32,
        # so the half-width copy orders patches exactly like the float64 one
        narrow = self._columns.astype(np.float32)
        nz = np.abs(self._columns[self._columns != 0])
        exact = (narrow == self._columns).all() and (nz.size == 0 or nz.min() >= 2.0 ** -100)
        self._columns32 = narrow if exact else None
        self.owner = np.concatenate(owner) if owner else np.zeros(0, dtype=np.int64)
        self._base = self.owner * N_CATEGORIES

    def features(self, weights: CalibrationWeights = CalibrationWeights()) -> np.ndarray:
        w = weights.as_array()
        cols = self._columns32 if self._columns32 is not None and _power_of_two(w) else self._columns
        cats = _argmax_severe_columns(cols, w)
        counts = np.bincount(self._base + cats,
                             minlength=self.n_slides * N_CATEGORIES)
        return features_from_counts(counts.reshape(self.n_slides, N_CATEGORIES))


@dataclass(frozen=True)
class FeatureRescaler:
    mins: np.ndarray
    maxs: np.ndarray

    def transform(self, features) -> np.ndarray:
        """Map into [0, 1] per feature; constant features map to 0 and values
        outside the training range are clamped."""
        x = np.asarray(features, dtype=np.float64)
        span = self.maxs - self.mins
        safe = np.where(span > 0, span, 1.0)
        out = np.where(span > 0, (x - self.mins) / safe, 0.0)
        return np.clip(out, 0.0, 1.0)


def fit_rescaler(training_features) -> FeatureRescaler:
    x = np.asarray([f.as_array() if isinstance(f, FeatureVector) else f
                    for f in training_features], dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("need at least one training feature vector")
    return FeatureRescaler(x.min(axis=0), x.max(axis=0))


@dataclass(frozen=True)
class KnnModel:
    """Uniform-weight kNN over rescaled feature vectors. Labels are ordered
    integers; larger means more severe."""

    points: np.ndarray
    labels: np.ndarray
    k: int = DEFAULT_K

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        labs = np.asarray(self.labels, dtype=np.int64)
        if pts.ndim != 2 or labs.shape != (pts.shape[0],):
            raise ValueError("points must be (n, d) with one label per point")
        if not 1 <= self.k <= pts.shape[0]:
            raise ValueError(f"k={self.k} must be between 1 and the training size {pts.shape[0]}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", labs)

    def neighbors(self, queries) -> np.ndarray:
        """Indices (q, k) of the nearest training points ordered by distance;
        distance ties keep training order."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        d2 = np.zeros((q.shape[0], self.points.shape[0]))
        diff = np.empty_like(d2)
        for j in range(q.shape[1]):
            # accumulate in dimension order so equal distances compare equal
            np.subtract(q[:, j, None], self.points[None, :, j], out=diff)
            diff *= diff
            d2 += diff
        return stable_k_smallest(d2, self.k)

    def vote(self, nb: np.ndarray) -> np.ndarray:
        nb_labels = self.labels[nb]
        classes = np.unique(self.labels)
        votes = (nb_labels[:, :, None] == classes[None, None, :]).sum(axis=1)
        # reversed argmax so the most severe class wins vote ties
        best = votes.shape[1] - 1 - np.argmax(votes[:, ::-1], axis=1)
        return classes[best]

    def predict(self, queries) -> np.ndarray:
        return self.vote(self.neighbors(queries))

    def positive_fraction(self, queries) -> np.ndarray:
        return (self.labels[self.neighbors(queries)] > 0).mean(axis=1)


def knn_predict(model: KnnModel, query) -> GradeGroup:
    return GradeGroup(int(model.predict(query)[0]))


def knn_binary_score(model: KnnModel, query) -> float:
    """Fraction of the k neighbours carrying a positive (nonzero) label."""
    return float(model.positive_fraction(query)[0])


def binary_labels(grade_groups, threshold: int) -> np.ndarray:
    return (np.asarray(grade_groups, dtype=np.int64) >= threshold).astype(np.int64)


@dataclass(frozen=True)
class GraderModel:
    """Everything stage 2 needs to grade a heatmap."""

    calibration: CalibrationWeights
    rescaler: FeatureRescaler
    training_features: np.ndarray
    training_labels: np.ndarray
    k: int = DEFAULT_K
    tuning_kappa: Optional[float] = None

    @property
    def knn(self) -> KnnModel:
        return KnnModel(self.rescaler.transform(self.training_features), self.training_labels, self.k)

    def binary_knn(self, threshold: int) -> KnnModel:
        return KnnModel(self.rescaler.transform(self.training_features),
                        binary_labels(self.training_labels, threshold), self.k)

    def grade_features(self, features: np.ndarray, binary: bool = True) -> dict:
        """Grade groups and, if ``binary``, the positive-neighbour fraction of
        each binary model. The binary models share points and distances with
        the multi-class one, so a single neighbour search serves all four."""
        knn = self.knn
        nb = knn.neighbors(self.rescaler.transform(np.atleast_2d(features)))
        out = {"grade_group": knn.vote(nb)}
        if binary:
            for t in BINARY_THRESHOLDS:
                out[f"p_gg{t}"] = (knn.labels[nb] >= t).mean(axis=1)
        return out


@dataclass(frozen=True)
class SlideGrade:
    slide_id: str
    grade_group: GradeGroup
    features: FeatureVector
    binary_scores: dict = field(default_factory=dict)


def fit_grader(training_features, training_labels, calibration: CalibrationWeights,
               k: int = DEFAULT_K, tuning_kappa: Optional[float] = None) -> GraderModel:
    feats = np.asarray(training_features, dtype=np.float64)
    return GraderModel(calibration, fit_rescaler(feats), feats,
                       np.asarray(training_labels, dtype=np.int64), k, tuning_kappa)


class KnnGrader:
    """Calibration-search objective: featurise the training slides under the
    candidate weights, refit rescaler and kNN, and grade the given maps."""

    def __init__(self, train_maps: Sequence[LikelihoodMap], train_labels, k: int = DEFAULT_K):
        self.train = StackedMaps(train_maps)
        self.labels = np.asarray(train_labels, dtype=np.int64)
        self.k = k
        self._eval_cache: tuple = (None, None)

    def model(self, weights: CalibrationWeights) -> GraderModel:
        return fit_grader(self.train.features(weights), self.labels, weights, self.k)

    def __call__(self, weights: CalibrationWeights, maps: Sequence[LikelihoodMap]):
        key, stacked = self._eval_cache
        if key is not maps:
            stacked = StackedMaps(maps)
            self._eval_cache = (maps, stacked)
        model = self.model(weights)
        return model.grade_features(stacked.features(weights), binary=False)["grade_group"]


def grade_map(likelihoods: LikelihoodMap, model: GraderModel, slide_id: str = "") -> SlideGrade:
    # same argmax path as the calibration search, so tuning and grading agree bitwise
    feats = FeatureVector.from_array(StackedMaps([likelihoods]).features(model.calibration)[0])
    out = model.grade_features(feats.as_array())
    return SlideGrade(slide_id, GradeGroup(int(out["grade_group"][0])), feats,
                      {f"gg>={t}": float(out[f"p_gg{t}"][0]) for t in BINARY_THRESHOLDS})


def grade_slide(slide: SlideRecord, classifier: PatchClassifier, model: GraderModel) -> SlideGrade:
    """Classify every patch, ensemble orientations, calibrate, featurise and
    predict the grade group plus binary scores."""
    return grade_map(infer_slide(classifier, slide), model, slide.slide_id)
