"""Stage-1 patch classification.

`PatchClassifier` is the contract a patch-level model has to satisfy. The
only implementation shipped here is `SyntheticOracle`, a seeded stand-in that
knows each patch's ground-truth label and blurs it with configurable
confusion noise. Orientation ensembling, likelihood calibration and the
calibration search operate on whatever the classifier returns.
"""
from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Protocol, Sequence

import numpy as np

from .core import N_CATEGORIES, GradeGroup, LikelihoodMap, SlideRecord
from .metrics import cohens_kappa

LIKELIHOOD_FLOOR = 1e-12
N_ORIENTATIONS = 8  # 4 rotations x 2 flips
DEFAULT_EXPONENTS = tuple(range(-3, 4))


class PatchClassifier(Protocol):
    def predict(self, slide: SlideRecord, patch_index: int,
                orientation: int = 0) -> Optional[np.ndarray]:
        """Likelihood 4-vector for one patch, or None if it cannot be scored."""

    def predict_slide(self, slide: SlideRecord, orientation: int = 0) -> np.ndarray:
        """(n_patches, 4) likelihoods in patch order; NaN rows are unscored."""


def adjacent_confusion() -> np.ndarray:
    """Row-stochastic confusion bias spreading mass evenly over a category
    and its severity neighbours."""
    bias = np.zeros((N_CATEGORIES, N_CATEGORIES))
    for i in range(N_CATEGORIES):
        lo, hi = max(i - 1, 0), min(i + 1, N_CATEGORIES - 1)
        bias[i, lo:hi + 1] = 1.0 / (hi - lo + 1)
    return bias


@dataclass(frozen=True)
class SyntheticOracleConfig:
    """Settings of the synthetic stand-in classifier.

    ``concentration`` scales a per-patch Dirichlet draw around the confusion
    row; ``None`` replaces the draw by the row itself, which makes the output
    the plain mixture ``(1 - eps) * onehot + eps * row``.
    """

    noise_eps: float = 0.0
    confusion_bias: np.ndarray = field(default_factory=adjacent_confusion)
    seed: int = 0
    concentration: Optional[float] = 1.0

    def __post_init__(self):
        if not 0.0 <= self.noise_eps <= 1.0:
            raise ValueError("noise_eps must lie in [0, 1]")
        bias = np.asarray(self.confusion_bias, dtype=np.float64)
        if bias.shape != (N_CATEGORIES, N_CATEGORIES) or (bias < 0).any():
            raise ValueError("confusion_bias must be a nonnegative 4x4 matrix")
        if not np.allclose(bias.sum(axis=1), 1.0):
            raise ValueError("confusion_bias rows must sum to 1")
        if self.concentration is not None and self.concentration <= 0:
            raise ValueError("concentration must be positive")
        object.__setattr__(self, "confusion_bias", bias)


def slide_seed(seed: int, slide_id: str) -> np.random.SeedSequence:
    digest = hashlib.sha256(slide_id.encode("utf-8")).digest()
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF,
                                   int.from_bytes(digest[:8], "little")])


class SyntheticOracle:
    """Classifier double that reads the resolved ground truth of each patch.

    Outputs are reproducible for a given ``(seed, slide_id, patch_index)`` and
    identical for all eight orientations.
    """

    def __init__(self, config: SyntheticOracleConfig = SyntheticOracleConfig()):
        self.config = config
        self._cache: dict[str, np.ndarray] = {}

    def _slide_likelihoods(self, slide: SlideRecord) -> np.ndarray:
        cached = self._cache.get(slide.slide_id)
        if cached is not None and cached.shape[0] == slide.n_patches:
            return cached
        cfg = self.config
        truth = slide.resolved_labels()
        n = truth.shape[0]
        rng = np.random.default_rng(slide_seed(cfg.seed, slide.slide_id))
        rows = cfg.confusion_bias[np.clip(truth, 0, None)]
        if cfg.concentration is None:
            noise = rows
        else:
            noise = rng.gamma(cfg.concentration * rows, size=(n, N_CATEGORIES))
            noise /= noise.sum(axis=1, keepdims=True)
        onehot = np.zeros((n, N_CATEGORIES))
        onehot[np.arange(n), np.clip(truth, 0, None)] = 1.0
        out = (1.0 - cfg.noise_eps) * onehot + cfg.noise_eps * noise
        out /= out.sum(axis=1, keepdims=True)
        out[truth < 0] = np.nan
        self._cache = {slide.slide_id: out}
        return out

    def predict(self, slide, patch_index, orientation=0):
        if not 0 <= orientation < N_ORIENTATIONS:
            raise ValueError(f"orientation must be in [0, {N_ORIENTATIONS})")
        row = self._slide_likelihoods(slide)[patch_index]
        if np.isnan(row).any():
            return None
        return row.copy()

    def predict_slide(self, slide, orientation=0):
        if not 0 <= orientation < N_ORIENTATIONS:
            raise ValueError(f"orientation must be in [0, {N_ORIENTATIONS})")
        return self._slide_likelihoods(slide).copy()


def oracle_classify(slide: SlideRecord, patch_index: int,
                    cfg: SyntheticOracleConfig) -> Optional[np.ndarray]:
    return SyntheticOracle(cfg).predict(slide, patch_index)


def geometric_mean_ensemble(predictions) -> np.ndarray:
    """Componentwise geometric mean of likelihood vectors, renormalised.

    ``predictions`` is stacked along the first axis; entries are floored at
    1e-12 before taking logarithms. NaN inputs stay NaN.
    """
    preds = np.asarray(predictions, dtype=np.float64)
    if preds.ndim < 2 or preds.shape[0] == 0:
        raise ValueError("need at least one prediction to ensemble")
    logs = np.log(np.maximum(preds, LIKELIHOOD_FLOOR))
    logs[np.isnan(preds)] = np.nan
    gm = np.exp(logs.mean(axis=0))
    return gm / gm.sum(axis=-1, keepdims=True)


def ensemble_orientations(classifier: PatchClassifier, slide: SlideRecord,
                          patch_index: int) -> Optional[np.ndarray]:
    preds = [classifier.predict(slide, patch_index, o) for o in range(N_ORIENTATIONS)]
    if any(p is None for p in preds):
        return None
    return geometric_mean_ensemble(preds)


def ensemble_slide(classifier: PatchClassifier, slide: SlideRecord) -> np.ndarray:
    """Orientation-ensembled (n_patches, 4) likelihoods for a whole slide."""
    preds = np.stack([classifier.predict_slide(slide, o) for o in range(N_ORIENTATIONS)])
    return geometric_mean_ensemble(preds)


def infer_slide(classifier: PatchClassifier, slide: SlideRecord,
                stride_um: Optional[float] = None) -> LikelihoodMap:
    rows, cols = slide.mask.shape
    flat = ensemble_slide(classifier, slide)
    return LikelihoodMap(flat.reshape(rows, cols, N_CATEGORIES),
                         stride_um=stride_um or slide.mask.stride_um)


@dataclass(frozen=True)
class CalibrationWeights:
    w: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        w = tuple(float(x) for x in self.w)
        if len(w) != N_CATEGORIES or any(not x > 0 for x in w):
            raise ValueError("calibration weights must be four positive numbers")
        object.__setattr__(self, "w", w)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.w, dtype=np.float64)


def calibrate(likelihoods, weights: CalibrationWeights) -> np.ndarray:
    """Reweight likelihoods per category and renormalise (last axis)."""
    scaled = np.asarray(likelihoods, dtype=np.float64) * weights.as_array()
    return scaled / scaled.sum(axis=-1, keepdims=True)


def calibration_lattice(exponents: Iterable[int] = DEFAULT_EXPONENTS) -> list[CalibrationWeights]:
    """Non-tumor weight fixed at 1, tumor weights on a power-of-two grid,
    in lexicographic order of the exponents."""
    exps = sorted(exponents)
    return [CalibrationWeights((1.0, 2.0 ** a, 2.0 ** b, 2.0 ** c))
            for a, b, c in itertools.product(exps, repeat=3)]


Grader = Callable[[CalibrationWeights, Sequence[LikelihoodMap]], Sequence[GradeGroup]]


def search_calibration(tuning_maps: Sequence[LikelihoodMap],
                       references: Sequence[GradeGroup],
                       grader: Grader,
                       exponents: Iterable[int] = DEFAULT_EXPONENTS,
                       ) -> tuple[CalibrationWeights, float]:
    """Grid search for the weights maximising tuning-set Cohen's kappa.

    ``grader(weights, maps)`` must return one grade group per map. The first
    lattice point reaching the maximum wins.
    """
    if len(tuning_maps) == 0:
        raise ValueError("tuning set is empty")
    if len(references) != len(tuning_maps):
        raise ValueError("one reference grade group per tuning slide is required")
    refs = [int(r) for r in references]
    best, best_kappa = None, -np.inf
    for weights in calibration_lattice(exponents):
        preds = [int(p) for p in grader(weights, tuning_maps)]
        kappa = cohens_kappa(preds, refs)
        if kappa > best_kappa:
            best, best_kappa = weights, kappa
    return best, float(best_kappa)


def fit_calibration(tuning_slides: Sequence[SlideRecord], classifier: PatchClassifier,
                    grader: Grader, exponents: Iterable[int] = DEFAULT_EXPONENTS,
                    ) -> tuple[CalibrationWeights, float]:
    if not tuning_slides:
        raise ValueError("tuning set is empty")
    if any(s.reference_gg is None for s in tuning_slides):
        raise ValueError("tuning slides need reference grade groups")
    maps = [infer_slide(classifier, s) for s in tuning_slides]
    return search_calibration(maps, [s.reference_gg for s in tuning_slides], grader, exponents)
