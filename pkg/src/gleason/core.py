"""Domain types shared by every stage of the grading pipeline.

Patterns, region labels, patch grids, Gleason scores and grade groups live
here together with the rules that turn annotator labels into training
targets and slide-level percentages into grade groups.
"""
from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class NoTumorError(ValueError):
    """Raised when a slide without any tumor pattern has to be scored."""


class PatternCategory(enum.IntEnum):
    """Patch category in severity order. The value doubles as the column
    index in a likelihood 4-vector."""

    NON_TUMOR = 0
    GP3 = 1
    GP4 = 2
    GP5 = 3

    @property
    def pattern_number(self) -> int:
        if self is PatternCategory.NON_TUMOR:
            raise ValueError("non-tumor has no Gleason pattern number")
        return int(self) + 2

    @classmethod
    def from_pattern_number(cls, number: int) -> "PatternCategory":
        if number not in (3, 4, 5):
            raise ValueError(f"invalid Gleason pattern {number}")
        return cls(number - 2)

    @property
    def is_tumor(self) -> bool:
        return self is not PatternCategory.NON_TUMOR


TUMOR_PATTERNS = (PatternCategory.GP3, PatternCategory.GP4, PatternCategory.GP5)
N_CATEGORIES = 4


class GradeGroup(enum.IntEnum):
    """Four-tier grade group; GG4 and GG5 are merged. Values are the ordinal
    risk encoding used for concordance analyses."""

    GG1 = 1
    GG2 = 2
    GG3 = 3
    GG4_5 = 4

    @property
    def label(self) -> str:
        return "4-5" if self is GradeGroup.GG4_5 else str(int(self))


class LabelKind(enum.Enum):
    PATTERN = "pattern"
    MIXED = "mixed"
    ARTIFACT = "artifact"
    CONSULT = "consult"
    NON_GRADABLE = "non_gradable"
    UNLABELED = "unlabeled"


# Integer codes for the mask CSV format. Mixed grades use 10*primary+secondary.
ARTIFACT_CODE = 98
CONSULT_CODE = 97
NON_GRADABLE_CODE = 96
UNLABELED_CODE = 99


@dataclass(frozen=True)
class RegionLabel:
    """One annotator's label for a region."""

    kind: LabelKind
    pattern: Optional[PatternCategory] = None
    secondary: Optional[PatternCategory] = None

    def __post_init__(self):
        if self.kind is LabelKind.PATTERN:
            if self.pattern is None or self.secondary is not None:
                raise ValueError("pattern label needs exactly one category")
        elif self.kind is LabelKind.MIXED:
            p, s = self.pattern, self.secondary
            if p is None or s is None or not p.is_tumor or not s.is_tumor:
                raise ValueError("mixed-grade labels need two tumor patterns")
            if p == s:
                raise ValueError("mixed-grade primary and secondary must differ")
        elif self.pattern is not None or self.secondary is not None:
            raise ValueError(f"{self.kind.value} labels carry no pattern")

    @classmethod
    def of(cls, category: PatternCategory | int) -> "RegionLabel":
        return cls(LabelKind.PATTERN, PatternCategory(category))

    @classmethod
    def mixed(cls, primary: int, secondary: int) -> "RegionLabel":
        """Mixed grade from Gleason pattern numbers, e.g. ``mixed(5, 4)``."""
        return cls(
            LabelKind.MIXED,
            PatternCategory.from_pattern_number(primary),
            PatternCategory.from_pattern_number(secondary),
        )

    @property
    def code(self) -> int:
        if self.kind is LabelKind.PATTERN:
            return int(self.pattern)
        if self.kind is LabelKind.MIXED:
            return 10 * self.pattern.pattern_number + self.secondary.pattern_number
        return {
            LabelKind.ARTIFACT: ARTIFACT_CODE,
            LabelKind.CONSULT: CONSULT_CODE,
            LabelKind.NON_GRADABLE: NON_GRADABLE_CODE,
            LabelKind.UNLABELED: UNLABELED_CODE,
        }[self.kind]

    @classmethod
    def from_code(cls, code: int) -> "RegionLabel":
        code = int(code)
        if 0 <= code <= 3:
            return cls.of(code)
        if code == ARTIFACT_CODE:
            return cls(LabelKind.ARTIFACT)
        if code == CONSULT_CODE:
            return cls(LabelKind.CONSULT)
        if code == NON_GRADABLE_CODE:
            return cls(LabelKind.NON_GRADABLE)
        if code == UNLABELED_CODE:
            return cls(LabelKind.UNLABELED)
        p, s = divmod(code, 10)
        if p in (3, 4, 5) and s in (3, 4, 5) and p != s:
            return cls.mixed(p, s)
        raise ValueError(f"unknown region label code {code}")


ARTIFACT = RegionLabel(LabelKind.ARTIFACT)
CONSULT = RegionLabel(LabelKind.CONSULT)
NON_GRADABLE = RegionLabel(LabelKind.NON_GRADABLE)
UNLABELED = RegionLabel(LabelKind.UNLABELED)

VALID_LABEL_CODES = frozenset(
    [0, 1, 2, 3, ARTIFACT_CODE, CONSULT_CODE, NON_GRADABLE_CODE, UNLABELED_CODE]
    + [10 * p + s for p in (3, 4, 5) for s in (3, 4, 5) if p != s]
)


class ResolvePolicy(enum.Enum):
    TRAINING = "training"
    UNANIMOUS = "unanimous"


def _training_target(label: RegionLabel) -> Optional[PatternCategory]:
    if label.kind is LabelKind.PATTERN:
        return label.pattern
    if label.kind is LabelKind.MIXED:
        return label.pattern
    if label.kind is LabelKind.ARTIFACT:
        return PatternCategory.NON_TUMOR
    return None


def resolve_region_label(
    labels: Sequence[RegionLabel], policy: ResolvePolicy = ResolvePolicy.TRAINING
) -> Optional[PatternCategory]:
    """Collapse several annotators' labels for one region into a category.

    Artifacts count as non-tumor and mixed grades as their primary pattern.
    Consult, non-gradable and unlabeled votes are dropped. Under the training
    policy the remaining votes are decided by majority with ties going to the
    more severe category; under the unanimous policy every annotator has to
    agree. Returns ``None`` when no category can be assigned.
    """
    if not labels:
        raise ValueError("at least one label is required")
    mapped = [_training_target(lab) for lab in labels]
    if policy is ResolvePolicy.UNANIMOUS:
        if any(m is None for m in mapped) or len(set(mapped)) != 1:
            return None
        return mapped[0]
    votes = Counter(m for m in mapped if m is not None)
    if not votes:
        return None
    return max(votes, key=lambda c: (votes[c], int(c)))


@dataclass(frozen=True)
class GleasonScore:
    primary: PatternCategory
    secondary: PatternCategory

    def __post_init__(self):
        if not (self.primary.is_tumor and self.secondary.is_tumor):
            raise ValueError("Gleason score patterns must be tumor patterns")

    @property
    def total(self) -> int:
        return self.primary.pattern_number + self.secondary.pattern_number

    def __str__(self) -> str:
        return f"{self.primary.pattern_number}+{self.secondary.pattern_number}"


def derive_gleason_score(pct_gp3: float, pct_gp4: float, pct_gp5: float) -> GleasonScore:
    """Gleason score from slide-level pattern percentages.

    Primary is the most abundant pattern and secondary the next most abundant
    pattern with a positive share; a single-pattern slide scores e.g. 3+3.
    Percentage ties go to the more severe pattern.
    """
    pcts = (float(pct_gp3), float(pct_gp4), float(pct_gp5))
    if any(not 0.0 <= p <= 100.0 for p in pcts) or sum(pcts) > 100.0 + 1e-6:
        raise ValueError(f"invalid pattern percentages {pcts}")
    if all(p == 0.0 for p in pcts):
        raise NoTumorError("no tumor pattern present")
    ranked = sorted(
        (p, cat) for p, cat in zip(pcts, TUMOR_PATTERNS) if p > 0.0
    )[::-1]
    primary = ranked[0][1]
    secondary = ranked[1][1] if len(ranked) > 1 else primary
    return GleasonScore(primary, secondary)


def grade_group_from_score(score: GleasonScore) -> GradeGroup:
    p = score.primary.pattern_number
    s = score.secondary.pattern_number
    if score.total <= 6:
        return GradeGroup.GG1
    if score.total == 7:
        return GradeGroup.GG2 if (p, s) == (3, 4) else GradeGroup.GG3
    return GradeGroup.GG4_5


def grade_group_from_percentages(pct_gp3: float, pct_gp4: float, pct_gp5: float) -> GradeGroup:
    return grade_group_from_score(derive_gleason_score(pct_gp3, pct_gp4, pct_gp5))


@dataclass(frozen=True, eq=False)
class PatchGrid:
    """Row-major grid of per-patch payloads at a fixed physical stride."""

    values: np.ndarray
    stride_um: float = 32.0

    def __post_init__(self):
        if self.values.ndim < 2:
            raise ValueError("values must have shape (rows, cols, ...)")
        if not self.stride_um > 0:
            raise ValueError("stride_um must be positive")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[0], self.values.shape[1]

    def __len__(self) -> int:
        return self.rows * self.cols

    def flat(self) -> np.ndarray:
        return self.values.reshape(len(self), *self.values.shape[2:])


class LabelMask(PatchGrid):
    """Patch grid of integer region-label codes."""

    def __init__(self, codes, stride_um: float = 32.0):
        codes = np.asarray(codes, dtype=np.int16)
        if codes.ndim != 2:
            raise ValueError("label mask must be two-dimensional")
        bad = set(np.unique(codes).tolist()) - VALID_LABEL_CODES
        if bad:
            raise ValueError(f"unknown region label codes {sorted(bad)}")
        super().__init__(codes, stride_um)

    def label_at(self, index: int) -> RegionLabel:
        return RegionLabel.from_code(self.flat()[index])

    def resolved(self) -> np.ndarray:
        """Training-policy category per patch (flat), -1 where undefined."""
        out = np.full(len(self), -1, dtype=np.int8)
        codes = self.flat()
        for code in np.unique(codes):
            cat = resolve_region_label([RegionLabel.from_code(code)])
            if cat is not None:
                out[codes == code] = int(cat)
        return out


def resolve_masks(masks: Sequence[LabelMask], policy: ResolvePolicy) -> np.ndarray:
    """Per-patch resolution across several annotators' masks (flat, -1 = undefined)."""
    stacked = np.stack([m.flat() for m in masks], axis=1)
    out = np.full(stacked.shape[0], -1, dtype=np.int8)
    cache: dict[tuple, int] = {}
    for i, row in enumerate(map(tuple, stacked.tolist())):
        if row not in cache:
            cat = resolve_region_label([RegionLabel.from_code(c) for c in row], policy)
            cache[row] = -1 if cat is None else int(cat)
        out[i] = cache[row]
    return out


class LikelihoodMap(PatchGrid):
    """Patch grid of category likelihood 4-vectors, stored as float32.

    Rows of NaN mark patches the classifier could not score.
    """

    def __init__(self, values, stride_um: float = 32.0, check: bool = True):
        values = np.asarray(values, dtype=np.float32)
        if values.ndim != 3 or values.shape[2] != N_CATEGORIES:
            raise ValueError("likelihood map must have shape (rows, cols, 4)")
        if check:
            flat = values.reshape(-1, N_CATEGORIES)
            ok = ~np.isnan(flat).any(axis=1)
            sums = flat[ok].astype(np.float64).sum(axis=1)
            if (flat[ok] < 0).any() or not np.allclose(sums, 1.0, atol=1e-6):
                raise ValueError("likelihood vectors must be nonnegative and sum to 1")
        super().__init__(values, stride_um)

    def defined(self) -> np.ndarray:
        return ~np.isnan(self.flat()).any(axis=1)


@dataclass
class SlideRecord:
    slide_id: str
    mask: LabelMask
    annotator_masks: Optional[list[LabelMask]] = None
    reference_gg: Optional[GradeGroup] = None
    reference_pcts: Optional[tuple[float, float, float]] = None
    resolution_um_per_px: float = 0.25

    def __post_init__(self):
        for m in self.annotator_masks or []:
            if m.shape != self.mask.shape:
                raise ValueError("annotator masks must share the slide grid")
        if self.reference_pcts is not None:
            if any(not 0.0 <= p <= 100.0 for p in self.reference_pcts):
                raise ValueError("reference percentages must lie in [0, 100]")

    @property
    def n_patches(self) -> int:
        return len(self.mask)

    def resolved_labels(self) -> np.ndarray:
        """Training-policy ground-truth category per patch, -1 where undefined."""
        if self.annotator_masks:
            return resolve_masks(self.annotator_masks, ResolvePolicy.TRAINING)
        return self.mask.resolved()

    def tissue_mask(self) -> np.ndarray:
        return self.resolved_labels() >= 0


@dataclass(frozen=True)
class ClinicalRecord:
    slide_id: str
    time: float
    event: bool

    def __post_init__(self):
        if not (np.isfinite(self.time) and self.time > 0):
            raise ValueError(f"follow-up time must be positive and finite, got {self.time}")
