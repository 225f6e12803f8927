"""Synthetic slides, follow-up data and pathologist ratings.

Each slide is an elliptical tissue region on a patch grid. A target grade
group is drawn from the configured mix, pattern percentages consistent with
it are sampled, and tumor blobs are grown until the mask realises those
percentages exactly (up to whole patches). The stored reference grade group
is derived from the realised percentages. Follow-up times are exponential
with a grade-group specific event rate and independent exponential
censoring.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .core import (ARTIFACT_CODE, UNLABELED_CODE, ClinicalRecord, GradeGroup,
                   LabelMask, SlideRecord, grade_group_from_percentages)
from .metrics import NINETEEN, TEN, RatingTable

# Validation-set grade group counts (GG1, GG2, GG3, GG4-5)
VALIDATION_MIX = (77 / 331, 134 / 331, 62 / 331, 58 / 331)
BALANCED_MIX = (0.25, 0.25, 0.25, 0.25)
SPLITS = ("train", "tune", "val")

# Gleason scores available to GG4-5, as (primary, secondary) pattern numbers
_GG45_SCORES = ((4, 4), (3, 5), (5, 3), (4, 5), (5, 4), (5, 5))


class GenerationError(RuntimeError):
    """A slide could not be generated within the retry budget."""


@dataclass(frozen=True)
class SyntheticConfig:
    split_sizes: dict = field(default_factory=lambda: {"train": 1200, "tune": 150, "val": 331})
    rows: int = 32
    cols: int = 32
    gg_mix: tuple = VALIDATION_MIX             # validation split
    train_gg_mix: tuple = BALANCED_MIX     # training and tuning splits
    tissue_axes: tuple = (0.30, 0.48)      # ellipse semi-axes as fraction of grid size
    tumor_fraction: tuple = (0.10, 0.60)   # tumor share of tissue patches
    regions_per_pattern: tuple = (1, 3)
    min_secondary_pct: float = 20.0
    min_margin_pct: float = 15.0
    tertiary_prob: float = 0.2
    max_tertiary_pct: float = 5.0
    artifact_fraction: float = 0.02
    event_rates: tuple = (0.002, 0.006, 0.018, 0.054)  # per month, GG1..GG4-5
    censoring_rate: float = 0.01
    max_follow_up: float = 120.0
    n_raters_ten: int = 10
    n_raters_nineteen: int = 19
    nineteen_per_slide: int = 3
    rater_error: tuple = (0.2, 0.5)
    stride_um: float = 32.0
    resolution_um_per_px: float = 0.25
    seed: int = 0
    max_retries: int = 100

    def __post_init__(self):
        for name in ("gg_mix", "train_gg_mix"):
            mix = np.asarray(getattr(self, name), dtype=np.float64)
            if mix.shape != (4,) or (mix < 0).any() or not np.isclose(mix.sum(), 1.0):
                raise ValueError(f"{name} must be four proportions summing to 1")
        rates = np.asarray(self.event_rates, dtype=np.float64)
        if rates.shape != (4,) or (rates <= 0).any() or (np.diff(rates) <= 0).any():
            raise ValueError("event_rates must be positive and strictly increasing")
        if self.censoring_rate < 0:
            raise ValueError("censoring_rate must be nonnegative")
        if set(self.split_sizes) - set(SPLITS):
            raise ValueError(f"splits must be among {SPLITS}")
        if 2 * self.min_secondary_pct + self.min_margin_pct > 100:
            raise ValueError("secondary share and margin cannot both be met")

    @property
    def n_slides(self) -> int:
        return int(sum(self.split_sizes.values()))

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic config keys {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        if "split_sizes" in kw:
            kw["split_sizes"] = dict(kw["split_sizes"])
        return cls(**kw)


@dataclass
class SyntheticDataset:
    slides: list[SlideRecord]
    clinical: list[ClinicalRecord]
    splits: dict[str, str]
    ratings: Optional[RatingTable] = None

    def split(self, name: str) -> list[SlideRecord]:
        return [s for s in self.slides if self.splits[s.slide_id] == name]


def _slide_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), SPLITS.index(split), int(index)])


def _sample_percentages(gg: GradeGroup, cfg: SyntheticConfig, rng) -> np.ndarray:
    """Pattern shares (GP3, GP4, GP5) in percent realising grade group ``gg``."""
    if gg is GradeGroup.GG1:
        return np.array([100.0, 0.0, 0.0])
    if gg is GradeGroup.GG2:
        primary, secondary = 3, 4
    elif gg is GradeGroup.GG3:
        primary, secondary = 4, 3
    else:
        primary, secondary = _GG45_SCORES[rng.integers(len(_GG45_SCORES))]
    pcts = np.zeros(3)
    if primary == secondary:
        pcts[primary - 3] = 100.0
        return pcts
    s_max = (100.0 - cfg.min_margin_pct) / 2
    sec = rng.uniform(cfg.min_secondary_pct, s_max)
    tert = 0.0
    tert_pattern = ({3, 4, 5} - {primary, secondary}).pop()
    if rng.random() < cfg.tertiary_prob:
        tert = rng.uniform(1.0, min(cfg.max_tertiary_pct, sec - cfg.min_margin_pct))
    pcts[secondary - 3] = sec
    pcts[tert_pattern - 3] = tert
    pcts[primary - 3] = 100.0 - sec - tert
    return pcts


def _apportion(total: int, shares: np.ndarray) -> np.ndarray:
    """Integer counts summing to ``total`` by largest remainder."""
    raw = total * shares / shares.sum()
    counts = np.floor(raw).astype(np.int64)
    rem = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rem]] += 1
    return counts


def _tissue_mask(cfg: SyntheticConfig, rng) -> np.ndarray:
    rr, cc = np.mgrid[0:cfg.rows, 0:cfg.cols]
    a = rng.uniform(*cfg.tissue_axes) * cfg.rows
    b = rng.uniform(*cfg.tissue_axes) * cfg.cols
    r0 = cfg.rows / 2 + rng.uniform(-0.05, 0.05) * cfg.rows
    c0 = cfg.cols / 2 + rng.uniform(-0.05, 0.05) * cfg.cols
    return ((rr - r0) / a) ** 2 + ((cc - c0) / b) ** 2 <= 1.0


def _grow_blobs(free: np.ndarray, size: int, n_regions: int, rng) -> list[int]:
    """Grow ``n_regions`` random blobs over free cells totalling ``size``
    cells; ``free`` (2-d bool) is updated in place."""
    rows, cols = free.shape
    sizes = _apportion(size, rng.uniform(0.5, 1.5, size=max(n_regions, 1)))
    taken: list[int] = []
    for target in sizes.tolist():
        grown = 0
        while grown < target:
            candidates = np.flatnonzero(free.ravel())
            if candidates.size == 0:
                raise GenerationError("ran out of tissue while placing tumor blobs")
            seed_cell = int(candidates[rng.integers(candidates.size)])
            frontier = [seed_cell]
            in_frontier = {seed_cell}
            while frontier and grown < target:
                k = int(rng.integers(len(frontier)))
                frontier[k], frontier[-1] = frontier[-1], frontier[k]
                cell = frontier.pop()
                r, c = divmod(cell, cols)
                if not free[r, c]:
                    continue
                free[r, c] = False
                taken.append(cell)
                grown += 1
                for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    nr, nc = r + dr, c + dc
                    if 0 <= nr < rows and 0 <= nc < cols and free[nr, nc]:
                        nxt = nr * cols + nc
                        if nxt not in in_frontier:
                            in_frontier.add(nxt)
                            frontier.append(nxt)
    return taken


def generate_slide(slide_id: str, target: GradeGroup, cfg: SyntheticConfig,
                   rng: np.random.Generator) -> SlideRecord:
    for _ in range(cfg.max_retries):
        tissue = _tissue_mask(cfg, rng)
        n_tissue = int(tissue.sum())
        n_tumor = int(round(rng.uniform(*cfg.tumor_fraction) * n_tissue))
        if n_tumor == 0:
            continue
        shares = _sample_percentages(target, cfg, rng)
        counts = _apportion(n_tumor, shares)
        realised = 100.0 * counts / n_tumor
        if grade_group_from_percentages(*realised) is not target:
            continue
        codes = np.full((cfg.rows, cfg.cols), UNLABELED_CODE, dtype=np.int16)
        codes[tissue] = 0
        free = tissue.copy()
        try:
            for cat, n in zip((1, 2, 3), counts.tolist()):
                if n == 0:
                    continue
                lo, hi = cfg.regions_per_pattern
                cells = _grow_blobs(free, n, int(rng.integers(lo, hi + 1)), rng)
                codes.ravel()[cells] = cat
        except GenerationError:
            continue
        benign = np.flatnonzero(free.ravel())
        n_art = int(round(cfg.artifact_fraction * benign.size))
        if n_art:
            codes.ravel()[rng.choice(benign, size=n_art, replace=False)] = ARTIFACT_CODE
        return SlideRecord(slide_id, LabelMask(codes, cfg.stride_um), reference_gg=target,
                           reference_pcts=tuple(float(x) for x in realised),
                           resolution_um_per_px=cfg.resolution_um_per_px)
    raise GenerationError(f"could not realise {target.name} on slide {slide_id}")


def _follow_up(gg: GradeGroup, cfg: SyntheticConfig, rng) -> tuple[float, bool]:
    t_event = rng.exponential(1.0 / cfg.event_rates[int(gg) - 1])
    t_cens = rng.exponential(1.0 / cfg.censoring_rate) if cfg.censoring_rate > 0 else np.inf
    t_cens = min(t_cens, cfg.max_follow_up)
    if t_event <= t_cens:
        return float(t_event), True
    return float(t_cens), False


def _rating(reference: int, error: float, rng) -> int:
    if rng.random() >= error:
        return reference
    step = 1 if rng.random() < 0.5 else -1
    if not 1 <= reference + step <= 4:
        step = -step
    return reference + step


def simulate_ratings(slides: list[SlideRecord], cfg: SyntheticConfig) -> RatingTable:
    """Ten raters grade every slide; three of nineteen raters grade each
    slide, spread as evenly as possible."""
    rng = np.random.default_rng([int(cfg.seed), 99])
    ten = [f"P{i + 1:02d}" for i in range(cfg.n_raters_ten)]
    nin = [f"P{cfg.n_raters_ten + i + 1:02d}" for i in range(cfg.n_raters_nineteen)]
    err = {r: rng.uniform(*cfg.rater_error) for r in ten + nin}
    load = np.zeros(len(nin))
    rs, rr, rg, rv = [], [], [], []
    for s, slide in enumerate(slides):
        ref = int(slide.reference_gg)
        for r in ten:
            rs.append(s), rr.append(r), rg.append(TEN), rv.append(_rating(ref, err[r], rng))
        order = np.lexsort((rng.random(len(nin)), load))
        for j in order[: cfg.nineteen_per_slide].tolist():
            load[j] += 1
            r = nin[j]
            rs.append(s), rr.append(r), rg.append(NINETEEN), rv.append(_rating(ref, err[r], rng))
    refs = np.array([int(s.reference_gg) for s in slides])
    return RatingTable([s.slide_id for s in slides], refs, np.zeros_like(refs),
                       np.array(rs), np.array(rr, dtype=object), np.array(rg, dtype=object),
                       np.array(rv),
                       reference_pcts=np.array([s.reference_pcts for s in slides]))


def synth_generate(cfg: SyntheticConfig) -> SyntheticDataset:
    """Generate every split of a synthetic cohort; deterministic in ``cfg.seed``."""
    slides, clinical, splits = [], [], {}
    for split in SPLITS:
        mix = np.asarray(cfg.gg_mix if split == "val" else cfg.train_gg_mix, dtype=np.float64)
        n = int(cfg.split_sizes.get(split, 0))
        if n == 0:
            continue
        targets_rng = np.random.default_rng([int(cfg.seed), SPLITS.index(split), 10**9])
        targets = targets_rng.choice(4, size=n, p=mix) + 1
        for i in range(n):
            rng = _slide_rng(cfg.seed, split, i)
            slide_id = f"{split}-{i:04d}"
            slide = generate_slide(slide_id, GradeGroup(int(targets[i])), cfg, rng)
            time, event = _follow_up(slide.reference_gg, cfg, rng)
            slides.append(slide)
            clinical.append(ClinicalRecord(slide_id, time, event))
            splits[slide_id] = split
    val = [s for s in slides if splits[s.slide_id] == "val"]
    ratings = simulate_ratings(val, cfg) if val else None
    return SyntheticDataset(slides, clinical, splits, ratings)
