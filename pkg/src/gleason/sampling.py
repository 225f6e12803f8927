"""Training-patch sampling with quasi-online hard-negative mining.

A draw picks a category with fixed ratios (non-tumor : GP3 : GP4 : GP5 =
4 : 2 : 2 : 1), then a slide uniformly among the slides that still have
sampling mass for that category, then a patch from that slide according to
per-patch weights. Weights start uniform; a mining round resets them to be
proportional to each patch's current cross-entropy loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .classifier import LIKELIHOOD_FLOOR, PatchClassifier
from .core import N_CATEGORIES, PatternCategory, SlideRecord

DEFAULT_RATIOS = (4.0, 2.0, 2.0, 1.0)


class WeightedIndex:
    """Fenwick tree over nonnegative slot weights.

    Point updates and draws both cost O(log n). ``sample(u)`` with
    ``u`` uniform on [0, 1) returns slot ``i`` with probability
    ``w[i] / sum(w)``; ``u`` may be an array.
    """

    def __init__(self, weights):
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a non-empty 1-d array")
        self._n = w.size
        self._top = 1 << (self._n.bit_length() - 1)
        self.assign(w)

    def __len__(self) -> int:
        return self._n

    def assign(self, weights) -> None:
        """Replace all weights at once (O(n) rebuild)."""
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (self._n,):
            raise ValueError("weight vector has the wrong length")
        if (w < 0).any() or not np.isfinite(w).all():
            raise ValueError("weights must be finite and nonnegative")
        self._w = w.copy()
        tree = np.zeros(self._n + 1)
        tree[1:] = w
        for i in range(1, self._n + 1):
            parent = i + (i & -i)
            if parent <= self._n:
                tree[parent] += tree[i]
        self._tree = tree

    @property
    def weights(self) -> np.ndarray:
        return self._w.copy()

    def __getitem__(self, i: int) -> float:
        return float(self._w[i])

    def update(self, i: int, weight: float) -> None:
        if weight < 0 or not math.isfinite(weight):
            raise ValueError("weights must be finite and nonnegative")
        self._w[i] = weight
        # rebuild each touched node from its children; delta updates cancel
        # catastrophically when a large weight is replaced by a tiny one
        j = i + 1
        while j <= self._n:
            low = j & -j
            s = self._w[j - 1]
            step = 1
            while step < low:
                s += self._tree[j - step]
                step <<= 1
            self._tree[j] = s
            j += low

    def prefix(self, i: int) -> float:
        """Sum of the first ``i`` weights."""
        s = 0.0
        while i > 0:
            s += self._tree[i]
            i -= i & -i
        return s

    @property
    def total(self) -> float:
        return self.prefix(self._n)

    def sample(self, u):
        total = self.total
        if not total > 0:
            raise ValueError("cannot sample from an all-zero weight vector")
        scalar = np.ndim(u) == 0
        target = np.atleast_1d(np.asarray(u, dtype=np.float64)) * total
        pos = np.zeros(target.shape, dtype=np.int64)
        step = self._top
        while step:
            nxt = pos + step
            ok = nxt <= self._n
            val = self._tree[np.where(ok, nxt, 0)]
            move = ok & (val <= target)
            target = np.where(move, target - val, target)
            pos = np.where(move, nxt, pos)
            step >>= 1
        # rounding can push a draw past the last positive slot
        over = (pos >= self._n) | (self._w[np.minimum(pos, self._n - 1)] == 0)
        if over.any():
            pos[over] = self._fallback(pos[over])
        return int(pos[0]) if scalar else pos

    def _fallback(self, pos: np.ndarray) -> np.ndarray:
        positive = np.flatnonzero(self._w > 0)
        k = np.searchsorted(positive, np.minimum(pos, self._n - 1), side="right") - 1
        return positive[np.clip(k, 0, None)]


@dataclass
class PatchGroup:
    slide: int
    category: int
    patches: np.ndarray
    index: WeightedIndex


@dataclass
class SamplerState:
    slide_ids: list[str]
    groups: dict[tuple[int, int], PatchGroup]
    category_ratios: tuple[float, float, float, float] = DEFAULT_RATIOS
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        r = np.asarray(self.category_ratios, dtype=np.float64)
        if r.shape != (N_CATEGORIES,) or (r < 0).any() or r.sum() <= 0:
            raise ValueError("category_ratios must be four nonnegative numbers")
        self.rng = np.random.default_rng(self.seed)

    @classmethod
    def from_slides(cls, slides: Sequence[SlideRecord],
                    category_ratios=DEFAULT_RATIOS, seed: int = 0) -> "SamplerState":
        groups = {}
        for s, slide in enumerate(slides):
            truth = slide.resolved_labels()
            for c in range(N_CATEGORIES):
                patches = np.flatnonzero(truth == c)
                if patches.size:
                    groups[(s, c)] = PatchGroup(s, c, patches, WeightedIndex(np.ones(patches.size)))
        return cls([s.slide_id for s in slides], groups, tuple(category_ratios), seed)

    def slides_with(self, category: int) -> list[int]:
        return sorted(s for (s, c), g in self.groups.items()
                      if c == category and g.index.total > 0)

    def category_probabilities(self) -> np.ndarray:
        """Draw probabilities after discarding categories no slide can serve
        (equivalent to rejecting and redrawing them)."""
        r = np.asarray(self.category_ratios, dtype=np.float64)
        avail = np.array([bool(self.slides_with(c)) for c in range(N_CATEGORIES)])
        r = np.where(avail, r, 0.0)
        if r.sum() <= 0:
            raise ValueError("no slide contains any category with a positive sampling ratio")
        return r / r.sum()


def sample_training_patches(state: SamplerState, n: int
                            ) -> list[tuple[str, int, PatternCategory]]:
    """Draw ``n`` training patches as ``(slide_id, patch_index, category)``."""
    rng = state.rng
    probs = state.category_probabilities()
    cats = rng.choice(N_CATEGORIES, size=n, p=probs)
    slide_of = np.empty(n, dtype=np.int64)
    patch_of = np.empty(n, dtype=np.int64)
    for c in range(N_CATEGORIES):
        where = np.flatnonzero(cats == c)
        if where.size == 0:
            continue
        pool = np.asarray(state.slides_with(c))
        slide_of[where] = pool[rng.integers(0, pool.size, size=where.size)]
        for s in np.unique(slide_of[where]).tolist():
            sel = where[slide_of[where] == s]
            group = state.groups[(s, c)]
            patch_of[sel] = group.patches[group.index.sample(rng.random(sel.size))]
    return [(state.slide_ids[s], int(p), PatternCategory(int(c)))
            for s, p, c in zip(slide_of.tolist(), patch_of.tolist(), cats.tolist())]


def sample_training_patch(state: SamplerState) -> tuple[str, int, PatternCategory]:
    return sample_training_patches(state, 1)[0]


def cross_entropy_loss(prediction, true_category: int) -> float:
    return float(-math.log(max(float(np.asarray(prediction)[int(true_category)]),
                                LIKELIHOOD_FLOOR)))


def patch_losses(prediction: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Vectorised cross-entropy for rows of ``prediction`` with labels ``truth``."""
    p = prediction[np.arange(truth.size), truth]
    return -np.log(np.maximum(p, LIKELIHOOD_FLOOR))


@dataclass(frozen=True)
class LossRecord:
    slide_id: str
    patch_index: int
    loss: float


def mining_round(state: SamplerState, classifier: PatchClassifier,
                 slides: Sequence[SlideRecord],
                 loss_log: Optional[list[LossRecord]] = None) -> SamplerState:
    """Re-weight every (slide, category) group proportionally to the current
    per-patch loss; groups whose losses are all zero go back to uniform.

    ``slides`` must be the slides the state was built from, in order.
    Mutates and returns ``state``; appends per-patch losses to ``loss_log``.
    """
    if [s.slide_id for s in slides] != state.slide_ids:
        raise ValueError("slides do not match the sampler state")
    for s, slide in enumerate(slides):
        pred = classifier.predict_slide(slide)
        for c in range(N_CATEGORIES):
            group = state.groups.get((s, c))
            if group is None:
                continue
            losses = patch_losses(pred[group.patches], np.full(group.patches.size, c))
            if loss_log is not None:
                loss_log.extend(LossRecord(slide.slide_id, int(p), float(l))
                                for p, l in zip(group.patches.tolist(), losses.tolist()))
            if not (losses > 0).any():
                losses = np.ones_like(losses)
            group.index.assign(losses)
    return state


@dataclass
class MiningReport:
    rounds: int
    draws_per_category: np.ndarray
    loss_logs: list[list[LossRecord]]


def run_mining(state: SamplerState, classifier: PatchClassifier,
               slides: Sequence[SlideRecord], rounds: int, cadence: int) -> MiningReport:
    """Alternate ``cadence`` training draws with a mining round, ``rounds`` times."""
    counts = np.zeros(N_CATEGORIES, dtype=np.int64)
    logs = []
    for _ in range(rounds):
        for _, _, c in sample_training_patches(state, cadence):
            counts[int(c)] += 1
        log: list[LossRecord] = []
        mining_round(state, classifier, slides, log)
        logs.append(log)
    return MiningReport(rounds, counts, logs)
