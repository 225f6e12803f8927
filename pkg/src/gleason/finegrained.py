"""Fine-grained (quantitative) Gleason patterns.

A tumor patch's calibrated likelihoods are turned into a continuous pattern
value by interpolating between its two most likely tumor patterns. Two
interpolation rules are provided:

* ``quantitative_gp_verbatim``: ``P_lo + l_lo / (l_lo + l_hi)``. A pure GP3
  prediction maps to 4.0 under this rule.
* ``quantitative_gp_smooth``: ``P_lo + l_hi / (l_lo + l_hi)``, continuous and
  exact at one-hot predictions. This is the default everywhere else.

Values are rendered with a green -> yellow -> red ramp interpolated in
CIELAB and summarised into %GP3 / %GP3.5 / %GP4 / %GP4.5 / %GP5.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
from PIL import Image

from .core import N_CATEGORIES, LikelihoodMap
from .grader import argmax_severe

ANCHOR_RGB = {3.0: (0, 128, 0), 4.0: (255, 255, 0), 5.0: (255, 0, 0)}
BUCKET_CENTERS = (3.0, 3.5, 4.0, 4.5, 5.0)
BUCKET_EDGES = (3.25, 3.75, 4.25, 4.75)

# D65 reference white, 2-degree observer
_WHITE = np.array([0.95047, 1.0, 1.08883])
_RGB_TO_XYZ = np.array([[0.4124564, 0.3575761, 0.1804375],
                        [0.2126729, 0.7151522, 0.0721750],
                        [0.0193339, 0.1191920, 0.9503041]])
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
_DELTA = 6.0 / 29.0


def _tumor_likelihoods(likelihoods) -> np.ndarray:
    x = np.asarray(likelihoods, dtype=np.float64)
    if x.shape[-1] == N_CATEGORIES:
        x = x[..., 1:]
    elif x.shape[-1] != 3:
        raise ValueError("expected GP3/GP4/GP5 likelihoods or a full 4-vector")
    return x


def _top_two(tumor: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Pattern numbers and likelihoods of the two most likely tumor patterns,
    returned as (p_lo, p_hi, l_lo, l_hi). Equal likelihoods are ranked by
    closeness to the leading pattern, then severity."""
    if (tumor < 0).any() or not (tumor.sum(axis=-1) > 0).all():
        raise ValueError("at least one tumor likelihood must be positive")
    first = argmax_severe(tumor)
    idx = np.arange(3)
    dist = np.abs(idx - first[..., None])
    masked = np.where(idx == first[..., None], -np.inf, tumor)
    best = masked.max(axis=-1, keepdims=True)
    # among equally likely runners-up prefer adjacency, then severity
    key = np.where(masked == best, -2.0 * dist + 0.5 * idx, -np.inf)
    second = np.argmax(key, axis=-1)
    lo = np.minimum(first, second)
    hi = np.maximum(first, second)
    l_lo = np.take_along_axis(tumor, lo[..., None], -1)[..., 0]
    l_hi = np.take_along_axis(tumor, hi[..., None], -1)[..., 0]
    return lo + 3, hi + 3, l_lo, l_hi


def quantitative_gp_verbatim(likelihoods):
    tumor = _tumor_likelihoods(likelihoods)
    p_lo, _, l_lo, l_hi = _top_two(tumor)
    out = p_lo + l_lo / (l_lo + l_hi)
    return float(out) if np.ndim(out) == 0 else out


def quantitative_gp_smooth(likelihoods):
    tumor = _tumor_likelihoods(likelihoods)
    p_lo, _, l_lo, l_hi = _top_two(tumor)
    out = p_lo + l_hi / (l_lo + l_hi)
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------
# colour


def srgb_to_lab(rgb) -> np.ndarray:
    """8-bit sRGB (..., 3) to CIELAB under D65."""
    c = np.asarray(rgb, dtype=np.float64) / 255.0
    lin = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _RGB_TO_XYZ.T / _WHITE
    f = np.where(xyz > _DELTA ** 3, np.cbrt(xyz), xyz / (3 * _DELTA ** 2) + 4.0 / 29.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def lab_to_srgb(lab) -> np.ndarray:
    """CIELAB (..., 3) to unrounded 8-bit-scale sRGB, clipped to [0, 255]."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    f = np.stack([fy + lab[..., 1] / 500.0, fy, fy - lab[..., 2] / 200.0], axis=-1)
    xyz = np.where(f > _DELTA, f ** 3, 3 * _DELTA ** 2 * (f - 4.0 / 29.0)) * _WHITE
    lin = np.clip(xyz @ _XYZ_TO_RGB.T, 0.0, 1.0)
    c = np.where(lin <= 0.0031308, 12.92 * lin, 1.055 * lin ** (1 / 2.4) - 0.055)
    return np.clip(c * 255.0, 0.0, 255.0)


_ANCHOR_X = np.array(sorted(ANCHOR_RGB))
_ANCHOR_LAB = srgb_to_lab(np.array([ANCHOR_RGB[x] for x in _ANCHOR_X]))


def colormap_lab(qgp) -> np.ndarray:
    """Lab coordinates of the colour ramp at ``qgp`` (clamped to [3, 5])."""
    q = np.clip(np.asarray(qgp, dtype=np.float64), _ANCHOR_X[0], _ANCHOR_X[-1])
    return np.stack([np.interp(q, _ANCHOR_X, _ANCHOR_LAB[:, i]) for i in range(3)], axis=-1)


def colormap_cielab(qgp):
    """8-bit sRGB colour of a quantitative pattern value; scalar input gives
    a tuple, array input an (..., 3) uint8 array."""
    rgb = np.rint(lab_to_srgb(colormap_lab(qgp))).astype(np.uint8)
    return tuple(int(v) for v in rgb) if np.ndim(qgp) == 0 else rgb


# --------------------------------------------------------------------------
# retrieval and summaries


def exemplar_retrieval(target: float, patches: Sequence[tuple[Any, float]]):
    """Reference of the patch whose value is closest to ``target``; the first
    one wins ties."""
    if len(patches) == 0:
        raise ValueError("no candidate patches")
    values = np.fromiter((q for _, q in patches), dtype=np.float64, count=len(patches))
    return patches[int(np.argmin(np.abs(values - target)))][0]


@dataclass(frozen=True)
class FineGrainedFeatures:
    pct_gp3: float
    pct_gp35: float
    pct_gp4: float
    pct_gp45: float
    pct_gp5: float

    def as_array(self) -> np.ndarray:
        return np.array([self.pct_gp3, self.pct_gp35, self.pct_gp4, self.pct_gp45, self.pct_gp5])


def bucket_index(qgp) -> np.ndarray:
    """Index into BUCKET_CENTERS; bins are closed on the right."""
    return np.searchsorted(np.asarray(BUCKET_EDGES), np.asarray(qgp, dtype=np.float64), side="left")


def bucket_percentages(qgps) -> FineGrainedFeatures:
    q = np.asarray(qgps, dtype=np.float64).ravel()
    if q.size == 0:
        return FineGrainedFeatures(0.0, 0.0, 0.0, 0.0, 0.0)
    counts = np.bincount(bucket_index(q), minlength=len(BUCKET_CENTERS))
    return FineGrainedFeatures(*(float(x) for x in 100.0 * counts / q.size))


def tumor_qgp(calibrated, tissue_mask=None) -> tuple[np.ndarray, np.ndarray]:
    """Flat indices of tumor-predicted tissue patches and their smooth qGP."""
    values = calibrated.flat() if isinstance(calibrated, LikelihoodMap) else np.asarray(calibrated)
    values = np.asarray(values, dtype=np.float64).reshape(-1, N_CATEGORIES)
    tissue = ~np.isnan(values).any(axis=1)
    if tissue_mask is not None:
        tissue &= np.asarray(tissue_mask, dtype=bool).reshape(-1)
    cats = np.full(values.shape[0], -1)
    cats[tissue] = argmax_severe(values[tissue])
    idx = np.flatnonzero(cats > 0)
    if idx.size == 0:
        return idx, np.zeros(0)
    return idx, np.atleast_1d(quantitative_gp_smooth(values[idx]))


def finegrained_features(calibrated, tissue_mask=None) -> FineGrainedFeatures:
    """Bucket every tumor patch's smooth qGP to the nearest of 3, 3.5, 4,
    4.5, 5 and report percentages over tumor patches."""
    _, q = tumor_qgp(calibrated, tissue_mask)
    return bucket_percentages(q)


def render_heatmap(calibrated, background: str = "transparent") -> Image.Image:
    """One pixel per patch: tumor patches coloured by qGP, everything else
    transparent or white. ``calibrated`` is a map or a (rows, cols, 4) array."""
    if background not in ("transparent", "white"):
        raise ValueError("background must be 'transparent' or 'white'")
    rows, cols = calibrated.shape[:2]
    rgba = np.zeros((rows * cols, 4), dtype=np.uint8)
    if background == "white":
        rgba[:] = (255, 255, 255, 255)
    idx, q = tumor_qgp(calibrated)
    if idx.size:
        rgba[idx, :3] = colormap_cielab(q)
        rgba[idx, 3] = 255
    return Image.fromarray(rgba.reshape(rows, cols, 4))
